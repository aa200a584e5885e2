import itertools

import numpy as np
import pytest

from protoadapt.bundle_io import FeatureBundle
from protoadapt.errors import ConfigError
from protoadapt.masks import iou
from protoadapt.metrics import (SegmentPrediction, compute_ap, compute_miou,
                                compute_pq, infer_panoptic, infer_semantic,
                                iou_histogram, merge_stuff, oracle_relabel,
                                render_semantic)
from protoadapt.prototypes import PrototypeBank
from protoadapt.rng import Rng

from conftest import rect_mask


def seg(mask, cls, score=1.0):
    return SegmentPrediction(np.asarray(mask, np.uint8), cls, score)


# --- brute-force PQ oracle -----------------------------------------------------

def brute_force_pq(preds, gts):
    """Max-total-IoU one-to-one matching over same-class, IoU>0.5 pairs."""
    pairs = [(i, j, iou(p.mask, g[0]))
             for i, p in enumerate(preds) for j, g in enumerate(gts)
             if p.class_id == g[1] and iou(p.mask, g[0]) > 0.5]
    best = (0.0, 0)
    for r in range(len(pairs) + 1):
        for combo in itertools.combinations(pairs, r):
            rows = [c[0] for c in combo]
            cols = [c[1] for c in combo]
            if len(set(rows)) != len(rows) or len(set(cols)) != len(cols):
                continue
            total = sum(c[2] for c in combo)
            if (total, r) > best:
                best = (total, r)
    iou_sum, tp = best
    fp = len(preds) - tp
    fn = len(gts) - tp
    denom = tp + 0.5 * fp + 0.5 * fn
    if denom == 0:
        return 0.0
    return iou_sum / denom


# --- infer_semantic --------------------------------------------------------------

def scored_bundle(text_rows, masks, h=4, w=4, d=2, gt=None):
    n = len(text_rows)
    text = np.array(text_rows, np.float32)
    return FeatureBundle(
        "sb", np.zeros((h, w, d), np.float32),
        np.zeros((n, d), np.float32), text,
        pred_masks=[np.asarray(m, np.uint8) for m in masks],
        gt_segments=gt).validate()


def test_semantic_single_query_left_half():
    left = rect_mask(4, 4, 0, 4, 0, 2)
    bundle = scored_bundle([[10.0, 0.0]], [left])  # C=1: favors class 0
    out = infer_semantic(bundle, PrototypeBank.text_only(1, 2))
    assert np.all(out == 0)


def test_semantic_uncovered_pixels_tie_to_lowest_class():
    left = rect_mask(4, 4, 0, 4, 0, 2)
    bundle = scored_bundle([[0.0, 10.0, 0.0]], [left])  # C=2, favors class 1
    out = infer_semantic(bundle, PrototypeBank.text_only(2, 2))
    assert np.all(out[:, :2] == 1)
    assert np.all(out[:, 2:] == 0)  # zero votes everywhere: argmax tie -> 0


def test_semantic_alpha_zero_matches_text_only_decoding():
    rng = Rng(40)
    masks = [rect_mask(4, 4, 0, 4, 0, 2), rect_mask(4, 4, 0, 4, 2, 4)]
    bundle = FeatureBundle(
        "t", rng.gauss_n(32).reshape(4, 4, 2).astype(np.float32),
        rng.gauss_n(4).reshape(2, 2).astype(np.float32),
        np.array([[5.0, 0.0, 0.0], [0.0, 4.0, 0.0]], np.float32),
        pred_masks=masks).validate()
    text_only = infer_semantic(bundle, PrototypeBank.text_only(2, 2))
    with_protos = infer_semantic(
        bundle, PrototypeBank(rng.gauss_n(6).reshape(3, 2), 0.0, "combined"))
    assert np.array_equal(text_only, with_protos)
    assert np.all(text_only[:, :2] == 0)
    assert np.all(text_only[:, 2:] == 1)


# --- infer_panoptic ---------------------------------------------------------------

def test_panoptic_two_disjoint_confident_survive():
    a = rect_mask(4, 4, 0, 4, 0, 2)
    b = rect_mask(4, 4, 0, 4, 2, 4)
    bundle = scored_bundle([[10.0, 0.0, 0.0], [0.0, 10.0, 0.0]], [a, b])
    segs = infer_panoptic(bundle, PrototypeBank.text_only(2, 2))
    assert len(segs) == 2
    assert {s.class_id for s in segs} == {0, 1}


def test_panoptic_duplicate_query_keeps_one():
    m = rect_mask(4, 4, 0, 4, 0, 4)
    bundle = scored_bundle([[10.0, 0.0, 0.0], [10.0, 0.0, 0.0]], [m, m])
    segs = infer_panoptic(bundle, PrototypeBank.text_only(2, 2))
    assert len(segs) == 1


def test_panoptic_nested_mask_dropped_by_overlap():
    big = rect_mask(10, 10, 0, 10, 0, 10)          # 100 cells
    small_a = rect_mask(10, 10, 0, 10, 0, 5)       # claims 50
    small_b = rect_mask(10, 10, 0, 7, 5, 10)       # claims 35 more
    # smaller segments must outscore the big one: big keeps 15% < 0.8
    bundle = scored_bundle(
        [[8.0, 0.0, 0.0], [0.0, 9.0, 0.0], [0.0, 9.0, 0.0]],
        [big, small_a, small_b], h=10, w=10)
    segs = infer_panoptic(bundle, PrototypeBank.text_only(2, 2),
                          score_thresh=0.5, overlap_thresh=0.8)
    assert len(segs) == 2
    claimed = sum(int(s.mask.sum()) for s in segs)
    assert claimed == 85


def test_panoptic_low_scores_dropped():
    m = rect_mask(4, 4, 0, 4, 0, 4)
    bundle = scored_bundle([[0.1, 0.0, 0.0]], [m])  # near-uniform softmax
    segs = infer_panoptic(bundle, PrototypeBank.text_only(2, 2),
                          score_thresh=0.8)
    assert segs == []


def test_panoptic_outputs_disjoint():
    rng = Rng(41)
    masks = []
    for _ in range(6):
        y0, x0 = rng.index(5), rng.index(5)
        masks.append(rect_mask(6, 6, y0, y0 + 1 + rng.index(6 - y0),
                               x0, x0 + 1 + rng.index(6 - x0)))
    rows = [[10.0 if rng.uniform() > 0.3 else 0.0, 0.0, 0.0] for _ in range(6)]
    bundle = scored_bundle(rows, masks, h=6, w=6)
    segs = infer_panoptic(bundle, PrototypeBank.text_only(2, 2),
                          score_thresh=0.5)
    stack = np.zeros((6, 6), np.int64)
    for s in segs:
        stack += s.mask
    assert stack.max() <= 1


# --- oracle_relabel ----------------------------------------------------------------

def test_oracle_exact_match_takes_gt_class():
    m = rect_mask(4, 4, 0, 2, 0, 4)
    preds = [seg(m, 1)]
    out = oracle_relabel(preds, [(m, 3)])
    assert out[0].class_id == 3


def test_oracle_no_overlap_keeps_class():
    preds = [seg(rect_mask(4, 4, 0, 2, 0, 2), 1)]
    out = oracle_relabel(preds, [(rect_mask(4, 4, 2, 4, 2, 4), 3)])
    assert out[0].class_id == 1


def test_oracle_never_hurts_semantic_rendering():
    rng = Rng(42)
    h = w = 6
    for _ in range(10):
        gt = [(rect_mask(h, w, 0, 3, 0, w), rng.index(3)),
              (rect_mask(h, w, 3, 6, 0, w), rng.index(3))]
        preds = [seg(m, rng.index(3), 1.0) for m, _ in gt]
        raw = render_semantic(preds, h, w)
        fixed = render_semantic(oracle_relabel(preds, gt), h, w)
        gt_map = render_semantic([seg(m, c) for m, c in gt], h, w)
        miou_raw = compute_miou(raw, gt_map, 3)[0]
        miou_fix = compute_miou(fixed, gt_map, 3)[0]
        assert miou_fix >= miou_raw - 1e-12


# --- compute_miou ------------------------------------------------------------------

def test_miou_perfect():
    m = np.array([[0, 1], [2, 1]])
    miou, per_class = compute_miou(m, m, 3)
    assert miou == 1.0
    assert per_class == {0: 1.0, 1: 1.0, 2: 1.0}


def test_miou_half_scene():
    pred = np.zeros((2, 4), np.int64)
    gt = np.zeros((2, 4), np.int64)
    gt[:, 2:] = 1
    miou, per_class = compute_miou(pred, gt, 2)
    assert per_class[0] == pytest.approx(0.5)
    assert per_class[1] == 0.0
    assert miou == pytest.approx(0.25)


def test_miou_absent_class_excluded():
    pred = np.zeros((2, 2), np.int64)
    gt = np.zeros((2, 2), np.int64)
    miou, per_class = compute_miou(pred, gt, 5)
    assert set(per_class) == {0}
    assert miou == 1.0


def test_miou_identity_property():
    rng = Rng(43)
    p = np.array([[rng.index(4) for _ in range(5)] for _ in range(5)])
    assert compute_miou(p, p, 4)[0] == 1.0


def test_miou_ignores_negative_gt():
    pred = np.zeros((2, 2), np.int64)
    gt = np.full((2, 2), -1, np.int64)
    gt[0, 0] = 0
    miou, _ = compute_miou(pred, gt, 2)
    assert miou == 1.0


# --- compute_pq --------------------------------------------------------------------

def test_pq_perfect():
    gt = [(rect_mask(4, 4, 0, 2, 0, 4), 0), (rect_mask(4, 4, 2, 4, 0, 4), 1)]
    preds = [seg(m, c) for m, c in gt]
    pq, sq, rq = compute_pq(preds, gt)
    assert (pq, sq, rq) == (1.0, 1.0, 1.0)


def test_pq_formula_point_eight_case():
    # one TP at IoU 0.8, one FP, one FN: PQ = 0.8 / (1 + 0.5 + 0.5) = 0.4
    gt_mask = np.zeros((1, 10), np.uint8); gt_mask[0, :5] = 1
    pred_mask = np.zeros((1, 10), np.uint8); pred_mask[0, :4] = 1
    assert iou(pred_mask, gt_mask) == pytest.approx(0.8)
    fp_mask = np.zeros((1, 10), np.uint8); fp_mask[0, 6:8] = 1
    fn_mask = np.zeros((1, 10), np.uint8); fn_mask[0, 8:10] = 1
    preds = [seg(pred_mask, 0), seg(fp_mask, 1)]
    gts = [(gt_mask, 0), (fn_mask, 2)]
    pq, sq, rq = compute_pq(preds, gts)
    assert pq == pytest.approx(0.4, abs=1e-9)
    assert sq == pytest.approx(0.8)
    assert rq == pytest.approx(0.5)
    assert pq == pytest.approx(sq * rq)


def test_pq_boundary_half_iou_not_matched():
    a = rect_mask(1, 4, 0, 1, 0, 2)  # contained in b: inter 2, union 4
    b = rect_mask(1, 4, 0, 1, 0, 4)
    assert iou(a, b) == pytest.approx(0.5)  # strict > excludes it
    pq, _, _ = compute_pq([seg(a, 0)], [(b, 0)])
    assert pq == 0.0


def test_pq_requires_disjoint_predictions():
    m = rect_mask(2, 2, 0, 2, 0, 2)
    with pytest.raises(ConfigError):
        compute_pq([seg(m, 0), seg(m, 1)], [(m, 0)])


def test_pq_matches_brute_force_small_scenes():
    rng = Rng(44)
    for _ in range(40):
        h = w = 6
        cells = np.arange(h * w)
        # carve the grid into disjoint random rectangles for both sides
        def random_disjoint(count):
            segs = []
            claimed = np.zeros((h, w), bool)
            for _ in range(count):
                y0, x0 = rng.index(h - 1), rng.index(w - 1)
                m = np.zeros((h, w), np.uint8)
                m[y0:y0 + 1 + rng.index(3), x0:x0 + 1 + rng.index(3)] = 1
                m[claimed] = 0
                if m.sum() == 0:
                    continue
                claimed |= m.astype(bool)
                segs.append(m)
            return segs

        preds = [seg(m, rng.index(2)) for m in random_disjoint(1 + rng.index(4))]
        gts = [(m, rng.index(2)) for m in random_disjoint(1 + rng.index(4))]
        pq, _, _ = compute_pq(preds, gts)
        assert pq == pytest.approx(brute_force_pq(preds, gts), abs=1e-9)


def test_merge_stuff_unions_same_class():
    a = seg(rect_mask(4, 4, 0, 2, 0, 2), 1, 0.9)
    b = seg(rect_mask(4, 4, 2, 4, 2, 4), 1, 0.8)
    c = seg(rect_mask(4, 4, 0, 2, 2, 4), 0, 0.7)
    merged = merge_stuff([a, b, c], stuff_ids=[1])
    stuff = [s for s in merged if s.class_id == 1]
    assert len(stuff) == 1
    assert stuff[0].mask.sum() == 8
    assert len(merged) == 2


# --- compute_ap --------------------------------------------------------------------

def test_ap_perfect_predictions():
    gt = [(rect_mask(4, 4, 0, 2, 0, 4), 0), (rect_mask(4, 4, 2, 4, 0, 4), 1)]
    preds = [seg(m, c, 0.9) for m, c in gt]
    ap50, mean_ap = compute_ap([(preds, gt)])
    assert ap50 == 1.0
    assert mean_ap == 1.0


def test_ap_fp_after_full_recall_keeps_ap50_one():
    gt_mask = rect_mask(4, 4, 0, 2, 0, 4)
    tp = seg(gt_mask, 0, 0.9)
    fp = seg(rect_mask(4, 4, 2, 4, 0, 4), 0, 0.5)
    ap50, _ = compute_ap([([tp, fp], [(gt_mask, 0)])], thresholds=(0.5,))
    assert ap50 == 1.0


def test_ap_low_iou_counts_as_fp():
    gt_mask = np.zeros((1, 20), np.uint8); gt_mask[0, :10] = 1
    pred = np.zeros((1, 20), np.uint8); pred[0, 7:17] = 1
    assert iou(pred, gt_mask) == pytest.approx(3 / 17)  # well under 0.5
    ap50, _ = compute_ap([([seg(pred, 0, 0.9)], [(gt_mask, 0)])],
                         thresholds=(0.5,))
    assert ap50 == 0.0


def test_ap_boundary_iou_at_threshold_counts():
    a = rect_mask(1, 4, 0, 1, 0, 2)  # contained in b: inter 2, union 4
    b = rect_mask(1, 4, 0, 1, 0, 4)
    assert iou(a, b) == pytest.approx(0.5)  # >= at the AP threshold
    ap50, _ = compute_ap([([seg(a, 0, 0.9)], [(b, 0)])], thresholds=(0.5,))
    assert ap50 == 1.0


def test_ap_missed_gt_halves_recall():
    gt = [(rect_mask(4, 4, 0, 2, 0, 4), 0), (rect_mask(4, 4, 2, 4, 0, 4), 0)]
    preds = [seg(gt[0][0], 0, 0.9)]
    ap50, _ = compute_ap([(preds, gt)], thresholds=(0.5,))
    assert ap50 == pytest.approx(0.5)


# --- iou_histogram -----------------------------------------------------------------

def test_histogram_exact_matches_top_bin():
    gt = [(rect_mask(4, 4, 0, 2, 0, 4), 0), (rect_mask(4, 4, 2, 4, 0, 4), 1)]
    preds = [seg(m, c) for m, c in gt]
    hist = iou_histogram(preds, gt)
    assert list(hist) == [0] * 9 + [2]


def test_histogram_085_lands_in_bin_8():
    gt_mask = np.zeros((1, 20), np.uint8); gt_mask[0, :17] = 1
    pred = np.zeros((1, 20), np.uint8); pred[0, :20] = 1
    # iou = 17/20 = 0.85
    hist = iou_histogram([seg(pred, 0)], [(gt_mask, 0)])
    assert hist[8] == 1
    assert hist.sum() == 1


def test_histogram_no_gt_lands_in_bottom_bin():
    hist = iou_histogram([seg(rect_mask(2, 2, 0, 1, 0, 1), 0)], [])
    assert hist[0] == 1


# --- aggregate evaluation ------------------------------------------------------

def test_thread_cap_does_not_change_results(monkeypatch):
    from protoadapt.metrics import evaluate_bundles
    rng = Rng(60)
    bundles = []
    for i in range(4):
        masks = [rect_mask(6, 6, 0, 3, 0, 6), rect_mask(6, 6, 3, 6, 0, 6)]
        text = np.zeros((2, 3), np.float32)
        text[0, i % 2] = 10.0
        text[1, (i + 1) % 2] = 10.0
        bundles.append(FeatureBundle(
            f"t{i}", rng.gauss_n(72).reshape(6, 6, 2).astype(np.float32),
            rng.gauss_n(4).reshape(2, 2).astype(np.float32), text,
            pred_masks=masks,
            gt_segments=[(masks[0], i % 2), (masks[1], (i + 1) % 2)],
        ).validate())
    bank = PrototypeBank.text_only(2, 2)
    monkeypatch.setenv("PROTO_ADAPT_THREADS", "1")
    serial = evaluate_bundles(bundles, bank)
    monkeypatch.setenv("PROTO_ADAPT_THREADS", "4")
    threaded = evaluate_bundles(bundles, bank)
    assert serial.to_dict() == threaded.to_dict()
    assert serial.miou == 1.0
