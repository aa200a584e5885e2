"""Decoding fused scores into segmentation outputs, and scoring them.

Semantic maps come from probability-weighted mask voting; panoptic
output greedily claims pixels by segment confidence; evaluation covers
mean IoU, panoptic quality, a simplified mask AP, the per-prediction
IoU histogram, and the oracle relabeling used to separate localization
error from classification error.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bundle_io import FeatureBundle
from .errors import ConfigError
from .masks import iou_matrix, mask_logits
from .matching import assign_targets
from .prototypes import PrototypeBank, fused_scores, predicted_masks
from .training import softmax_rows

AP_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class SegmentPrediction:
    mask: np.ndarray  # (H, W) uint8
    class_id: int
    score: float


@dataclass
class EvalReport:
    miou: float
    per_class_iou: dict[int, float]
    pq: float
    sq: float
    rq: float
    ap50: float | None
    map: float | None
    iou_histogram: list[int]
    query_accuracy: float | None = None
    per_image: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "per_class_iou": {str(k): v for k, v in self.per_class_iou.items()},
            "pq": self.pq, "sq": self.sq, "rq": self.rq,
            "ap50": self.ap50, "map": self.map,
            "iou_histogram": self.iou_histogram,
            "query_accuracy": self.query_accuracy,
            "per_image": self.per_image,
        }


def _mask_probs(bundle: FeatureBundle) -> np.ndarray:
    """Per-query soft masks, (N, H, W) in [0, 1].

    Provided binary masks are authoritative (they came from the real
    decoder); otherwise the raw logits are decoded and squashed.
    """
    if bundle.pred_masks is not None:
        return np.stack(bundle.pred_masks).astype(np.float64)
    logits = mask_logits(bundle.features, bundle.queries)
    return 1.0 / (1.0 + np.exp(-logits))


def infer_semantic(bundle: FeatureBundle, bank: PrototypeBank) -> np.ndarray:
    """Per-pixel class map (H, W) int64 over the non-void classes.

    Pixel logit for class k is the probability-weighted sum of each
    query's soft mask; argmax ties resolve to the lowest class index.
    """
    probs = softmax_rows(fused_scores(bundle, bank))  # (N, C+1)
    soft = _mask_probs(bundle)                        # (N, H, W)
    c = bundle.C
    votes = np.tensordot(probs[:, :c].T, soft, axes=([1], [0]))  # (C, H, W)
    return votes.argmax(axis=0)


def infer_panoptic(bundle: FeatureBundle, bank: PrototypeBank,
                   score_thresh: float = 0.8,
                   overlap_thresh: float = 0.8) -> list[SegmentPrediction]:
    """Non-overlapping segments by greedy pixel claiming.

    A query's score is its best non-void class probability times the
    mean soft-mask value inside its binary mask. Low scores are dropped
    up front; surviving segments claim pixels in score order (ties by
    query index) and are dropped when too little of their original mask
    survives.
    """
    probs = softmax_rows(fused_scores(bundle, bank))
    soft = _mask_probs(bundle)
    hard = [np.asarray(m, dtype=bool) for m in predicted_masks(bundle)]
    c = bundle.C

    candidates = []
    for i in range(bundle.N):
        area = int(hard[i].sum())
        if area == 0:
            continue
        cls = int(np.argmax(probs[i, :c]))
        score = float(probs[i, cls]) * float(soft[i][hard[i]].mean())
        if score < score_thresh:
            continue
        candidates.append((-score, i, cls, area))
    candidates.sort()

    claimed = np.zeros((bundle.H, bundle.W), dtype=bool)
    out: list[SegmentPrediction] = []
    for neg_score, i, cls, area in candidates:
        kept = hard[i] & ~claimed
        if kept.sum() / area < overlap_thresh:
            continue
        claimed |= kept
        out.append(SegmentPrediction(kept.astype(np.uint8), cls, -neg_score))
    return out


def oracle_relabel(predictions: list[SegmentPrediction],
                   gt: list[tuple[np.ndarray, int]]
                   ) -> list[SegmentPrediction]:
    """Replace each prediction's class with its best-IoU GT class.

    Predictions overlapping no GT segment keep their class: only the
    classification of localized masks is being swapped out.
    """
    if not gt or not predictions:
        return list(predictions)
    ious = iou_matrix([p.mask for p in predictions], [m for m, _ in gt])
    out = []
    for i, pred in enumerate(predictions):
        g = int(np.argmax(ious[i]))
        cls = gt[g][1] if ious[i, g] > 0.0 else pred.class_id
        out.append(SegmentPrediction(pred.mask, cls, pred.score))
    return out


def render_semantic(segments: list[SegmentPrediction], h: int, w: int,
                    fill: int = 0) -> np.ndarray:
    """Paint disjoint segments onto a class map; unclaimed pixels get ``fill``."""
    out = np.full((h, w), fill, dtype=np.int64)
    for seg in segments:
        out[seg.mask.astype(bool)] = seg.class_id
    return out


def render_gt_map(gt: list[tuple[np.ndarray, int]], h: int, w: int,
                  fill: int = -1) -> np.ndarray:
    out = np.full((h, w), fill, dtype=np.int64)
    for mask, cid in gt:
        out[np.asarray(mask, dtype=bool)] = cid
    return out


# --- semantic scoring -----------------------------------------------------

def miou_counts(pred_map: np.ndarray, gt_map: np.ndarray, num_classes: int
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(tp, fp, fn) pixel counts per class; gt pixels < 0 are ignored."""
    pred_map = np.asarray(pred_map)
    gt_map = np.asarray(gt_map)
    if pred_map.shape != gt_map.shape:
        raise ConfigError("prediction and GT maps must share a shape")
    valid = gt_map >= 0
    tp = np.zeros(num_classes, dtype=np.int64)
    fp = np.zeros(num_classes, dtype=np.int64)
    fn = np.zeros(num_classes, dtype=np.int64)
    for k in range(num_classes):
        p = (pred_map == k) & valid
        g = gt_map == k
        tp[k] = np.sum(p & g)
        fp[k] = np.sum(p & ~g)
        fn[k] = np.sum(~p & g)
    return tp, fp, fn


def _iou_from_counts(tp, fp, fn, gt_present) -> tuple[float, dict[int, float]]:
    per_class = {}
    for k in np.flatnonzero(gt_present):
        denom = tp[k] + fp[k] + fn[k]
        per_class[int(k)] = float(tp[k] / denom) if denom else 0.0
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return miou, per_class


def compute_miou(pred_map: np.ndarray, gt_map: np.ndarray, num_classes: int
                 ) -> tuple[float, dict[int, float]]:
    """Mean IoU over the classes present in GT."""
    tp, fp, fn = miou_counts(pred_map, gt_map, num_classes)
    present = np.array([(gt_map == k).any() for k in range(num_classes)])
    return _iou_from_counts(tp, fp, fn, present)


# --- panoptic scoring -----------------------------------------------------

def pq_stats(pred_segments: list[SegmentPrediction],
             gt_segments: list[tuple[np.ndarray, int]]
             ) -> tuple[float, int, int, int]:
    """(iou_sum, tp, fp, fn) for one scene; matches need same class and IoU > 0.5."""
    if pred_segments:
        stack = np.zeros_like(pred_segments[0].mask, dtype=np.int64)
        for seg in pred_segments:
            stack += seg.mask.astype(np.int64)
        if stack.max() > 1:
            raise ConfigError("panoptic predictions must be disjoint")
    if not pred_segments or not gt_segments:
        return 0.0, 0, len(pred_segments), len(gt_segments)
    ious = iou_matrix([p.mask for p in pred_segments],
                      [m for m, _ in gt_segments])
    same = np.array([[p.class_id == g[1] for g in gt_segments]
                     for p in pred_segments])
    hits = (ious > 0.5) & same
    # IoU > 0.5 against disjoint segment sets admits at most one partner
    # per segment, so the matching is forced.
    tp_pairs = np.argwhere(hits)
    iou_sum = float(ious[hits].sum())
    tp = len(tp_pairs)
    return iou_sum, tp, len(pred_segments) - tp, len(gt_segments) - tp


def pq_from_stats(iou_sum: float, tp: int, fp: int, fn: int
                  ) -> tuple[float, float, float]:
    denom = tp + 0.5 * fp + 0.5 * fn
    if denom == 0:
        return 0.0, 0.0, 0.0
    sq = iou_sum / tp if tp else 0.0
    rq = tp / denom
    return iou_sum / denom, sq, rq


def compute_pq(pred_segments: list[SegmentPrediction],
               gt_segments: list[tuple[np.ndarray, int]]
               ) -> tuple[float, float, float]:
    """Panoptic quality (pq, sq, rq) of one scene."""
    return pq_from_stats(*pq_stats(pred_segments, gt_segments))


def merge_stuff(segments: list[SegmentPrediction],
                stuff_ids: list[int]) -> list[SegmentPrediction]:
    """Union all same-class segments of stuff classes into one mask each."""
    if not stuff_ids:
        return segments
    stuff = set(stuff_ids)
    out = [s for s in segments if s.class_id not in stuff]
    by_class: dict[int, list[SegmentPrediction]] = {}
    for s in segments:
        if s.class_id in stuff:
            by_class.setdefault(s.class_id, []).append(s)
    for cid in sorted(by_class):
        group = by_class[cid]
        union = np.zeros_like(group[0].mask)
        for s in group:
            union |= s.mask
        out.append(SegmentPrediction(union, cid, max(s.score for s in group)))
    return out


# --- instance AP ----------------------------------------------------------

def compute_ap(scenes: list[tuple[list[SegmentPrediction],
                                  list[tuple[np.ndarray, int]]]],
               thresholds: tuple[float, ...] = AP_THRESHOLDS
               ) -> tuple[float, float]:
    """Simplified mask AP over a list of (predictions, gt) scenes.

    At each IoU threshold, predictions of a class are matched greedily
    by descending score within their scene, each GT segment used once;
    the PR curve is integrated with all-point interpolation. Returns
    (ap50, mean over thresholds and classes). No area breakdown and no
    detection cap.
    """
    classes = sorted({cid for _, gt in scenes for _, cid in gt})
    if not classes:
        return 0.0, 0.0
    per_thr: dict[float, list[float]] = {t: [] for t in thresholds}
    for cls in classes:
        n_gt = sum(sum(1 for _, cid in gt if cid == cls) for _, gt in scenes)
        hits: dict[float, list[tuple[float, bool]]] = {t: [] for t in thresholds}
        for preds, gt in scenes:
            cls_preds = sorted((p for p in preds if p.class_id == cls),
                               key=lambda p: -p.score)
            cls_gt = [m for m, cid in gt if cid == cls]
            ious = iou_matrix([p.mask for p in cls_preds], cls_gt)
            for t in thresholds:
                used = [False] * len(cls_gt)
                for row, pred in enumerate(cls_preds):
                    matched = False
                    for g in np.argsort(-ious[row]) if cls_gt else ():
                        if ious[row, g] >= t and not used[g]:
                            used[g] = True
                            matched = True
                            break
                    hits[t].append((pred.score, matched))
        for t in thresholds:
            per_thr[t].append(_average_precision(hits[t], n_gt))
    ap50 = float(np.mean(per_thr[thresholds[0]]))
    mean_ap = float(np.mean([np.mean(per_thr[t]) for t in thresholds]))
    return ap50, mean_ap


def _average_precision(scored: list[tuple[float, bool]], n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    if not scored:
        return 0.0
    scored = sorted(scored, key=lambda x: -x[0])
    tp = np.cumsum([1 if m else 0 for _, m in scored])
    fp = np.cumsum([0 if m else 1 for _, m in scored])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # all-point interpolation: running max of precision from the right
    prec_env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, prec_env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def iou_histogram(predictions: list[SegmentPrediction],
                  gt: list[tuple[np.ndarray, int]],
                  bins: int = 10) -> np.ndarray:
    """Best-GT IoU per prediction (class-agnostic), binned over [0, 1]."""
    counts = np.zeros(bins, dtype=np.int64)
    if not predictions:
        return counts
    if gt:
        ious = iou_matrix([p.mask for p in predictions], [m for m, _ in gt])
        best = ious.max(axis=1)
    else:
        best = np.zeros(len(predictions))
    for v in best:
        counts[min(int(v * bins), bins - 1)] += 1
    return counts


def query_accuracy(bundle: FeatureBundle, bank: PrototypeBank) -> tuple[int, int]:
    """(correct, total) fused-argmax class hits over non-void-target queries."""
    targets = assign_targets(predicted_masks(bundle), bundle.gt_segments or [],
                             bundle.C)
    scores = fused_scores(bundle, bank)
    pred = scores.argmax(axis=1)
    non_void = targets.class_target < bundle.C
    correct = int(np.sum(pred[non_void] == targets.class_target[non_void]))
    return correct, int(non_void.sum())


# --- aggregate evaluation -------------------------------------------------

def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PROTO_ADAPT_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_bundles(bundles: list[FeatureBundle], bank: PrototypeBank,
                     score_thresh: float = 0.8, overlap_thresh: float = 0.8,
                     oracle: bool = False) -> EvalReport:
    """Score a bundle set; aggregation order is fixed by bundle index.

    With ``oracle=True`` the panoptic segments are relabeled from GT
    before any scoring, and the semantic map is the rendering of those
    segments (so the comparison isolates classification error).
    """
    num_classes = bundles[0].C

    def one(bundle: FeatureBundle) -> dict:
        gt = bundle.gt_segments or []
        segs = infer_panoptic(bundle, bank, score_thresh, overlap_thresh)
        segs = merge_stuff(segs, bundle.stuff_class_ids)
        if oracle:
            segs = oracle_relabel(segs, gt)
            pred_map = render_semantic(segs, bundle.H, bundle.W)
        else:
            pred_map = infer_semantic(bundle, bank)
        gt_map = render_gt_map(gt, bundle.H, bundle.W)
        tp, fp, fn = miou_counts(pred_map, gt_map, num_classes)
        correct, total = query_accuracy(bundle, bank)
        return {
            "image_id": bundle.image_id,
            "counts": (tp, fp, fn),
            "present": np.array([(gt_map == k).any() for k in range(num_classes)]),
            "pq_stats": pq_stats(segs, gt),
            "scene": (segs, gt),
            "hist": iou_histogram(segs, gt),
            "acc": (correct, total),
            "miou_single": compute_miou(pred_map, gt_map, num_classes)[0],
        }

    n_threads = _threads()
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(one, bundles))
    else:
        results = [one(b) for b in bundles]

    tp = sum(r["counts"][0] for r in results)
    fp = sum(r["counts"][1] for r in results)
    fn = sum(r["counts"][2] for r in results)
    present = np.any([r["present"] for r in results], axis=0)
    miou, per_class = _iou_from_counts(tp, fp, fn, present)

    iou_sum = sum(r["pq_stats"][0] for r in results)
    tps = sum(r["pq_stats"][1] for r in results)
    fps = sum(r["pq_stats"][2] for r in results)
    fns = sum(r["pq_stats"][3] for r in results)
    pq, sq, rq = pq_from_stats(iou_sum, tps, fps, fns)

    ap50, mean_ap = compute_ap([r["scene"] for r in results])
    hist = np.sum([r["hist"] for r in results], axis=0)
    correct = sum(r["acc"][0] for r in results)
    total = sum(r["acc"][1] for r in results)

    per_image = [{"image_id": r["image_id"], "miou": r["miou_single"],
                  "pq": pq_from_stats(*r["pq_stats"])[0]} for r in results]
    return EvalReport(
        miou=miou, per_class_iou=per_class, pq=pq, sq=sq, rq=rq,
        ap50=ap50, map=mean_ap, iou_histogram=[int(v) for v in hist],
        query_accuracy=(correct / total) if total else None,
        per_image=per_image)


def write_eval_report(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_histogram_csv(hist: list[int], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        n = len(hist)
        for i, count in enumerate(hist):
            fh.write(f"{i / n:.2f},{(i + 1) / n:.2f},{count}\n")
