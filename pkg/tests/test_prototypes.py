import numpy as np
import pytest

from protoadapt.bundle_io import FeatureBundle
from protoadapt.errors import ConfigError
from protoadapt.prototypes import (PredictionRep, PrototypeBank, VisualExample,
                                   fuse_scores, fused_scores, init_prototypes,
                                   load_bank, param_count, prediction_reps,
                                   save_bank, visual_similarity)
from protoadapt.rng import Rng

from conftest import make_bundle, rect_mask


# --- naive reference (loops only, nothing shared with the package) ---------

def naive_pool(features, mask):
    h, w, d = features.shape
    acc = [0.0] * d
    count = 0
    for y in range(h):
        for x in range(w):
            if mask[y][x]:
                count += 1
                for k in range(d):
                    acc[k] += float(features[y][x][k])
    if count == 0:
        return [0.0] * d, True
    return [v / count for v in acc], False


def naive_resample(mask, new_h, new_w):
    h = len(mask)
    w = len(mask[0])
    out = [[0] * new_w for _ in range(new_h)]
    for y in range(new_h):
        for x in range(new_w):
            sy = int((y + 0.5) * h / new_h)
            sx = int((x + 0.5) * w / new_w)
            out[y][x] = int(mask[min(sy, h - 1)][min(sx, w - 1)])
    return out


def naive_iou(a, b):
    inter = union = 0
    for y in range(len(a)):
        for x in range(len(a[0])):
            va, vb = a[y][x], b[y][x]
            if va and vb:
                inter += 1
            if va or vb:
                union += 1
    return inter / union if union else 0.0


def naive_combined_prototypes(bundles, examples, num_classes):
    """Per-cell re-derivation of prototype construction, combined mode."""
    by_id = {b.image_id: b for b in bundles}
    sums = [[0.0] * bundles[0].D for _ in range(num_classes)]
    counts = [0] * num_classes
    matched = {b.image_id: set() for b in bundles}
    for ex in examples:
        bundle = by_id[ex.ref_image_id]
        mask = naive_resample(ex.mask.tolist(), bundle.H, bundle.W)
        best_q, best_iou = 0, -1.0
        for qi, pred in enumerate(bundle.pred_masks):
            v = naive_iou(mask, pred.tolist())
            if v > best_iou:
                best_q, best_iou = qi, v
        matched[bundle.image_id].add(best_q)
        pooled, empty = naive_pool(bundle.features, mask)
        if empty:
            continue
        for k in range(bundle.D):
            sums[ex.class_id][k] += pooled[k] + float(bundle.queries[best_q][k])
        counts[ex.class_id] += 1
    protos = [[s / counts[c] for s in sums[c]] for c in range(num_classes)]
    # void row: mean of (query + pooled prediction mask) over unmatched queries
    void = [0.0] * bundles[0].D
    total = 0
    for bundle in bundles:
        for qi in range(bundle.N):
            if qi in matched[bundle.image_id]:
                continue
            pooled, empty = naive_pool(bundle.features, bundle.pred_masks[qi])
            for k in range(bundle.D):
                void[k] += pooled[k] + float(bundle.queries[qi][k])
            total += 1
    protos.append([v / total for v in void])
    return np.array(protos)


def random_fixture(seed, h=6, w=6, d=5, n=4, c=2, n_images=2):
    rng = Rng(seed)
    bundles = []
    examples = []
    for b in range(n_images):
        masks = []
        for _ in range(n):
            y0 = rng.index(h - 1)
            x0 = rng.index(w - 1)
            m = np.zeros((h, w), np.uint8)
            m[y0:y0 + 1 + rng.index(h - y0), x0:x0 + 1 + rng.index(w - x0)] = 1
            masks.append(m)
        bundles.append(FeatureBundle(
            image_id=f"im{b}",
            features=rng.gauss_n(h * w * d).reshape(h, w, d).astype(np.float32),
            queries=rng.gauss_n(n * d).reshape(n, d).astype(np.float32),
            text_logits=rng.gauss_n(n * (c + 1)).reshape(n, c + 1).astype(np.float32),
            pred_masks=masks,
        ).validate())
    for cls in range(c):
        for _ in range(2):
            b = rng.index(n_images)
            m = np.zeros((h, w), np.uint8)
            y0, x0 = rng.index(h - 2), rng.index(w - 2)
            m[y0:y0 + 2, x0:x0 + 2] = 1
            examples.append(VisualExample(f"im{b}", m, cls))
    return bundles, examples


# --- init_prototypes ---------------------------------------------------------

def test_queries_only_single_example_is_matched_query():
    masks = [rect_mask(4, 4, 0, 2, 0, 4), rect_mask(4, 4, 2, 4, 0, 4)]
    bundle = make_bundle(h=4, w=4, d=3, n=2, c=1, pred_masks=masks)
    ex = VisualExample("img", rect_mask(4, 4, 2, 4, 0, 4), 0)
    bank = init_prototypes([bundle], [ex], "queries_only", 1, Rng(0))
    assert np.allclose(bank.protos[0], np.asarray(bundle.queries[1], np.float64))


def test_combined_two_examples_average():
    masks = [rect_mask(4, 4, 0, 2, 0, 4), rect_mask(4, 4, 2, 4, 0, 4)]
    bundle = make_bundle(h=4, w=4, d=3, n=2, c=1, pred_masks=masks)
    exs = [VisualExample("img", masks[0], 0), VisualExample("img", masks[1], 0)]
    bank = init_prototypes([bundle], exs, "combined", 1, Rng(0))
    vecs = []
    for qi, m in enumerate(masks):
        pooled, _ = naive_pool(bundle.features, m)
        vecs.append(np.array(pooled) + np.asarray(bundle.queries[qi], np.float64))
    assert np.allclose(bank.protos[0], (vecs[0] + vecs[1]) / 2, atol=1e-12)


def test_combined_identical_examples_collapse_to_single_vector():
    # repeated identical examples map to the same query, so the class
    # prototype is exactly that one query + pooled vector
    masks = [rect_mask(4, 4, 0, 2, 0, 4), rect_mask(4, 4, 2, 4, 0, 4)]
    bundle = make_bundle(h=4, w=4, d=3, n=2, c=1, pred_masks=masks)
    exs = [VisualExample("img", masks[0], 0) for _ in range(3)]
    bank = init_prototypes([bundle], exs, "combined", 1, Rng(0))
    pooled, _ = naive_pool(bundle.features, masks[0])
    single = np.array(pooled) + np.asarray(bundle.queries[0], np.float64)
    assert np.allclose(bank.protos[0], single, atol=1e-12)
    assert bank.example_counts == [3]


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_combined_matches_naive_reimplementation(seed):
    bundles, examples = random_fixture(seed)
    bank = init_prototypes(bundles, examples, "combined", 2, Rng(0))
    naive = naive_combined_prototypes(bundles, examples, 2)
    assert np.max(np.abs(bank.protos - naive)) <= 1e-6


def test_missing_class_rejected():
    bundle = make_bundle(h=4, w=4, d=3, n=2, c=2,
                         pred_masks=[rect_mask(4, 4, 0, 2, 0, 4)] * 2)
    ex = VisualExample("img", rect_mask(4, 4, 0, 2, 0, 4), 0)
    with pytest.raises(ConfigError, match="without a usable example"):
        init_prototypes([bundle], [ex], "combined", 2, Rng(0))
    bank = init_prototypes([bundle], [ex], "combined", 2, Rng(0),
                           allow_missing=True)
    assert bank.missing_classes == [1]


def test_unresolvable_ref_image():
    bundle = make_bundle()
    ex = VisualExample("other", rect_mask(4, 4, 0, 2, 0, 4), 0)
    with pytest.raises(ConfigError, match="unknown image"):
        init_prototypes([bundle], [ex], "combined", 2, Rng(0))


def test_random_mode_shape_and_scale():
    bundle = make_bundle(d=16, c=3)
    bank = init_prototypes([bundle], [], "random", 3, Rng(7))
    assert bank.protos.shape == (4, 16)
    # entries are gaussians over sqrt(D); rows should have roughly unit norm
    norms = np.linalg.norm(bank.protos, axis=1)
    assert np.all(norms > 0.3) and np.all(norms < 3.0)


def test_random_mode_deterministic():
    bundle = make_bundle(d=8, c=2)
    a = init_prototypes([bundle], [], "random", 2, Rng(5))
    b = init_prototypes([bundle], [], "random", 2, Rng(5))
    assert np.array_equal(a.protos, b.protos)


def test_class_embedding_mode_reads_bundle_vectors():
    ce = np.arange(18, dtype=np.float32).reshape(3, 6)
    bundle = make_bundle(c=2, class_embeds=ce)
    bank = init_prototypes([bundle], [], "class_embedding", 2, Rng(0))
    assert bank.width == 6
    assert np.allclose(bank.protos, ce)


def test_class_embedding_mode_requires_vectors():
    bundle = make_bundle(c=2)
    with pytest.raises(ConfigError, match="class_embeds"):
        init_prototypes([bundle], [], "class_embedding", 2, Rng(0))


def test_unknown_mode_rejected():
    with pytest.raises(ConfigError):
        init_prototypes([make_bundle()], [], "best_mode", 2, Rng(0))


def test_void_row_falls_back_to_unit_vector_when_all_matched():
    masks = [rect_mask(4, 4, 0, 2, 0, 4), rect_mask(4, 4, 2, 4, 0, 4)]
    bundle = make_bundle(h=4, w=4, d=3, n=2, c=2, pred_masks=masks)
    exs = [VisualExample("img", masks[0], 0), VisualExample("img", masks[1], 1)]
    bank = init_prototypes([bundle], exs, "combined", 2, Rng(0))
    assert np.linalg.norm(bank.protos[2]) == pytest.approx(1.0)


# --- prediction_reps ----------------------------------------------------------

def test_reps_zero_features_equal_queries():
    bundle = FeatureBundle(
        "z", np.zeros((3, 3, 4), np.float32),
        np.arange(8, dtype=np.float32).reshape(2, 4),
        np.zeros((2, 3), np.float32),
        pred_masks=[np.ones((3, 3), np.uint8)] * 2).validate()
    reps = prediction_reps(bundle)
    assert np.allclose(reps.reps, bundle.queries)
    assert not reps.empty_mask.any()


def test_reps_constant_features_add_constant():
    bundle = FeatureBundle(
        "c", np.full((3, 3, 2), 1.5, np.float32),
        np.zeros((2, 2), np.float32),
        np.zeros((2, 3), np.float32),
        pred_masks=[np.ones((3, 3), np.uint8)] * 2).validate()
    reps = prediction_reps(bundle)
    assert np.allclose(reps.reps, 1.5)


def test_reps_empty_mask_flagged_query_only():
    bundle = FeatureBundle(
        "e", np.full((2, 2, 2), 9.0, np.float32),
        np.array([[1.0, 2.0]], np.float32),
        np.zeros((1, 2), np.float32),
        pred_masks=[np.zeros((2, 2), np.uint8)]).validate()
    reps = prediction_reps(bundle)
    assert reps.empty_mask[0]
    assert np.allclose(reps.reps[0], [1.0, 2.0])


@pytest.mark.parametrize("seed", [10, 11, 12])
def test_reps_match_naive(seed):
    bundles, _ = random_fixture(seed, n_images=1)
    bundle = bundles[0]
    reps = prediction_reps(bundle)
    for i in range(bundle.N):
        pooled, empty = naive_pool(bundle.features, bundle.pred_masks[i])
        expect = np.asarray(bundle.queries[i], np.float64)
        if not empty:
            expect = expect + np.array(pooled)
        assert np.max(np.abs(reps.reps[i] - expect)) <= 1e-6


# --- visual_similarity ----------------------------------------------------------

def bank_from(protos, alpha=0.0):
    return PrototypeBank(np.asarray(protos, np.float64), alpha, "combined")


def test_cosine_identical_row_is_one():
    protos = np.array([[1.0, 2.0, 3.0], [0.0, 1.0, 0.0]])
    reps = PredictionRep(np.array([[1.0, 2.0, 3.0]]), np.zeros(1, bool))
    sim = visual_similarity(reps, bank_from(protos))
    assert sim[0, 0] == pytest.approx(1.0, abs=1e-6)


def test_cosine_orthogonal_is_zero():
    protos = np.array([[0.0, 1.0]])
    reps = PredictionRep(np.array([[1.0, 0.0]]), np.zeros(1, bool))
    sim = visual_similarity(reps, bank_from(protos))
    assert sim[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_cosine_matches_scalar_formula():
    rng = Rng(20)
    reps = rng.gauss_n(12).reshape(3, 4)
    protos = rng.gauss_n(20).reshape(5, 4)
    sim = visual_similarity(PredictionRep(reps, np.zeros(3, bool)),
                            bank_from(protos))
    for i in range(3):
        for k in range(5):
            manual = float(np.dot(reps[i], protos[k])) / (
                max(np.linalg.norm(reps[i]), 1e-8)
                * max(np.linalg.norm(protos[k]), 1e-8))
            assert sim[i, k] == pytest.approx(manual, abs=1e-6)


def test_cosine_scale_invariance():
    rng = Rng(21)
    reps = rng.gauss_n(8).reshape(2, 4)
    protos = rng.gauss_n(12).reshape(3, 4)
    base = visual_similarity(PredictionRep(reps, np.zeros(2, bool)),
                             bank_from(protos))
    scaled = visual_similarity(PredictionRep(reps * 7.5, np.zeros(2, bool)),
                               bank_from(protos * 0.02))
    assert np.allclose(base, scaled, atol=1e-9)


def test_cosine_zero_row_scores_zero():
    sim = visual_similarity(PredictionRep(np.zeros((1, 3)), np.ones(1, bool)),
                            bank_from(np.ones((2, 3))))
    assert np.all(sim == 0.0)


def test_permuting_classes_permutes_columns():
    rng = Rng(22)
    reps = PredictionRep(rng.gauss_n(8).reshape(2, 4), np.zeros(2, bool))
    protos = rng.gauss_n(16).reshape(4, 4)
    base = visual_similarity(reps, bank_from(protos))
    perm = [2, 0, 1, 3]
    permuted = visual_similarity(reps, bank_from(protos[perm]))
    assert np.allclose(permuted, base[:, perm])


# --- fuse_scores -----------------------------------------------------------------

def test_fuse_alpha_zero_is_text():
    rng = Rng(23)
    s_text = rng.gauss_n(12).reshape(3, 4)
    s_vis = rng.gauss_n(12).reshape(3, 4)
    assert np.array_equal(fuse_scores(s_text, s_vis, 0.0), s_text)


def test_fuse_zero_text_scales_visual():
    s_vis = np.array([[0.5, -0.25]])
    out = fuse_scores(np.zeros((1, 2)), s_vis, 80.0)
    assert np.allclose(out, [[40.0, -20.0]])


def test_fuse_example_row():
    out = fuse_scores(np.array([[1.0, 2.0]]), np.array([[0.5, -0.5]]), 80.0)
    assert np.allclose(out, [[41.0, -38.0]])


def test_fuse_shape_mismatch():
    with pytest.raises(ConfigError):
        fuse_scores(np.zeros((2, 3)), np.zeros((3, 2)), 1.0)


def test_fused_argmax_matches_text_at_alpha_zero():
    bundle = make_bundle(n=6, c=3)
    bank = PrototypeBank.text_only(3, 3)
    scores = fused_scores(bundle, bank)
    assert np.array_equal(scores.argmax(axis=1),
                          np.asarray(bundle.text_logits).argmax(axis=1))


# --- param_count / serialization ---------------------------------------------------

def test_param_count_reference_values():
    assert param_count(150, 256) == 38657
    assert param_count(19, 256) == 5121
    assert param_count(65, 256) == 16897


def test_param_count_formula():
    assert param_count(1, 1) == 3
    assert param_count(10, 4) == 45


def test_bank_round_trip(tmp_path):
    bank = PrototypeBank(np.arange(12, dtype=np.float64).reshape(3, 4),
                         alpha=79.25, init_mode="combined",
                         alpha_trainable=True, example_counts=[2, 3],
                         missing_classes=[], class_names=["cat", "dog"])
    save_bank(bank, str(tmp_path))
    back = load_bank(str(tmp_path))
    assert back.alpha == bank.alpha
    assert back.init_mode == bank.init_mode
    assert back.class_names == ["cat", "dog"]
    assert np.array_equal(back.protos, bank.protos)
    # a second save produces identical bytes
    save_bank(back, str(tmp_path / "again"))
    assert (tmp_path / "protos.bin").read_bytes() == \
        (tmp_path / "again" / "protos.bin").read_bytes()
    assert (tmp_path / "bank.json").read_bytes() == \
        (tmp_path / "again" / "bank.json").read_bytes()
