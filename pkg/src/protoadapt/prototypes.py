"""Class prototype bank: construction, representations, and fused scoring.

A prototype summarizes a class by averaging, over its reference
examples, the matched decoder query plus the mask-pooled dense feature.
Predictions get the analogous representation (query + pooled feature of
the predicted mask), scored against the bank by cosine similarity and
fused with the precomputed text scores through a single scalar weight.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .bundle_io import FeatureBundle
from .errors import BundleIOError, ConfigError
from .masks import decode_masks, mask_average_pool, resample_mask
from .matching import match_examples
from .rng import Rng

log = logging.getLogger(__name__)

COSINE_EPS = 1e-8

INIT_MODES = ("combined", "queries_only", "pooling_only", "random", "class_embedding")


@dataclass(frozen=True)
class VisualExample:
    """A reference binary mask with its class label."""

    ref_image_id: str
    mask: np.ndarray  # (h, w) uint8, any resolution
    class_id: int


@dataclass
class PrototypeBank:
    """(C+1) prototype rows (void last) plus the fusion scalar."""

    protos: np.ndarray  # (C+1, width) float64
    alpha: float
    init_mode: str
    alpha_trainable: bool = True
    example_counts: list[int] = field(default_factory=list)  # per class
    missing_classes: list[int] = field(default_factory=list)
    class_names: list[str] | None = None

    @property
    def num_classes(self) -> int:
        return self.protos.shape[0] - 1

    @property
    def width(self) -> int:
        return self.protos.shape[1]

    @classmethod
    def text_only(cls, num_classes: int, dim: int) -> "PrototypeBank":
        """Zero prototypes with alpha 0: scoring reduces to the text logits."""
        return cls(np.zeros((num_classes + 1, dim)), alpha=0.0,
                   init_mode="combined", alpha_trainable=False,
                   example_counts=[0] * num_classes)

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.protos.copy(), self.alpha, self.init_mode,
                             self.alpha_trainable, list(self.example_counts),
                             list(self.missing_classes),
                             None if self.class_names is None
                             else list(self.class_names))


@dataclass(frozen=True)
class PredictionRep:
    """Per-query visual representation rows, (N, width)."""

    reps: np.ndarray
    empty_mask: np.ndarray  # (N,) bool, True where the mask had no cells


def predicted_masks(bundle: FeatureBundle) -> list[np.ndarray]:
    """The bundle's predicted masks, decoding from features if absent."""
    if bundle.pred_masks is not None:
        return bundle.pred_masks
    return decode_masks(bundle.features, bundle.queries, 0.5)


def prediction_reps(bundle: FeatureBundle) -> PredictionRep:
    """Query plus pooled-feature representation for every predicted mask.

    Rows with an empty mask fall back to the query alone and are flagged.
    """
    masks = predicted_masks(bundle)
    reps = np.asarray(bundle.queries, dtype=np.float64).copy()
    empty = np.zeros(bundle.N, dtype=bool)
    for i, mask in enumerate(masks):
        pooled = mask_average_pool(bundle.features, mask)
        empty[i] = pooled.empty
        if not pooled.empty:
            reps[i] += pooled.values
    return PredictionRep(reps, empty)


def scoring_reps(bundle: FeatureBundle, bank: PrototypeBank) -> np.ndarray:
    """Representation rows in the bank's space, (N, width) float64."""
    if bank.init_mode == "class_embedding":
        if bundle.query_class_embeds is None:
            raise ConfigError(
                f"bundle {bundle.image_id!r} lacks query_class_embeds needed by "
                "a class_embedding bank")
        reps = np.asarray(bundle.query_class_embeds, dtype=np.float64)
    else:
        reps = prediction_reps(bundle).reps
    if reps.shape[1] != bank.width:
        raise ConfigError(
            f"representation width {reps.shape[1]} != bank width {bank.width}")
    return reps


def visual_similarity(reps: PredictionRep | np.ndarray,
                      bank: PrototypeBank) -> np.ndarray:
    """Cosine similarity of each representation row with each prototype.

    Norms are clamped below at COSINE_EPS so zero rows score zero
    instead of dividing by zero.
    """
    r = reps.reps if isinstance(reps, PredictionRep) else np.asarray(reps)
    r = r.astype(np.float64, copy=False)
    if r.shape[1] != bank.width:
        raise ConfigError(
            f"representation width {r.shape[1]} != bank width {bank.width}")
    rn = np.maximum(np.linalg.norm(r, axis=1), COSINE_EPS)
    pn = np.maximum(np.linalg.norm(bank.protos, axis=1), COSINE_EPS)
    return (r @ bank.protos.T) / (rn[:, None] * pn[None, :])


def fuse_scores(s_text: np.ndarray, s_visual: np.ndarray,
                alpha: float) -> np.ndarray:
    """Affine fusion of text and visual scores: text + alpha * visual."""
    s_text = np.asarray(s_text, dtype=np.float64)
    s_visual = np.asarray(s_visual, dtype=np.float64)
    if s_text.shape != s_visual.shape:
        raise ConfigError(
            f"score shapes differ: {s_text.shape} vs {s_visual.shape}")
    return s_text + alpha * s_visual


def fused_scores(bundle: FeatureBundle, bank: PrototypeBank) -> np.ndarray:
    """Full scoring path for one bundle: (N, C+1) fused logits."""
    s_visual = visual_similarity(scoring_reps(bundle, bank), bank)
    return fuse_scores(bundle.text_logits, s_visual, bank.alpha)


def param_count(num_classes: int, dim: int) -> int:
    """Trainable parameters: one row per class plus void, plus the scalar."""
    if num_classes < 1 or dim < 1:
        raise ConfigError("param_count needs num_classes >= 1 and dim >= 1")
    return (num_classes + 1) * dim + 1


def init_prototypes(bundles: list[FeatureBundle],
                    examples: list[VisualExample],
                    mode: str,
                    num_classes: int,
                    rng: Rng,
                    min_iou: float = 0.0,
                    allow_missing: bool = False) -> PrototypeBank:
    """Build the prototype bank from reference examples.

    combined      query + pooled feature per example, averaged per class
    queries_only  matched query alone
    pooling_only  pooled feature alone
    random        gaussian rows scaled by 1/sqrt(D), no examples needed
    class_embedding  exporter-provided per-class vectors, no examples needed

    The void row is the mean representation of predicted masks that no
    example matched, falling back to a random unit vector when every
    query was claimed.
    """
    if mode not in INIT_MODES:
        raise ConfigError(f"unknown init mode {mode!r} (choose from {INIT_MODES})")
    if not bundles:
        raise ConfigError("init_prototypes needs at least one bundle")
    dim = bundles[0].D

    if mode == "random":
        protos = np.array(
            [[rng.gauss() for _ in range(dim)] for _ in range(num_classes + 1)],
            dtype=np.float64) / np.sqrt(dim)
        return PrototypeBank(protos, alpha=0.0, init_mode=mode,
                             example_counts=[0] * num_classes)

    if mode == "class_embedding":
        for bundle in bundles:
            if bundle.class_embeds is not None:
                ce = np.asarray(bundle.class_embeds, dtype=np.float64)
                if ce.shape[0] != num_classes + 1:
                    raise ConfigError(
                        f"class_embeds has {ce.shape[0]} rows, expected "
                        f"{num_classes + 1}")
                return PrototypeBank(ce.copy(), alpha=0.0, init_mode=mode,
                                     example_counts=[0] * num_classes)
        raise ConfigError("no bundle carries class_embeds; cannot use "
                          "class_embedding init")

    by_id = {b.image_id: b for b in bundles}
    for ex in examples:
        if ex.ref_image_id not in by_id:
            raise ConfigError(
                f"example references unknown image {ex.ref_image_id!r}")
        if not 0 <= ex.class_id < num_classes:
            raise ConfigError(
                f"example class id {ex.class_id} outside [0, {num_classes})")

    sums = np.zeros((num_classes, dim), dtype=np.float64)
    counts = np.zeros(num_classes, dtype=np.int64)
    matched_queries: dict[str, set[int]] = {b.image_id: set() for b in bundles}

    # Group examples per reference image so each bundle is decoded once.
    per_bundle: dict[str, list[int]] = {}
    for idx, ex in enumerate(examples):
        per_bundle.setdefault(ex.ref_image_id, []).append(idx)

    for image_id in sorted(per_bundle):
        bundle = by_id[image_id]
        preds = predicted_masks(bundle)
        ex_indices = per_bundle[image_id]
        masks = [resample_mask(examples[i].mask, bundle.H, bundle.W)
                 for i in ex_indices]
        assignments = match_examples(masks, preds, min_iou=min_iou)
        for local, assign in zip(ex_indices, assignments):
            ex = examples[local]
            matched_queries[image_id].add(assign.query_index)
            vec = np.zeros(dim, dtype=np.float64)
            if mode in ("combined", "pooling_only"):
                pooled = mask_average_pool(
                    bundle.features,
                    resample_mask(ex.mask, bundle.H, bundle.W))
                if pooled.empty:
                    log.warning("example %d (class %d) pools an empty mask; skipped",
                                local, ex.class_id)
                    continue
                vec += pooled.values
            if mode in ("combined", "queries_only"):
                vec += np.asarray(bundle.queries[assign.query_index],
                                  dtype=np.float64)
            sums[ex.class_id] += vec
            counts[ex.class_id] += 1

    missing = [k for k in range(num_classes) if counts[k] == 0]
    if missing and not allow_missing:
        raise ConfigError(
            f"classes without a usable example in mode {mode!r}: {missing}")

    protos = np.zeros((num_classes + 1, dim), dtype=np.float64)
    nz = counts > 0
    protos[:num_classes][nz] = sums[nz] / counts[nz, None]
    protos[num_classes] = _void_row(bundles, matched_queries, mode, dim, rng)
    return PrototypeBank(protos, alpha=0.0, init_mode=mode,
                         example_counts=[int(c) for c in counts],
                         missing_classes=missing)


def _void_row(bundles: list[FeatureBundle],
              matched_queries: dict[str, set[int]],
              mode: str, dim: int, rng: Rng) -> np.ndarray:
    """Mean representation of queries no example claimed, in the mode's space."""
    total = np.zeros(dim, dtype=np.float64)
    count = 0
    for bundle in bundles:
        taken = matched_queries.get(bundle.image_id, set())
        masks = predicted_masks(bundle) if mode != "queries_only" else None
        for i in range(bundle.N):
            if i in taken:
                continue
            vec = np.zeros(dim, dtype=np.float64)
            if mode != "queries_only":
                pooled = mask_average_pool(bundle.features, masks[i])
                if mode == "pooling_only" and pooled.empty:
                    continue
                vec += pooled.values
            if mode != "pooling_only":
                vec += np.asarray(bundle.queries[i], dtype=np.float64)
            total += vec
            count += 1
    if count:
        return total / count
    vec = np.array([rng.gauss() for _ in range(dim)])
    return vec / max(float(np.linalg.norm(vec)), COSINE_EPS)


# --- bank serialization ---------------------------------------------------

def save_bank(bank: PrototypeBank, dir_path: str) -> None:
    """Write bank.json + protos.bin (f32 little-endian, row-major)."""
    try:
        os.makedirs(dir_path, exist_ok=True)
        with open(os.path.join(dir_path, "protos.bin"), "wb") as fh:
            fh.write(bank.protos.astype("<f4").tobytes())
        meta = {
            "rows": bank.protos.shape[0],
            "width": bank.protos.shape[1],
            "alpha": float(bank.alpha),
            "init_mode": bank.init_mode,
            "alpha_trainable": bank.alpha_trainable,
            "example_counts": bank.example_counts,
            "missing_classes": bank.missing_classes,
            "class_names": bank.class_names,
        }
        with open(os.path.join(dir_path, "bank.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise BundleIOError(f"failed writing bank to {dir_path}: {exc}") from exc


def load_bank(dir_path: str) -> PrototypeBank:
    try:
        with open(os.path.join(dir_path, "bank.json"), "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        with open(os.path.join(dir_path, "protos.bin"), "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise BundleIOError(f"failed reading bank from {dir_path}: {exc}") from exc
    rows, width = int(meta["rows"]), int(meta["width"])
    if len(raw) != rows * width * 4:
        raise ConfigError("protos.bin size disagrees with bank.json")
    protos = np.frombuffer(raw, dtype="<f4").reshape(rows, width).astype(np.float64)
    return PrototypeBank(protos, float(meta["alpha"]), str(meta["init_mode"]),
                         bool(meta["alpha_trainable"]),
                         [int(c) for c in meta.get("example_counts", [])],
                         [int(c) for c in meta.get("missing_classes", [])],
                         meta.get("class_names"))
