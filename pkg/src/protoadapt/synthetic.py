"""Deterministic synthetic fixtures with planted ground truth.

Each image is a full grid of rectangular segments. Every class gets a
planted unit direction; features inside a segment are that direction
plus gaussian noise, and the segment's query repeats it. The remaining
queries are distractors built around a separate planted direction with
random rectangular masks, so the void prototype and unmatched-query
paths always get exercised. Text logits are ideal one-hot scores that
can be corrupted (cyclically shifted classes, or flattened to uniform)
to emulate a model that localizes well but misclassifies.

Adaptation and evaluation images are disjoint; reference examples are
drawn from the adaptation split only.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .bundle_io import FeatureBundle, write_bundle
from .errors import BundleIOError, ConfigError
from .masks import rle_encode, rle_to_bytes, rle_from_bytes, rle_decode
from .prototypes import VisualExample
from .rng import Rng

TEXT_CORRUPTIONS = ("none", "shuffle_classes", "uniform")

TEXT_LOGIT_SCALE = 10.0


@dataclass
class SynthSpec:
    C: int = 6
    D: int = 32
    H: int = 24
    W: int = 24
    N: int = 24
    images: int = 40
    eval_images: int = 20
    examples_per_class: int = 5
    segments_per_image: int | None = None  # default: min(N // 2, 2 * C)
    noise_sigma: float = 0.1
    text_corruption: str = "none"
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.C < 2:
            raise ConfigError("need at least 2 classes")
        if self.D < 2 or self.H < 1 or self.W < 1:
            raise ConfigError("D must be >= 2 and the grid non-empty")
        if self.images < 1 or self.eval_images < 0:
            raise ConfigError("need at least one adaptation image")
        if self.examples_per_class < 1:
            raise ConfigError("examples_per_class must be >= 1")
        if self.text_corruption not in TEXT_CORRUPTIONS:
            raise ConfigError(
                f"unknown text corruption {self.text_corruption!r}")
        s = self.segments()
        if s < 1 or s > self.N:
            raise ConfigError(f"segments per image ({s}) must be in [1, N={self.N}]")
        rows, cols = self._grid(s)
        if rows > self.H or cols > self.W:
            raise ConfigError(
                f"cannot pack {s} segments into a {self.H}x{self.W} grid")
        return self

    def segments(self) -> int:
        if self.segments_per_image is not None:
            return self.segments_per_image
        return max(1, min(self.N // 2, 2 * self.C))

    @staticmethod
    def _grid(s: int) -> tuple[int, int]:
        rows = int(np.sqrt(s))
        while s % rows:
            rows -= 1
        return rows, s // rows

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown SynthSpec fields: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass
class Fixture:
    """In-memory view of a generated fixture directory."""

    root: str
    spec: SynthSpec
    train_ids: list[str]
    eval_ids: list[str]
    class_directions: np.ndarray      # (C, D) planted feature/query directions
    distractor_direction: np.ndarray  # (D,)
    examples: list[VisualExample] = field(default_factory=list)


def _draw_directions(rng: Rng, count: int, dim: int,
                     max_cos: float = 0.3) -> np.ndarray:
    """Unit vectors with pairwise cosine <= max_cos, by rejection."""
    out: list[np.ndarray] = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 10000 * count:
            raise ConfigError(
                f"cannot place {count} directions in {dim} dims at "
                f"cosine <= {max_cos}")
        v = rng.gauss_n(dim)
        v /= np.linalg.norm(v)
        if all(float(np.dot(v, u)) <= max_cos for u in out):
            out.append(v)
    return np.stack(out)


def _edges(total: int, parts: int) -> list[int]:
    base = total // parts
    rem = total % parts
    edges = [0]
    for i in range(parts):
        edges.append(edges[-1] + base + (1 if i < rem else 0))
    return edges


def _segment_rects(spec: SynthSpec) -> list[tuple[int, int, int, int]]:
    """(y0, y1, x0, x1) tiles covering the whole grid, row-major."""
    s = spec.segments()
    rows, cols = spec._grid(s)
    ys = _edges(spec.H, rows)
    xs = _edges(spec.W, cols)
    return [(ys[r], ys[r + 1], xs[c], xs[c + 1])
            for r in range(rows) for c in range(cols)]


def _rect_mask(spec: SynthSpec, rect: tuple[int, int, int, int]) -> np.ndarray:
    mask = np.zeros((spec.H, spec.W), dtype=np.uint8)
    y0, y1, x0, x1 = rect
    mask[y0:y1, x0:x1] = 1
    return mask


def _segment_classes(spec: SynthSpec, rng: Rng) -> list[int]:
    """Random classes covering every class before repeats, per image."""
    s = spec.segments()
    classes: list[int] = []
    while len(classes) < s:
        perm = list(range(spec.C))
        rng.shuffle(perm)
        classes.extend(perm)
    return classes[:s]


def _make_image(spec: SynthSpec, rng: Rng, image_id: str,
                dirs: np.ndarray, distractor: np.ndarray,
                permutation: list[int]) -> tuple[FeatureBundle, list[int]]:
    rects = _segment_rects(spec)
    classes = _segment_classes(spec, rng)
    s = len(rects)

    features = rng.gauss_n(spec.H * spec.W * spec.D).reshape(
        spec.H, spec.W, spec.D) * spec.noise_sigma
    for rect, cls in zip(rects, classes):
        y0, y1, x0, x1 = rect
        features[y0:y1, x0:x1, :] += dirs[cls]

    queries = rng.gauss_n(spec.N * spec.D).reshape(spec.N, spec.D) \
        * spec.noise_sigma
    for i, cls in enumerate(classes):
        queries[i] += dirs[cls]
    queries[s:] += distractor

    void = spec.C
    text = np.zeros((spec.N, spec.C + 1), dtype=np.float64)
    for i, cls in enumerate(classes):
        label = cls if spec.text_corruption == "none" else permutation[cls]
        text[i, label] = TEXT_LOGIT_SCALE
    text[s:, void] = TEXT_LOGIT_SCALE
    if spec.text_corruption == "uniform":
        text[:] = 0.0

    masks = [_rect_mask(spec, rect) for rect in rects]
    for _ in range(spec.N - s):
        h = 1 + rng.index(max(1, spec.H // 2))
        w = 1 + rng.index(max(1, spec.W // 2))
        y = rng.index(spec.H - h + 1)
        x = rng.index(spec.W - w + 1)
        masks.append(_rect_mask(spec, (y, y + h, x, x + w)))

    gt = [(masks[i], classes[i]) for i in range(s)]
    bundle = FeatureBundle(
        image_id=image_id,
        features=features.astype(np.float32),
        queries=queries.astype(np.float32),
        text_logits=text.astype(np.float32),
        pred_masks=masks,
        gt_segments=gt,
    ).validate()
    return bundle, classes


def gen_synthetic(spec: SynthSpec, out_dir: str) -> Fixture:
    """Generate a fixture directory; identical spec+seed gives identical bytes."""
    spec.validate()
    rng = Rng(spec.seed)
    dirs_all = _draw_directions(rng, spec.C + 1, spec.D)
    dirs, distractor = dirs_all[:spec.C], dirs_all[spec.C]
    # shuffle_classes uses a cyclic shift: a derangement, so the corrupted
    # label is wrong for every class regardless of seed
    permutation = [(c + 1) % spec.C for c in range(spec.C)]

    bundles_dir = os.path.join(out_dir, "bundles")
    try:
        os.makedirs(bundles_dir, exist_ok=True)
    except OSError as exc:
        raise BundleIOError(f"cannot create {bundles_dir}: {exc}") from exc

    total = spec.images + spec.eval_images
    train_ids, eval_ids = [], []
    segment_index: dict[int, list[tuple[str, int]]] = {c: [] for c in range(spec.C)}
    rects = _segment_rects(spec)
    for n in range(total):
        image_id = f"img_{n:04d}"
        bundle, classes = _make_image(spec, rng, image_id, dirs, distractor,
                                      permutation)
        write_bundle(bundle, os.path.join(bundles_dir, image_id))
        if n < spec.images:
            train_ids.append(image_id)
            for seg_i, cls in enumerate(classes):
                segment_index[cls].append((image_id, seg_i))
        else:
            eval_ids.append(image_id)

    examples = _draw_examples(spec, rng, segment_index, rects, out_dir)

    fixture_meta = {
        "version": 1,
        "spec": asdict(spec),
        "train_ids": train_ids,
        "eval_ids": eval_ids,
        "planted": {
            "class_directions": [[float(v) for v in row] for row in dirs],
            "distractor_direction": [float(v) for v in distractor],
            "text_permutation": permutation,
        },
    }
    with open(os.path.join(out_dir, "fixture.json"), "w", encoding="utf-8") as fh:
        json.dump(fixture_meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return Fixture(out_dir, spec, train_ids, eval_ids, dirs, distractor, examples)


def _draw_examples(spec: SynthSpec, rng: Rng,
                   segment_index: dict[int, list[tuple[str, int]]],
                   rects: list[tuple[int, int, int, int]],
                   out_dir: str) -> list[VisualExample]:
    ex_dir = os.path.join(out_dir, "example_masks")
    os.makedirs(ex_dir, exist_ok=True)
    examples: list[VisualExample] = []
    listing = []
    for cls in range(spec.C):
        pool = list(segment_index[cls])
        if len(pool) < spec.examples_per_class:
            raise ConfigError(
                f"class {cls} has only {len(pool)} segments across the "
                f"adaptation images; cannot draw {spec.examples_per_class} examples")
        rng.shuffle(pool)
        for image_id, seg_i in pool[:spec.examples_per_class]:
            mask = _rect_mask(spec, rects[seg_i])
            fname = f"ex_{len(examples):04d}.rle"
            with open(os.path.join(ex_dir, fname), "wb") as fh:
                fh.write(rle_to_bytes(rle_encode(mask)))
            examples.append(VisualExample(image_id, mask, cls))
            listing.append({"ref_image_id": image_id, "class_id": cls,
                            "rle_file": os.path.join("example_masks", fname)})
    with open(os.path.join(out_dir, "examples.json"), "w", encoding="utf-8") as fh:
        json.dump(listing, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return examples


def load_examples(fixture_dir: str, h: int, w: int) -> list[VisualExample]:
    """Read examples.json plus its RLE masks back into memory."""
    path = os.path.join(fixture_dir, "examples.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            listing = json.load(fh)
    except OSError as exc:
        raise BundleIOError(f"missing examples listing: {path}") from exc
    out = []
    for item in listing:
        rle_path = os.path.join(fixture_dir, item["rle_file"])
        try:
            with open(rle_path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise BundleIOError(f"missing example mask: {rle_path}") from exc
        runs, _ = rle_from_bytes(raw)
        out.append(VisualExample(str(item["ref_image_id"]),
                                 rle_decode(runs, h, w),
                                 int(item["class_id"])))
    return out
