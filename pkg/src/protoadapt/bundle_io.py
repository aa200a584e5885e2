"""On-disk interchange format for model-exported tensors.

A bundle is a directory with ``manifest.json`` plus raw tensor files.
Float tensors are little-endian float32, row-major. Binary masks are
stored run-length encoded (see masks.rle_encode). The same bytes are
produced for the same bundle on every platform, so write -> read ->
write is the identity at the byte level.

Manifest layout (version 1)::

    {
      "version": 1, "image_id": "...",
      "H": int, "W": int, "D": int, "N": int, "C": int,
      "tensors": {
        "features":    {"file": "...", "dtype": "f32", "shape": [H, W, D]},
        "queries":     {"file": "...", "dtype": "f32", "shape": [N, D]},
        "text_logits": {"file": "...", "dtype": "f32", "shape": [N, C+1]},
        "pred_masks":  {"file": "...", "dtype": "rle", "shape": [N, H, W],
                         "offsets": [...]},            # optional
        "class_embeds":       {... "shape": [C+1, D_ce]},  # optional
        "query_class_embeds": {... "shape": [N, D_ce]}     # optional
      },
      "gt": [{"class_id": int, "rle_file": "..."}],     # optional
      "stuff_class_ids": [int, ...]                      # optional
    }
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import BundleIOError, ConfigError, NumericalError
from .masks import as_mask, rle_decode, rle_encode, rle_from_bytes, rle_to_bytes

MANIFEST_VERSION = 1

_REQUIRED_TENSORS = ("features", "queries", "text_logits")


def _check_f32(name: str, arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    a = np.ascontiguousarray(arr, dtype=np.float32)
    if a.shape != shape:
        raise ConfigError(f"tensor '{name}' has shape {a.shape}, expected {shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"tensor '{name}' contains non-finite values")
    return a


@dataclass
class FeatureBundle:
    """One image's exported tensors plus optional masks and ground truth."""

    image_id: str
    features: np.ndarray        # (H, W, D) float32
    queries: np.ndarray         # (N, D) float32
    text_logits: np.ndarray     # (N, C+1) float32
    pred_masks: list[np.ndarray] | None = None   # N masks, (H, W) uint8
    gt_segments: list[tuple[np.ndarray, int]] | None = None
    class_embeds: np.ndarray | None = None        # (C+1, D_ce) float32
    query_class_embeds: np.ndarray | None = None  # (N, D_ce) float32
    stuff_class_ids: list[int] = field(default_factory=list)

    @property
    def H(self) -> int:
        return self.features.shape[0]

    @property
    def W(self) -> int:
        return self.features.shape[1]

    @property
    def D(self) -> int:
        return self.features.shape[2]

    @property
    def N(self) -> int:
        return self.queries.shape[0]

    @property
    def C(self) -> int:
        return self.text_logits.shape[1] - 1

    def validate(self) -> "FeatureBundle":
        """Check all invariants and freeze tensors read-only."""
        if self.features.ndim != 3:
            raise ConfigError("features must be (H, W, D)")
        h, w, d = self.features.shape
        if min(h, w, d) < 1:
            raise ConfigError("feature dimensions must be positive")
        self.features = _check_f32("features", self.features, (h, w, d))
        if self.queries.ndim != 2 or self.queries.shape[1] != d:
            raise ConfigError(
                f"queries must be (N, {d}), got {self.queries.shape}")
        n = self.queries.shape[0]
        self.queries = _check_f32("queries", self.queries, (n, d))
        if self.text_logits.ndim != 2 or self.text_logits.shape[0] != n:
            raise ConfigError(
                f"text_logits must have {n} rows, got {self.text_logits.shape}")
        if self.text_logits.shape[1] < 2:
            raise ConfigError("text_logits needs at least 2 columns (1 class + void)")
        self.text_logits = _check_f32(
            "text_logits", self.text_logits, self.text_logits.shape)
        if self.pred_masks is not None:
            if len(self.pred_masks) != n:
                raise ConfigError(
                    f"expected {n} predicted masks, got {len(self.pred_masks)}")
            self.pred_masks = [self._check_mask(m) for m in self.pred_masks]
        if self.gt_segments is not None:
            checked = []
            for mask, cid in self.gt_segments:
                cid = int(cid)
                if not 0 <= cid < self.C:
                    raise ConfigError(f"GT class id {cid} outside [0, {self.C})")
                checked.append((self._check_mask(mask), cid))
            self.gt_segments = checked
        if self.class_embeds is not None:
            ce = np.ascontiguousarray(self.class_embeds, dtype=np.float32)
            if ce.ndim != 2 or ce.shape[0] != self.C + 1:
                raise ConfigError(
                    f"class_embeds must be ({self.C + 1}, D_ce), got {ce.shape}")
            self.class_embeds = _check_f32("class_embeds", ce, ce.shape)
        if self.query_class_embeds is not None:
            qce = np.ascontiguousarray(self.query_class_embeds, dtype=np.float32)
            if qce.ndim != 2 or qce.shape[0] != n:
                raise ConfigError(
                    f"query_class_embeds must be ({n}, D_ce), got {qce.shape}")
            self.query_class_embeds = _check_f32("query_class_embeds", qce, qce.shape)
        for arr in self._all_arrays():
            arr.setflags(write=False)
        return self

    def _check_mask(self, mask: np.ndarray) -> np.ndarray:
        m = as_mask(mask)
        if m.shape != (self.H, self.W):
            raise ConfigError(
                f"mask shape {m.shape} does not match bundle grid {(self.H, self.W)}")
        return m

    def _all_arrays(self) -> list[np.ndarray]:
        arrays = [self.features, self.queries, self.text_logits]
        if self.pred_masks:
            arrays.extend(self.pred_masks)
        if self.gt_segments:
            arrays.extend(m for m, _ in self.gt_segments)
        if self.class_embeds is not None:
            arrays.append(self.class_embeds)
        if self.query_class_embeds is not None:
            arrays.append(self.query_class_embeds)
        return arrays


def _write_json(path: str, obj: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _tensor_entry(name: str, shape: tuple[int, ...]) -> dict:
    return {"file": f"{name}.bin", "dtype": "f32", "shape": list(shape)}


def write_bundle(bundle: FeatureBundle, dir_path: str) -> None:
    """Write a validated bundle; output bytes depend only on the bundle."""
    bundle.validate()
    try:
        os.makedirs(dir_path, exist_ok=True)
        tensors: dict[str, dict] = {}
        for name in ("features", "queries", "text_logits",
                     "class_embeds", "query_class_embeds"):
            arr = getattr(bundle, name)
            if arr is None:
                continue
            tensors[name] = _tensor_entry(name, arr.shape)
            with open(os.path.join(dir_path, f"{name}.bin"), "wb") as fh:
                fh.write(arr.astype("<f4", copy=False).tobytes())
        manifest = {
            "version": MANIFEST_VERSION,
            "image_id": bundle.image_id,
            "H": bundle.H, "W": bundle.W, "D": bundle.D,
            "N": bundle.N, "C": bundle.C,
            "tensors": tensors,
        }
        if bundle.pred_masks is not None:
            blocks = [rle_to_bytes(rle_encode(m)) for m in bundle.pred_masks]
            offsets = np.concatenate(([0], np.cumsum([len(b) for b in blocks])[:-1]))
            with open(os.path.join(dir_path, "pred_masks.rle"), "wb") as fh:
                fh.write(b"".join(blocks))
            tensors["pred_masks"] = {
                "file": "pred_masks.rle", "dtype": "rle",
                "shape": [bundle.N, bundle.H, bundle.W],
                "offsets": [int(o) for o in offsets],
            }
        if bundle.gt_segments is not None:
            gt_entries = []
            for i, (mask, cid) in enumerate(bundle.gt_segments):
                fname = f"gt_{i:03d}.rle"
                with open(os.path.join(dir_path, fname), "wb") as fh:
                    fh.write(rle_to_bytes(rle_encode(mask)))
                gt_entries.append({"class_id": cid, "rle_file": fname})
            manifest["gt"] = gt_entries
        if bundle.stuff_class_ids:
            manifest["stuff_class_ids"] = sorted(int(c) for c in bundle.stuff_class_ids)
        _write_json(os.path.join(dir_path, "manifest.json"), manifest)
    except OSError as exc:
        raise BundleIOError(f"failed writing bundle to {dir_path}: {exc}") from exc


def _read_f32(dir_path: str, entry: dict, name: str) -> np.ndarray:
    shape = tuple(int(s) for s in entry["shape"])
    path = os.path.join(dir_path, entry["file"])
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise BundleIOError(f"missing tensor file for '{name}': {path}") from exc
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ConfigError(
            f"tensor '{name}': manifest declares {expected} bytes, file has {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"tensor '{name}' contains non-finite values")
    return arr


def read_bundle(dir_path: str) -> FeatureBundle:
    """Read and validate a bundle directory."""
    manifest_path = os.path.join(dir_path, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise BundleIOError(f"missing manifest: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed manifest {manifest_path}: {exc}") from exc

    if manifest.get("version") != MANIFEST_VERSION:
        raise ConfigError(
            f"unknown manifest version {manifest.get('version')!r} "
            f"(supported: {MANIFEST_VERSION})")
    tensors = manifest.get("tensors", {})
    for name in _REQUIRED_TENSORS:
        if name not in tensors:
            raise ConfigError(f"manifest lacks required tensor '{name}'")

    h, w = int(manifest["H"]), int(manifest["W"])
    n, c = int(manifest["N"]), int(manifest["C"])
    d = int(manifest["D"])

    features = _read_f32(dir_path, tensors["features"], "features")
    queries = _read_f32(dir_path, tensors["queries"], "queries")
    text_logits = _read_f32(dir_path, tensors["text_logits"], "text_logits")
    if features.shape != (h, w, d) or queries.shape != (n, d) \
            or text_logits.shape != (n, c + 1):
        raise ConfigError("manifest header dims disagree with tensor shapes")

    pred_masks = None
    if "pred_masks" in tensors:
        entry = tensors["pred_masks"]
        path = os.path.join(dir_path, entry["file"])
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise BundleIOError(f"missing mask file: {path}") from exc
        offsets = entry.get("offsets")
        if offsets is None or len(offsets) != n:
            raise ConfigError("pred_masks entry needs one offset per mask")
        pred_masks = []
        for off in offsets:
            runs, _ = rle_from_bytes(raw, int(off))
            pred_masks.append(rle_decode(runs, h, w))

    gt_segments = None
    if "gt" in manifest:
        gt_segments = []
        for item in manifest["gt"]:
            path = os.path.join(dir_path, item["rle_file"])
            try:
                with open(path, "rb") as fh:
                    raw = fh.read()
            except OSError as exc:
                raise BundleIOError(f"missing GT mask file: {path}") from exc
            runs, _ = rle_from_bytes(raw)
            gt_segments.append((rle_decode(runs, h, w), int(item["class_id"])))

    extras = {}
    for name in ("class_embeds", "query_class_embeds"):
        if name in tensors:
            extras[name] = _read_f32(dir_path, tensors[name], name)

    bundle = FeatureBundle(
        image_id=str(manifest["image_id"]),
        features=features,
        queries=queries,
        text_logits=text_logits,
        pred_masks=pred_masks,
        gt_segments=gt_segments,
        stuff_class_ids=[int(x) for x in manifest.get("stuff_class_ids", [])],
        **extras,
    )
    return bundle.validate()


def read_bundle_set(root: str) -> list[FeatureBundle]:
    """Read every bundle subdirectory of ``root``, sorted by name."""
    if not os.path.isdir(root):
        raise BundleIOError(f"not a directory: {root}")
    bundles = []
    for name in sorted(os.listdir(root)):
        sub = os.path.join(root, name)
        if os.path.isdir(sub) and os.path.exists(os.path.join(sub, "manifest.json")):
            bundles.append(read_bundle(sub))
    if not bundles:
        raise BundleIOError(f"no bundle directories under {root}")
    return bundles
