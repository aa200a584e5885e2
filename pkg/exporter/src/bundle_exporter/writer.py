"""Canonical writer for the tensor interchange directory format.

Deliberately self-contained: the exporter produces the format, the
adaptation engine consumes it, and nothing else is shared. Bytes are
fully determined by the data (little-endian float32, canonical RLE,
sorted two-space-indented JSON), so re-serialization by the consumer
reproduces the directory exactly.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MANIFEST_VERSION = 1


class ExportError(Exception):
    pass


def rle_runs(mask: np.ndarray) -> list[int]:
    """Row-major alternating runs, first run counting zeros (maybe 0)."""
    flat = np.asarray(mask, np.uint8).ravel()
    if flat.size == 0:
        return []
    edges = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_block(mask: np.ndarray) -> bytes:
    runs = rle_runs(mask)
    return struct.pack(f"<{len(runs) + 1}I", len(runs), *runs)


def _require_finite(name: str, arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(out)):
        raise ExportError(f"tensor '{name}' contains non-finite values")
    return out


def write_bundle_dir(out_dir: str, image_id: str, features: np.ndarray,
                     queries: np.ndarray, text_logits: np.ndarray,
                     pred_masks: list[np.ndarray] | None = None,
                     gt: list[tuple[np.ndarray, int]] | None = None,
                     class_embeds: np.ndarray | None = None,
                     query_class_embeds: np.ndarray | None = None) -> None:
    features = _require_finite("features", features)
    queries = _require_finite("queries", queries)
    text_logits = _require_finite("text_logits", text_logits)
    if features.ndim != 3:
        raise ExportError("features must be (H, W, D)")
    h, w, d = features.shape
    if queries.ndim != 2 or queries.shape[1] != d:
        raise ExportError("queries must be (N, D) with the feature depth")
    n = queries.shape[0]
    if text_logits.shape != (n, text_logits.shape[1]) or text_logits.shape[1] < 2:
        raise ExportError("text_logits must be (N, C+1) with C >= 1")
    c = text_logits.shape[1] - 1

    os.makedirs(out_dir, exist_ok=True)
    tensors = {}
    named = {"features": features, "queries": queries,
             "text_logits": text_logits}
    if class_embeds is not None:
        named["class_embeds"] = _require_finite("class_embeds", class_embeds)
    if query_class_embeds is not None:
        named["query_class_embeds"] = _require_finite(
            "query_class_embeds", query_class_embeds)
    for name, arr in named.items():
        fname = f"{name}.bin"
        with open(os.path.join(out_dir, fname), "wb") as fh:
            fh.write(arr.astype("<f4", copy=False).tobytes())
        tensors[name] = {"file": fname, "dtype": "f32",
                         "shape": list(arr.shape)}

    manifest = {
        "version": MANIFEST_VERSION,
        "image_id": image_id,
        "H": h, "W": w, "D": d, "N": n, "C": c,
        "tensors": tensors,
    }

    if pred_masks is not None:
        if len(pred_masks) != n:
            raise ExportError(f"expected {n} predicted masks, got {len(pred_masks)}")
        blocks = [rle_block(m) for m in pred_masks]
        offsets, pos = [], 0
        for b in blocks:
            offsets.append(pos)
            pos += len(b)
        with open(os.path.join(out_dir, "pred_masks.rle"), "wb") as fh:
            fh.write(b"".join(blocks))
        tensors["pred_masks"] = {"file": "pred_masks.rle", "dtype": "rle",
                                 "shape": [n, h, w], "offsets": offsets}

    if gt is not None:
        entries = []
        for i, (mask, class_id) in enumerate(gt):
            fname = f"gt_{i:03d}.rle"
            with open(os.path.join(out_dir, fname), "wb") as fh:
                fh.write(rle_block(mask))
            entries.append({"class_id": int(class_id), "rle_file": fname})
        manifest["gt"] = entries

    with open(os.path.join(out_dir, "manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
