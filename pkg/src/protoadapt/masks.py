"""Binary mask algebra: decoding, IoU, pooling, resampling, and RLE.

Masks are (H, W) uint8 arrays with values in {0, 1}. Dense feature maps
are (H, W, D) arrays. All operations are pure.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


def as_mask(arr: np.ndarray) -> np.ndarray:
    """Validate and canonicalize a binary mask to uint8 {0, 1}."""
    a = np.asarray(arr)
    if a.ndim != 2:
        raise ConfigError(f"mask must be 2-D, got shape {a.shape}")
    a = a.astype(np.uint8, copy=False)
    if a.size and a.max() > 1:
        raise ConfigError("mask values must be in {0, 1}")
    return a


@dataclass(frozen=True)
class PooledFeature:
    """Per-channel mean of dense features over a mask's on-cells."""

    values: np.ndarray  # (D,) float64
    empty: bool


def decode_masks(features: np.ndarray, queries: np.ndarray,
                 threshold: float = 0.5) -> list[np.ndarray]:
    """Decode one binary mask per query from dense features.

    The raw logit of query i at cell (y, x) is the dot product of the
    feature vector with the query; a cell is on iff its sigmoid is >=
    ``threshold`` (the boundary is inclusive, so zero logits at the
    default threshold 0.5 yield an all-ones mask).
    """
    features = np.asarray(features, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if features.ndim != 3 or queries.ndim != 2:
        raise ConfigError("decode_masks expects (H,W,D) features and (N,D) queries")
    h, w, d = features.shape
    if queries.shape[1] != d:
        raise ConfigError(
            f"feature depth {d} does not match query depth {queries.shape[1]}")
    logits = features.reshape(h * w, d) @ queries.T  # (H*W, N)
    probs = 1.0 / (1.0 + np.exp(-logits))
    onoff = (probs >= threshold).astype(np.uint8)
    return [onoff[:, i].reshape(h, w) for i in range(queries.shape[0])]


def mask_logits(features: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Raw per-cell mask logits, shape (N, H, W)."""
    features = np.asarray(features, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    h, w, d = features.shape
    return (features.reshape(h * w, d) @ queries.T).T.reshape(-1, h, w)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two same-shape binary masks.

    Two empty masks have IoU 0 by convention.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ConfigError(f"mask shapes differ: {a.shape} vs {b.shape}")
    ab = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(ab) / float(union)


def iou_matrix(rows: list[np.ndarray], cols: list[np.ndarray]) -> np.ndarray:
    """Pairwise IoU, shape (len(rows), len(cols))."""
    if not rows or not cols:
        return np.zeros((len(rows), len(cols)), dtype=np.float64)
    r = np.stack([np.asarray(m, dtype=bool).ravel() for m in rows])
    c = np.stack([np.asarray(m, dtype=bool).ravel() for m in cols])
    inter = (r.astype(np.int64) @ c.T.astype(np.int64)).astype(np.float64)
    rsum = r.sum(axis=1, dtype=np.int64)[:, None]
    csum = c.sum(axis=1, dtype=np.int64)[None, :]
    union = rsum + csum - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def mask_average_pool(features: np.ndarray, mask: np.ndarray) -> PooledFeature:
    """Mean feature vector over the on-cells of ``mask``.

    An empty mask yields the zero vector, flagged so callers can choose
    to skip (prototype construction) or keep (inference) the result.
    """
    features = np.asarray(features, dtype=np.float64)
    mask = np.asarray(mask)
    if features.shape[:2] != mask.shape:
        raise ConfigError(
            f"mask shape {mask.shape} does not match feature grid {features.shape[:2]}")
    on = mask.astype(bool)
    count = int(on.sum())
    if count == 0:
        return PooledFeature(np.zeros(features.shape[2], dtype=np.float64), True)
    return PooledFeature(features[on].sum(axis=0) / count, False)


def resample_mask(mask: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Nearest-neighbor resampling to (new_h, new_w).

    Output cell (y, x) reads input cell (floor((y+.5)*H/H'), floor((x+.5)*W/W')).
    """
    if new_h < 1 or new_w < 1:
        raise ConfigError("target resolution must be >= 1x1")
    mask = as_mask(mask)
    h, w = mask.shape
    ys = np.minimum((np.arange(new_h) + 0.5) * h / new_h, h - 1).astype(np.int64)
    xs = np.minimum((np.arange(new_w) + 0.5) * w / new_w, w - 1).astype(np.int64)
    return mask[np.ix_(ys, xs)]


# --- run-length codec ----------------------------------------------------
#
# Row-major RLE with alternating runs, the first run counting zeros
# (possibly zero-length). On disk a block is unsigned 32-bit
# little-endian integers: run count first, then the run lengths.

def rle_encode(mask: np.ndarray) -> list[int]:
    mask = as_mask(mask)
    flat = mask.ravel()
    runs: list[int] = []
    if flat.size == 0:
        return runs
    edges = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    lengths = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs.append(0)
    runs.extend(int(v) for v in lengths)
    return runs


def rle_decode(runs: list[int], h: int, w: int) -> np.ndarray:
    total = sum(runs)
    if total != h * w:
        raise ConfigError(f"RLE covers {total} cells, expected {h * w}")
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    val = 0
    for run in runs:
        if run < 0:
            raise ConfigError("negative run length")
        if val:
            flat[pos:pos + run] = 1
        pos += run
        val ^= 1
    return flat.reshape(h, w)


def rle_to_bytes(runs: list[int]) -> bytes:
    return struct.pack(f"<{len(runs) + 1}I", len(runs), *runs)


def rle_from_bytes(buf: bytes, offset: int = 0) -> tuple[list[int], int]:
    """Decode one RLE block; returns (runs, offset past the block)."""
    if offset + 4 > len(buf):
        raise ConfigError("truncated RLE block header")
    (count,) = struct.unpack_from("<I", buf, offset)
    end = offset + 4 + 4 * count
    if end > len(buf):
        raise ConfigError("truncated RLE block body")
    runs = list(struct.unpack_from(f"<{count}I", buf, offset + 4))
    return runs, end
