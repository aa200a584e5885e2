"""Bundle export: frozen-model adapters and synthetic stand-ins.

The exporter emits interchange bundles only; prototypes and scores are
never computed here, so the adaptation math lives in exactly one place
(the consumer). A "model" is an adapter ``module:callable`` that maps
one image reference to the exported tensors; without model access,
synthetic mode emits format-conformant stand-in tensors.
"""

from __future__ import annotations

import importlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .writer import ExportError, write_bundle_dir

SYNTHETIC_MODEL = "synthetic"

# Adapter protocol: callable(image_ref, class_names) -> dict with keys
# features (H,W,D), queries (N,D), text_logits (N,C+1); optional
# pred_masks (list of (H,W) binary), gt (list of (mask, class_id)),
# class_embeds ((C+1,D_ce)), query_class_embeds ((N,D_ce)).


@dataclass
class ExportJob:
    model: str                      # "synthetic" or "module:callable"
    images: list[str]               # image ids or paths
    out_dir: str
    class_names: list[str]
    feature_resolution: str = "decoder output after final upsampling"
    seed: int = 0
    grid: tuple[int, int] = (16, 16)   # synthetic H, W
    depth: int = 32                    # synthetic D
    queries: int = 16                  # synthetic N
    with_class_embeds: bool = False
    annotations: dict[str, list[dict]] = field(default_factory=dict)

    def validate(self) -> "ExportJob":
        if not self.images:
            raise ExportError("image list is empty")
        if not self.class_names:
            raise ExportError("class vocabulary is empty")
        if len(set(self.class_names)) != len(self.class_names):
            raise ExportError("duplicate class names in vocabulary")
        return self


def load_adapter(model: str):
    if ":" not in model:
        raise ExportError(
            f"model {model!r} is not loadable (expected 'module:callable')")
    mod_name, _, attr = model.partition(":")
    try:
        module = importlib.import_module(mod_name)
    except ImportError as exc:
        raise ExportError(f"cannot import model module {mod_name!r}: {exc}") from exc
    adapter = getattr(module, attr, None)
    if not callable(adapter):
        raise ExportError(f"{model!r} does not name a callable adapter")
    return adapter


def _check_adapter_output(image: str, payload: dict, num_classes: int) -> dict:
    for key in ("features", "queries", "text_logits"):
        if key not in payload:
            raise ExportError(f"adapter output for {image!r} lacks {key!r}")
    width = np.asarray(payload["text_logits"]).shape[1]
    if width != num_classes + 1:
        raise ExportError(
            f"adapter text_logits width {width} does not match vocabulary "
            f"({num_classes} classes + void)")
    return payload


# --- synthetic stand-in ------------------------------------------------------

def _mix64(*values: int) -> int:
    acc = 0xCBF29CE484222325
    for v in values:
        acc ^= v & 0xFFFFFFFFFFFFFFFF
        acc = (acc * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return acc


def _synthetic_payload(job: ExportJob, image: str, index: int) -> dict:
    h, w = job.grid
    d = job.depth
    n = job.queries
    c = len(job.class_names)
    rng = np.random.default_rng(_mix64(job.seed, index))

    features = rng.normal(size=(h, w, d)).astype(np.float32)
    queries = rng.normal(size=(n, d)).astype(np.float32)
    text_logits = rng.normal(size=(n, c + 1)).astype(np.float32)

    pred_masks = []
    for _ in range(n):
        y0 = int(rng.integers(0, h))
        x0 = int(rng.integers(0, w))
        y1 = int(rng.integers(y0, h)) + 1
        x1 = int(rng.integers(x0, w)) + 1
        m = np.zeros((h, w), np.uint8)
        m[y0:y1, x0:x1] = 1
        pred_masks.append(m)

    payload = {"features": features, "queries": queries,
               "text_logits": text_logits, "pred_masks": pred_masks}

    boxes = job.annotations.get(image, [])
    if boxes:
        gt = []
        name_to_id = {name: i for i, name in enumerate(job.class_names)}
        for box in boxes:
            cls = box["class"]
            if cls not in name_to_id:
                raise ExportError(
                    f"annotation class {cls!r} not in the vocabulary")
            y0, y1, x0, x1 = (int(v) for v in box["bbox"])
            if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
                raise ExportError(f"annotation bbox {box['bbox']} outside grid")
            m = np.zeros((h, w), np.uint8)
            m[y0:y1, x0:x1] = 1
            gt.append((m, name_to_id[cls]))
        payload["gt"] = gt

    if job.with_class_embeds:
        d_ce = 3 * d
        payload["class_embeds"] = rng.normal(size=(c + 1, d_ce)).astype(np.float32)
        payload["query_class_embeds"] = rng.normal(size=(n, d_ce)).astype(np.float32)
    return payload


# --- main entry ---------------------------------------------------------------

def export(job: ExportJob) -> list[str]:
    """Write one bundle directory per image; returns their paths."""
    job.validate()
    adapter = None
    if job.model != SYNTHETIC_MODEL:
        adapter = load_adapter(job.model)

    os.makedirs(job.out_dir, exist_ok=True)
    written = []
    for index, image in enumerate(job.images):
        if adapter is None:
            payload = _synthetic_payload(job, image, index)
        else:
            payload = _check_adapter_output(
                image, adapter(image, job.class_names), len(job.class_names))
        image_id = os.path.splitext(os.path.basename(image))[0]
        bundle_dir = os.path.join(job.out_dir, image_id)
        write_bundle_dir(
            bundle_dir, image_id,
            features=np.asarray(payload["features"]),
            queries=np.asarray(payload["queries"]),
            text_logits=np.asarray(payload["text_logits"]),
            pred_masks=payload.get("pred_masks"),
            gt=payload.get("gt"),
            class_embeds=payload.get("class_embeds"),
            query_class_embeds=payload.get("query_class_embeds"))
        written.append(bundle_dir)

    job_manifest = {
        "model": job.model,
        "feature_resolution": job.feature_resolution,
        "class_names": job.class_names,
        "images": [os.path.basename(p) for p in written],
        "seed": job.seed,
    }
    with open(os.path.join(job.out_dir, "export_manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(job_manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return written
