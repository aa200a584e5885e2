"""CLI: bundle-export --model M --images LIST --out DIR [--classes FILE]

The images list is either a plain text file (one image reference per
line) or JSON: a list of strings, or of objects with ``id`` and
optional ``gt`` boxes ([{"class": name, "bbox": [y0, y1, x0, x1]}]).
The class vocabulary file is one name per line or a JSON list; its
order fixes the class ids and the text-logit columns.
"""

from __future__ import annotations

import argparse
import json
import sys

from .export import ExportError, ExportJob, export


def _read_images(path: str) -> tuple[list[str], dict]:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    annotations: dict[str, list[dict]] = {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        images = [line.strip() for line in text.splitlines() if line.strip()]
        return images, annotations
    if not isinstance(data, list):
        raise ExportError("images JSON must be a list")
    images = []
    for item in data:
        if isinstance(item, str):
            images.append(item)
        elif isinstance(item, dict) and "id" in item:
            images.append(str(item["id"]))
            if item.get("gt"):
                annotations[str(item["id"])] = item["gt"]
        else:
            raise ExportError(f"bad images entry: {item!r}")
    return images, annotations


def _read_classes(path: str) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
        if not isinstance(data, list):
            raise ExportError("classes JSON must be a list of names")
        return [str(x) for x in data]
    except json.JSONDecodeError:
        return [line.strip() for line in text.splitlines() if line.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bundle-export",
        description="Export frozen-model tensors (or synthetic stand-ins) "
                    "as interchange bundles")
    parser.add_argument("--model", required=True,
                        help="'synthetic' or an adapter 'module:callable'")
    parser.add_argument("--images", required=True,
                        help="file listing image references")
    parser.add_argument("--out", required=True)
    parser.add_argument("--classes", required=True,
                        help="class vocabulary file (order fixes ids)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--grid", type=int, nargs=2, default=(16, 16),
                        metavar=("H", "W"), help="synthetic feature grid")
    parser.add_argument("--depth", type=int, default=32,
                        help="synthetic feature depth")
    parser.add_argument("--queries", type=int, default=16,
                        help="synthetic query count")
    parser.add_argument("--class-embeds", dest="class_embeds",
                        action="store_true",
                        help="emit per-class and per-query embedding tensors")
    parser.add_argument("--resolution-note", dest="resolution_note",
                        default="decoder output after final upsampling")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        images, annotations = _read_images(args.images)
        job = ExportJob(
            model=args.model,
            images=images,
            out_dir=args.out,
            class_names=_read_classes(args.classes),
            feature_resolution=args.resolution_note,
            seed=args.seed,
            grid=tuple(args.grid),
            depth=args.depth,
            queries=args.queries,
            with_class_embeds=args.class_embeds,
            annotations=annotations,
        )
        written = export(job)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(f"exported {len(written)} bundles to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
