"""Command-line surface for batch use.

Commands: gen-synth, init-protos, fit, infer, eval, oracle, ablate.
A single JSON config file supplies defaults; flags win over the file.
The effective configuration is echoed into every output directory.

Exit codes: 0 ok, 2 config/validation, 3 I/O, 4 numerical.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import figures
from .bundle_io import FeatureBundle, read_bundle
from .errors import BundleIOError, ConfigError, NumericalError
from .masks import rle_encode, rle_to_bytes
from .metrics import (evaluate_bundles, infer_panoptic, infer_semantic,
                      merge_stuff, write_eval_report, write_histogram_csv)
from .prototypes import INIT_MODES, init_prototypes, load_bank, save_bank
from .rng import Rng
from .synthetic import SynthSpec, gen_synthetic, load_examples
from .training import AdaptConfig, fit, write_training_log

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise BundleIOError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _adapt_config(cfg: dict, args: argparse.Namespace) -> AdaptConfig:
    section = dict(cfg.get("adapt", {}))
    known = {f.name for f in dataclasses.fields(AdaptConfig)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown adapt config fields: {sorted(unknown)}")
    for flag in ("lr0", "iterations", "alpha_init", "batch_size", "seed",
                 "init_mode", "void_weight", "weight_decay"):
        value = getattr(args, flag, None)
        if value is not None:
            section[flag] = value
    if getattr(args, "alpha_fixed", False):
        section["alpha_trainable"] = False
    if "betas" in section:
        section["betas"] = tuple(section["betas"])
    return AdaptConfig(**section).validate()


def _echo_config(out_dir: str, payload: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective_config.json"), "w",
              encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _load_data(data_dir: str, split: str | None
               ) -> tuple[list[FeatureBundle], dict]:
    """Read bundles under a fixture or plain bundle-set directory."""
    fixture_path = os.path.join(data_dir, "fixture.json")
    meta: dict = {}
    if os.path.exists(fixture_path):
        with open(fixture_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        ids = None
        if split == "train":
            ids = meta.get("train_ids")
        elif split == "eval":
            ids = meta.get("eval_ids")
        elif split is not None:
            raise ConfigError(f"unknown split {split!r} (use train or eval)")
        root = os.path.join(data_dir, "bundles")
        if ids is None:
            ids = sorted(os.listdir(root))
        bundles = [read_bundle(os.path.join(root, i)) for i in ids]
        return bundles, meta
    if split is not None:
        raise ConfigError("--split requires a fixture directory "
                          "(no fixture.json found)")
    root = data_dir
    if os.path.isdir(os.path.join(data_dir, "bundles")):
        root = os.path.join(data_dir, "bundles")
    names = [n for n in sorted(os.listdir(root))
             if os.path.exists(os.path.join(root, n, "manifest.json"))]
    if not names:
        raise BundleIOError(f"no bundles under {root}")
    return [read_bundle(os.path.join(root, n)) for n in names], meta


def _load_fixture_examples(data_dir: str, bundles: list[FeatureBundle]):
    return load_examples(data_dir, bundles[0].H, bundles[0].W)


# --- commands ---------------------------------------------------------------

def cmd_gen_synth(args: argparse.Namespace) -> int:
    cfg = _load_config(args.spec)
    section = cfg.get("synth", cfg)  # allow either a full config or bare spec
    spec = SynthSpec.from_dict(section)
    gen_synthetic(spec, args.out)
    _echo_config(args.out, {"synth": dataclasses.asdict(spec)})
    print(f"fixture written to {args.out}")
    return EXIT_OK


def cmd_init_protos(args: argparse.Namespace) -> int:
    bundles, _ = _load_data(args.data, args.split)
    examples = _load_fixture_examples(args.data, bundles)
    mode = args.init_mode or "combined"
    bank = init_prototypes(bundles, examples, mode, bundles[0].C,
                           Rng(args.seed if args.seed is not None else 0))
    save_bank(bank, args.out)
    _echo_config(args.out, {"init_mode": mode, "seed": args.seed or 0})
    print(f"bank written to {args.out}")
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    adapt = _adapt_config(cfg, args)
    split = args.split
    if split is None and _has_fixture(args.data):
        split = "train"
    bundles, _ = _load_data(args.data, split)
    examples = _load_fixture_examples(args.data, bundles)
    bank, state = fit(bundles, examples, adapt, dry_run=args.dry_run)
    os.makedirs(args.out, exist_ok=True)
    save_bank(bank, args.out)
    _echo_config(args.out, {"adapt": dataclasses.asdict(adapt),
                            "dry_run": args.dry_run})
    if not args.dry_run:
        write_training_log(state, os.path.join(args.out, "training_log.jsonl"))
        figures.save_training_curves(
            state.loss_history, state.alpha_history,
            os.path.join(args.out, "training_curves.png"))
    print(f"bank written to {args.out} "
          f"(final alpha {bank.alpha:.4f}, steps {state.step})")
    return EXIT_OK


def _eval_thresholds(cfg: dict, args: argparse.Namespace) -> tuple[float, float]:
    section = dict(cfg.get("eval", {}))
    score = getattr(args, "score_thresh", None)
    overlap = getattr(args, "overlap_thresh", None)
    return (score if score is not None else float(section.get("score_thresh", 0.8)),
            overlap if overlap is not None else float(section.get("overlap_thresh", 0.8)))


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    score_thresh, overlap_thresh = _eval_thresholds(cfg, args)
    bundles, _ = _load_data(args.data, args.split)
    bank = load_bank(args.bank)
    os.makedirs(args.out, exist_ok=True)
    for bundle in bundles:
        img_dir = os.path.join(args.out, bundle.image_id)
        os.makedirs(img_dir, exist_ok=True)
        sem = infer_semantic(bundle, bank)
        if bundle.C > 255:
            raise ConfigError("semantic index map stores class ids as bytes")
        with open(os.path.join(img_dir, "semantic.bin"), "wb") as fh:
            fh.write(sem.astype(np.uint8).tobytes())
        segs = merge_stuff(infer_panoptic(bundle, bank, score_thresh,
                                          overlap_thresh),
                           bundle.stuff_class_ids)
        listing = []
        for i, seg in enumerate(segs):
            fname = f"seg_{i:03d}.rle"
            with open(os.path.join(img_dir, fname), "wb") as fh:
                fh.write(rle_to_bytes(rle_encode(seg.mask)))
            listing.append({"class_id": seg.class_id, "score": seg.score,
                            "rle_file": fname})
        with open(os.path.join(img_dir, "panoptic.json"), "w",
                  encoding="utf-8") as fh:
            json.dump({"H": bundle.H, "W": bundle.W, "segments": listing},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
    _echo_config(args.out, {"bank": args.bank, "score_thresh": score_thresh,
                            "overlap_thresh": overlap_thresh})
    print(f"wrote outputs for {len(bundles)} images to {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    score_thresh, overlap_thresh = _eval_thresholds(cfg, args)
    bundles, _ = _load_data(args.data, _default_split(args))
    bank = load_bank(args.bank)
    report = evaluate_bundles(bundles, bank, score_thresh, overlap_thresh)
    os.makedirs(args.out, exist_ok=True)
    write_eval_report(report, os.path.join(args.out, "eval.json"))
    write_histogram_csv(report.iou_histogram,
                        os.path.join(args.out, "iou_histogram.csv"))
    figures.save_iou_histogram(report.iou_histogram,
                               os.path.join(args.out, "iou_histogram.png"))
    _echo_config(args.out, {"bank": args.bank, "score_thresh": score_thresh,
                            "overlap_thresh": overlap_thresh})
    print(f"miou {report.miou:.4f}  pq {report.pq:.4f}  "
          f"ap50 {report.ap50:.4f}")
    return EXIT_OK


def _has_fixture(data_dir: str) -> bool:
    return os.path.exists(os.path.join(data_dir, "fixture.json"))


def _default_split(args: argparse.Namespace) -> str | None:
    """Evaluation commands default to the eval split on fixtures."""
    if args.split is not None:
        return args.split
    return "eval" if _has_fixture(args.data) else None


def cmd_oracle(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    score_thresh, overlap_thresh = _eval_thresholds(cfg, args)
    bundles, _ = _load_data(args.data, _default_split(args))
    bank = load_bank(args.bank)
    raw = evaluate_bundles(bundles, bank, score_thresh, overlap_thresh)
    orc = evaluate_bundles(bundles, bank, score_thresh, overlap_thresh,
                           oracle=True)
    os.makedirs(args.out, exist_ok=True)
    payload = {"raw": raw.to_dict(), "oracle": orc.to_dict()}
    with open(os.path.join(args.out, "oracle_eval.json"), "w",
              encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_histogram_csv(raw.iou_histogram,
                        os.path.join(args.out, "iou_histogram.csv"))
    figures.save_iou_histogram(raw.iou_histogram,
                               os.path.join(args.out, "iou_histogram.png"))
    figures.save_metric_bars(
        {"raw": {"miou": raw.miou, "pq": raw.pq},
         "oracle": {"miou": orc.miou, "pq": orc.pq}},
        os.path.join(args.out, "oracle_gap.png"),
        title="classification oracle gap")
    _echo_config(args.out, {"bank": args.bank})
    print(f"raw miou {raw.miou:.4f}  oracle miou {orc.miou:.4f}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    adapt = _adapt_config(cfg, args)
    score_thresh, overlap_thresh = _eval_thresholds(cfg, args)
    train_bundles, meta = _load_data(args.data, "train")
    eval_bundles, _ = _load_data(args.data, "eval")
    examples = _load_fixture_examples(args.data, train_bundles)

    modes = args.modes.split(",") if args.modes else \
        ["combined", "queries_only", "pooling_only", "random"]
    for mode in modes:
        if mode not in INIT_MODES:
            raise ConfigError(f"unknown init mode {mode!r}")
    if "class_embedding" in modes and \
            all(b.class_embeds is None for b in train_bundles):
        modes = [m for m in modes if m != "class_embedding"]
        print("skipping class_embedding: bundles carry no class embeddings")

    rows = []
    for mode in modes:
        for trainable in (True, False):
            run_cfg = dataclasses.replace(adapt, init_mode=mode,
                                          alpha_trainable=trainable)
            bank, state = fit(train_bundles, examples, run_cfg)
            report = evaluate_bundles(eval_bundles, bank, score_thresh,
                                      overlap_thresh)
            rows.append({
                "init_mode": mode,
                "alpha_trainable": trainable,
                "alpha_init": run_cfg.alpha_init,
                "alpha_final": bank.alpha,
                "miou": report.miou,
                "pq": report.pq,
                "ap50": report.ap50,
                "query_accuracy": report.query_accuracy,
            })

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "ablate.csv")
    cols = ["init_mode", "alpha_trainable", "alpha_init", "alpha_final",
            "miou", "pq", "ap50", "query_accuracy"]
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in cols) + "\n")
    figures.save_metric_bars(
        {f"{r['init_mode']}{'+a' if r['alpha_trainable'] else ''}":
         {"miou": r["miou"], "pq": r["pq"]} for r in rows},
        os.path.join(args.out, "ablation.png"),
        title="prototype init ablation")
    _echo_config(args.out, {"adapt": dataclasses.asdict(adapt),
                            "modes": modes})
    print(f"wrote {csv_path} ({len(rows)} rows)")
    return EXIT_OK


# --- argument plumbing ------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, bank: bool = False) -> None:
    p.add_argument("--data", required=True, help="fixture or bundle-set directory")
    p.add_argument("--split", default=None, help="train or eval (fixtures only)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON config file")
    if bank:
        p.add_argument("--bank", required=True, help="directory with bank.json")


def _add_adapt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr0", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--alpha-init", dest="alpha_init", type=float, default=None)
    p.add_argument("--alpha-fixed", dest="alpha_fixed", action="store_true")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)
    p.add_argument("--void-weight", dest="void_weight", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--init-mode", dest="init_mode", default=None,
                   choices=INIT_MODES)


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--score-thresh", dest="score_thresh", type=float, default=None)
    p.add_argument("--overlap-thresh", dest="overlap_thresh", type=float,
                   default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoadapt",
        description="Few-shot prototype adaptation over exported "
                    "segmentation tensors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic fixture")
    p.add_argument("--spec", required=True, help="JSON spec file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("init-protos", help="build a prototype bank")
    _add_common(p)
    p.add_argument("--init-mode", dest="init_mode", default=None,
                   choices=INIT_MODES)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_init_protos)

    p = sub.add_parser("fit", help="adapt prototypes on the training split")
    _add_common(p)
    _add_adapt_flags(p)
    p.add_argument("--dry-run", dest="dry_run", action="store_true",
                   help="write the freshly initialized bank without training")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("infer", help="write per-image segmentation outputs")
    _add_common(p, bank=True)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a bank on a bundle set")
    _add_common(p, bank=True)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("oracle", help="paired raw-vs-oracle evaluation")
    _add_common(p, bank=True)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("ablate", help="sweep init modes and alpha settings")
    _add_common(p)
    _add_adapt_flags(p)
    _add_eval_flags(p)
    p.add_argument("--modes", default=None,
                   help="comma-separated init modes to sweep")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BundleIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
