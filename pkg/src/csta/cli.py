"""Command-line entry point: ``csta <command> ...``.

Exit codes: 0 success, 1 internal error or diverged training, 2 bad usage or
bad input. Every command writes a JSON run manifest next to its outputs.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
import time
from typing import Sequence

import numpy as np

from . import __version__
from .attention import AttentionMode, attention_csv
from .config import ConfigError, build_configs, format_config, load_config, resolve
from .data import Dataset, ParseError, ValidationError, load_dataset, ntu_dataset, parse_canonical_json, uniform_select, write_canonical_json
from .io import atomic_write_bytes, atomic_write_text
from .model import CheckpointError, attention_maps, load_checkpoint, save_checkpoint
from .tensor import ContractError, DimensionError
from .train import (
    DivergedTrainingError,
    ablation_csv,
    ablation_suite,
    confusion_csv,
    evaluate,
    history_csv,
    train,
)
from .viz import heatmap_svg

log = logging.getLogger("csta")


class UsageError(Exception):
    """Bad user input; maps to exit code 2."""


USER_ERRORS = (UsageError, ParseError, ValidationError, ConfigError, CheckpointError, ContractError, DimensionError, FileNotFoundError, IsADirectoryError)


def _write_manifest(path: str, command: str, args: argparse.Namespace, config: dict | None, outputs: list[str], started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed") if config else None,
        "inputs": {k: v for k, v in vars(args).items() if k not in ("func", "command") and v is not None},
        "outputs": outputs,
        "version": __version__,
        "duration_s": round(time.time() - started, 3),
    }
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _run_config(args: argparse.Namespace) -> dict:
    cfg = load_config(getattr(args, "config", None))
    overrides = {}
    for key in ("seed", "epochs", "mode", "protocol"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return resolve({**cfg, **overrides})


def _split(ds: Dataset, split: str, protocol: str) -> Dataset:
    protocol = protocol or ds.default_protocol()
    if protocol and protocol not in ds.splits:
        raise UsageError(f"dataset has no split protocol {protocol!r}; available: {sorted(ds.splits)}")
    try:
        return ds.subset(split, protocol or None)
    except KeyError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    started = time.time()
    if args.format == "canonical":
        with open(args.input, encoding="utf-8") as fh:
            try:
                ds = parse_canonical_json(fh.read())
            except ValidationError as exc:
                raise ValidationError(exc.path, f"{args.input}: {exc}") from None
    else:
        if os.path.isdir(args.input):
            paths = sorted(glob.glob(os.path.join(args.input, "*.skeleton")))
            if not paths:
                raise UsageError(f"no .skeleton files in {args.input}")
        else:
            paths = [args.input]
        ds = ntu_dataset(paths)
    atomic_write_text(args.output, write_canonical_json(ds))
    print(f"{len(ds)} samples, {ds.num_classes} classes -> {args.output}")
    _write_manifest(args.output + ".manifest.json", "ingest", args, None, [args.output], started)
    return 0


def cmd_train(args) -> int:
    started = time.time()
    cfg = _run_config(args)
    ds = load_dataset(args.data)
    train_set = _split(ds, "train", cfg["protocol"])
    model_cfg, train_cfg = build_configs(cfg, ds.num_classes)
    params, history = train(train_set, model_cfg, train_cfg)
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint.bin")
    hist = os.path.join(args.out, "history.csv")
    save_checkpoint(ckpt, params, {"classes": ds.class_names})
    atomic_write_text(hist, history_csv(history))
    atomic_write_text(os.path.join(args.out, "config.txt"), format_config(cfg))
    _write_manifest(os.path.join(args.out, "manifest.json"), "train", args, cfg, [ckpt, hist], started)
    last = history[-1]
    print(f"trained {len(history)} epochs: loss {last.loss:.6g}, train accuracy {last.accuracy:.4f}")
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    ds = load_dataset(args.data)
    params, extra = load_checkpoint(args.checkpoint)
    if params.config.num_classes != ds.num_classes:
        raise UsageError(
            f"checkpoint has {params.config.num_classes} classes but {args.data} declares {ds.num_classes}"
        )
    subset = _split(ds, args.split, args.protocol or "")
    if len(subset) == 0:
        raise UsageError(f"split {args.split!r} is empty")
    report = evaluate(subset, params)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    rpath = os.path.join(out, f"eval_{args.split}.json")
    cpath = os.path.join(out, f"confusion_{args.split}.csv")
    doc = report.to_dict(ds.class_names)
    atomic_write_text(rpath, json.dumps(doc, indent=2) + "\n")
    atomic_write_text(cpath, confusion_csv(report, ds.class_names))
    _write_manifest(os.path.join(out, f"eval_{args.split}.manifest.json"), "eval", args, None, [rpath, cpath], started)
    print(json.dumps({"accuracy": report.accuracy, "count": report.count}))
    return 0


def cmd_ablate(args) -> int:
    started = time.time()
    cfg = _run_config(args)
    ds = load_dataset(args.data)
    train_set = _split(ds, "train", cfg["protocol"])
    test_set = _split(ds, "test", cfg["protocol"]) if ds.splits else train_set
    model_cfg, train_cfg = build_configs(cfg, ds.num_classes)
    rows = ablation_suite(train_set, test_set, model_cfg, train_cfg)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for mode, row in rows.items():
        if row.params is None:
            continue
        sub = os.path.join(args.out, mode)
        os.makedirs(sub, exist_ok=True)
        save_checkpoint(os.path.join(sub, "checkpoint.bin"), row.params, {"classes": ds.class_names})
        atomic_write_text(os.path.join(sub, "history.csv"), history_csv(row.history))
        outputs += [os.path.join(sub, "checkpoint.bin"), os.path.join(sub, "history.csv")]
    table = os.path.join(args.out, "ablation.csv")
    atomic_write_text(table, ablation_csv(rows))
    outputs.insert(0, table)
    _write_manifest(os.path.join(args.out, "manifest.json"), "ablate", args, cfg, outputs, started)
    for mode, row in rows.items():
        acc = f"{row.report.accuracy:.4f}" if row.report else f"error: {row.error}"
        print(f"{mode:>10}  {acc}")
    return 1 if any(r.error for r in rows.values()) else 0


def cmd_visualize_attention(args) -> int:
    started = time.time()
    ds = load_dataset(args.data)
    params, _ = load_checkpoint(args.checkpoint)
    if not 0 <= args.sample < len(ds):
        raise UsageError(f"sample index {args.sample} out of range [0, {len(ds)})")
    sample = uniform_select(ds.samples[args.sample], params.config.frames)
    out = attention_maps(sample, params)[args.stream]
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "attention.csv")
    svg_path = os.path.join(args.out, "attention.svg")
    json_path = os.path.join(args.out, "joint_weights.json")
    atomic_write_text(csv_path, attention_csv(out))
    atomic_write_text(svg_path, heatmap_svg(out.map.data, f"sample {args.sample}, {args.stream} stream"))
    s = out.s_att.data
    # stable sort keeps equal weights in joint order
    ranked = [{"joint": int(j), "s_weight": float(s[j])} for j in np.argsort(-s, kind="stable")]
    atomic_write_text(json_path, json.dumps(ranked, indent=2) + "\n")
    _write_manifest(os.path.join(args.out, "manifest.json"), "visualize-attention", args, None, [csv_path, svg_path, json_path], started)
    print(f"top joint {ranked[0]['joint']} (s={ranked[0]['s_weight']:.4f}) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _u64(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csta",
        description="Skeleton action recognition with coupled spatial-temporal attention.",
        epilog="exit codes: 0 success, 1 internal error or diverged training, 2 bad usage or input",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    modes = [m.value for m in AttentionMode]

    p = sub.add_parser("ingest", help="convert NTU .skeleton files or canonical JSON to canonical JSON")
    p.add_argument("--input", required=True, help="file or directory of .skeleton files")
    p.add_argument("--format", required=True, choices=["ntu", "canonical"])
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_ingest)

    for name, func, help_ in (("train", cmd_train, "train a model"), ("ablate", cmd_ablate, "train and compare all four attention modes")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", required=True)
        p.add_argument("--config")
        p.add_argument("--seed", type=_u64)
        p.add_argument("--out", required=True)
        p.add_argument("--epochs", type=_positive_int)
        p.add_argument("--protocol")
        if name == "train":
            p.add_argument("--mode", choices=modes)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True, choices=["train", "test"])
    p.add_argument("--protocol")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize-attention", help="export attention weights for one sample")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True, type=int)
    p.add_argument("--stream", choices=["pos", "mot"], default="pos")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize_attention)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergedTrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - last-resort guard
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
