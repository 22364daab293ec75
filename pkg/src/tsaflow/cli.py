"""Command-line entry points.

Subcommands: gen (synthesize a dataset), train, eval, dump-attn
(visualize one attention row), ablate (train and evaluate the four-row
flag grid). Training options come from an optional JSON config file
mirroring TrainConfig; any flag given on the command line overrides the
file. Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np

from . import tensor as tt
from .attention import dump_attention
from .dataio import read_dataset, write_dataset
from .errors import TsaflowError
from .harness import TrainConfig, ablate, evaluate, load_model, train, train_config_from_dict
from .metrics import downsample_occ_gt
from .report import render_attention_heatmap, render_training_curves
from .scenegen import SceneConfig, generate_dataset


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1 with help text."""

    def error(self, message):
        raise _UsageError(f"{self.format_usage()}error: {message}")


def _add_gen(sub):
    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64, help="square image size in pixels")
    p.add_argument("--height", type=int, default=None, help="override height")
    p.add_argument("--width", type=int, default=None, help="override width")
    p.add_argument("--sprite-count", type=int, nargs=2, metavar=("LO", "HI"), default=(2, 4))
    p.add_argument("--sprite-size", type=int, nargs=2, metavar=("LO", "HI"), default=(16, 32))
    p.add_argument("--shift", type=int, default=12, help="max per-sprite translation, pixels")
    p.add_argument("--bg-shift", type=int, default=4, help="max background translation, pixels")
    p.add_argument("--align", type=int, default=1, help="snap sprite rects and motions to this grid")
    p.add_argument("--smoothing", type=int, default=2, help="noise blur passes")


def _add_train_flags(p, require_dataset: bool):
    p.add_argument("--config", default=None, help="JSON file mirroring the training config")
    p.add_argument("--progress", action="store_true", help="print step progress")
    covered = {"train_dataset", "eval_dataset"}
    for f in fields(TrainConfig):
        if f.name in covered:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            p.add_argument(flag, action=argparse.BooleanOptionalAction, default=None, dest=f.name)
        elif isinstance(f.default, int):
            p.add_argument(flag, type=int, default=None, dest=f.name)
        elif isinstance(f.default, float):
            p.add_argument(flag, type=float, default=None, dest=f.name)
        else:
            p.add_argument(flag, type=str, default=None, dest=f.name)
    p.add_argument("--dataset", required=require_dataset, help="training dataset path")


def _add_train(sub):
    p = sub.add_parser("train", help="train one model")
    _add_train_flags(p, require_dataset=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="per-step loss CSV path")
    p.add_argument("--curves", default=None, help="training-curve PNG path")


def _add_eval(sub):
    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--tag", default="eval", help="output file name prefix")


def _add_dump(sub):
    p = sub.add_parser("dump-attn", help="dump one attention row as PGM + CSV + PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--image", type=int, required=True, help="image index in the dataset")
    p.add_argument("--query", required=True, help="query cell as x,y")
    p.add_argument("--out", required=True, help="output path prefix")


def _add_ablate(sub):
    p = sub.add_parser("ablate", help="train and compare the four-row flag grid")
    _add_train_flags(p, require_dataset=True)
    p.add_argument("--eval-dataset", required=True)
    p.add_argument("--out-dir", required=True)


def _build_train_config(args) -> TrainConfig:
    base: dict = {}
    if args.config is not None:
        with open(args.config) as fh:
            base = json.load(fh)
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    base.pop("train_dataset", None)
    base.pop("eval_dataset", None)
    return train_config_from_dict(base)


def _require_file(path, what: str):
    if not os.path.exists(path):
        raise _UsageError(f"error: {what} not found: {path}")


def _cmd_gen(args) -> int:
    h = args.height if args.height is not None else args.size
    w = args.width if args.width is not None else args.size
    cfg = SceneConfig(
        height=h,
        width=w,
        sprite_count=tuple(args.sprite_count),
        sprite_size=tuple(args.sprite_size),
        sprite_shift=args.shift,
        background_shift=args.bg_shift,
        smoothing=args.smoothing,
        align=args.align,
        seed=args.seed,
    )
    samples = generate_dataset(cfg, args.count, seed=args.seed)
    write_dataset(args.out, samples)
    print(f"wrote {len(samples)} scenes ({h}x{w}) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    _require_file(args.dataset, "dataset")
    cfg = _build_train_config(args)
    samples = read_dataset(args.dataset)
    result = train(cfg, samples, checkpoint_path=args.out, log_path=args.log, progress=args.progress)
    if args.curves and result.log_rows:
        render_training_curves(args.curves, result.log_rows)
    final = result.log_rows[-1]["loss"] if result.log_rows else float("nan")
    print(f"trained {result.step} steps, final loss {final:.6f}, checkpoint {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    _require_file(args.ckpt, "checkpoint")
    _require_file(args.dataset, "dataset")
    model, _, _ = load_model(args.ckpt)
    samples = read_dataset(args.dataset)
    _, summary = evaluate(model, samples, out_dir=args.out_dir, tag=args.tag)
    for k in ("moa_occ", "mrd_noc", "mma_noc", "aepe_all", "aepe_occ"):
        if summary.get(k) is not None:
            print(f"{k}: {summary[k]:.6f}")
    print(f"reports under {args.out_dir}")
    return 0


def _cmd_dump_attn(args) -> int:
    _require_file(args.ckpt, "checkpoint")
    _require_file(args.dataset, "dataset")
    try:
        qx, qy = (int(v) for v in args.query.split(","))
    except ValueError:
        raise _UsageError(f"error: --query wants x,y integers, got {args.query!r}")
    model, _, _ = load_model(args.ckpt)
    samples = read_dataset(args.dataset)
    if not (0 <= args.image < len(samples)):
        raise _UsageError(f"error: --image {args.image} outside dataset of {len(samples)}")
    s = samples[args.image]
    with tt.no_grad():
        res = model.forward(s.frame0, s.frame1)
    h8, w8 = res.match.flow.shape[1:]
    if not (0 <= qx < w8 and 0 <= qy < h8):
        raise _UsageError(f"error: query cell {qx},{qy} outside {w8}x{h8} grid")
    pgm, csvp = dump_attention(args.out, res.m.data, (qx, qy), h8, w8)
    row = res.m.data[qy * w8 + qx].reshape(h8, w8)
    png = render_attention_heatmap(str(args.out) + ".png", row, (qx, qy))
    cells = downsample_occ_gt(s.occ_gt)
    kind = "occluded" if cells.occ[qy, qx] else ("non-occluded" if cells.non_occ[qy, qx] else "unconfirmed")
    print(f"query cell ({qx},{qy}) is {kind}; wrote {pgm}, {csvp}, {png}")
    return 0


def _cmd_ablate(args) -> int:
    _require_file(args.dataset, "dataset")
    _require_file(args.eval_dataset, "eval dataset")
    cfg = _build_train_config(args)
    train_samples = read_dataset(args.dataset)
    eval_samples = read_dataset(args.eval_dataset)
    results = ablate(cfg, train_samples, eval_samples, out_dir=args.out_dir, progress=args.progress)
    for name, summary in results.items():
        moa_occ = summary.get("moa_occ")
        aepe = summary.get("aepe_all")
        print(f"{name}: moa_occ={moa_occ if moa_occ is None else round(moa_occ, 4)} "
              f"aepe_all={aepe if aepe is None else round(aepe, 4)}")
    print(f"summary under {args.out_dir}")
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "dump-attn": _cmd_dump_attn,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _Parser(prog="tsaflow", description="occlusion-aware optical flow on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_dump(sub)
    _add_ablate(sub)
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TsaflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
