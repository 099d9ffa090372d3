"""Command-line entry point: ``gnv3 <command>`` or ``python -m ghostnetv3 <command>``."""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from typing import List, Optional

from threadpoolctl import threadpool_limits

from ..training.loop import deterministic_mode
from . import bench as bench_mod
from . import commands
from .config import ConfigError, apply_overrides, load_config
from .ingest import ingest_images
from .io import FormatError, load_checkpoint, load_model, read_dataset, write_dataset, write_logits


def _shape(text: str):
    try:
        dims = tuple(int(t) for t in text.lower().replace(",", "x").split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use e.g. 1x3x32x32") from None
    if len(dims) != 4 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"shape must have 4 positive dims, got {text!r}")
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gnv3", description="Re-parameterised compact CNN training toolkit.")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap (bench always uses 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    s = sub.add_parser("train", help="train a model from a recipe config")
    s.add_argument("--config", required=True, help="recipe config file")
    s.add_argument("--seed", type=int, default=None, help="override [train] seed")
    s.add_argument("--out-dir", default=None, help="override [train] output_dir")

    s = sub.add_parser("fold", help="fold every multi-branch block of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("output")

    s = sub.add_parser("verify-fold", help="compare logits of a training-form and a folded checkpoint")
    s.add_argument("reference")
    s.add_argument("candidate")
    s.add_argument("-n", "--inputs", type=int, default=16, help="number of random inputs")
    s.add_argument("--tolerance", type=float, default=commands.DEFAULT_TOLERANCE)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=None, help="input height/width")

    s = sub.add_parser("bench", help="single-threaded inference latency")
    s.add_argument("checkpoint")
    s.add_argument("--shape", type=_shape, default=None, help="input shape NxCxHxW (default 1xCx32x32)")
    s.add_argument("--runs", type=int, default=bench_mod.DEFAULT_RUNS)
    s.add_argument("--no-fold", action="store_true", help="do not also time the folded form")
    s.add_argument("--csv", default=None, help="write machine-readable results here")

    s = sub.add_parser("eval", help="top-1 / top-5 accuracy on a desk dataset")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--save-logits", default=None, help="write logits as a teacher-logit file")

    s = sub.add_parser("ingest", help="pack a directory of class folders into a desk dataset")
    s.add_argument("directory")
    s.add_argument("output")
    s.add_argument("--size", type=int, default=32)

    s = sub.add_parser("synth", help="generate the procedural 10-class desk dataset")
    s.add_argument("output")
    s.add_argument("--samples", type=int, default=6000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=32)
    return p


def _train(a) -> int:
    cfg = apply_overrides(load_config(a.config), seed=a.seed)
    res = commands.run_train(cfg, a.out_dir)
    last = res.state.metrics[-1]
    print(f"trained {cfg.train.epochs} epochs: train_loss={last['train_loss']:.4f} "
          f"val_top1_raw={last['val_top1_raw']:.2f} val_top1_ema={last['val_top1_ema']:.2f}")
    print(f"checkpoint: {res.checkpoint}\nmetrics: {res.metrics}")
    return 0


def _fold(a) -> int:
    before = load_checkpoint(a.checkpoint)
    ck = commands.run_fold(a.checkpoint, a.output)
    n_before = sum(t.size for k, t in before.tensors.items() if "running_" not in k)
    n_after = sum(t.size for t in ck.tensors.values())
    print(f"folded {a.checkpoint} -> {a.output}: params {n_before} -> {n_after}")
    return 0


def _verify(a) -> int:
    ref, cand = load_model(a.reference), load_model(a.candidate)
    rep = commands.verify_fold(ref, cand, a.inputs, a.tolerance, a.seed, a.size)
    print(rep.text())
    return 0 if rep.passed else 1


def _bench(a) -> int:
    ck = load_checkpoint(a.checkpoint)
    shape = a.shape or (1, ck.spec.in_channels, 32, 32)
    results = commands.run_bench(a.checkpoint, shape, a.runs, compare_folded=not a.no_fold)
    text = bench_mod.to_csv(results)
    print(bench_mod.header(shape, a.runs))
    print(bench_mod.to_table(results))
    if a.csv:
        with open(a.csv, "w", newline="") as f:
            f.write(bench_mod.header(shape, a.runs) + "\n" + text)
    else:
        print()
        print(text, end="")
    return 0


def _eval(a) -> int:
    top1, top5, logits = commands.run_eval(load_model(a.checkpoint), read_dataset(a.dataset))
    print(f"top1={top1:.2f} top5={top5:.2f} samples={len(logits)}")
    if a.save_logits:
        write_logits(a.save_logits, logits)
    return 0


def _ingest(a) -> int:
    ds, classes = ingest_images(a.directory, a.size)
    write_dataset(a.output, ds)
    print(f"wrote {a.output}: samples={len(ds)} classes={len(classes)} shape={'x'.join(map(str, ds.shape))}")
    return 0


def _synth(a) -> int:
    ds = commands.synth_dataset(a.samples, a.seed, a.size)
    write_dataset(a.output, ds)
    print(f"wrote {a.output}: samples={len(ds)} classes={ds.num_classes}")
    return 0


HANDLERS = {"train": _train, "fold": _fold, "verify-fold": _verify, "bench": _bench, "eval": _eval,
            "ingest": _ingest, "synth": _synth}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    threads = 1 if deterministic_mode() else a.threads
    limit = threadpool_limits(limits=threads) if threads else contextlib.nullcontext()
    try:
        with limit:
            return HANDLERS[a.command](a)
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as e:
        print(f"gnv3 {a.command}: error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
