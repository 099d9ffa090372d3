"""Programmatic versions of the CLI subcommands."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..ghostnet import Model, build_model, count_params, fold_model
from ..training import ImageSet, TrainState, train_loop
from ..training.loop import METRIC_FIELDS, steps_per_epoch
from . import synth
from .bench import BenchResult, time_model
from .config import ConfigError, RunConfig
from .io import (
    DeskDataset,
    Checkpoint,
    fingerprint,
    fold_checkpoint,
    load_checkpoint,
    load_model,
    read_dataset,
    read_logits,
    save_checkpoint,
    write_checkpoint,
)

DEFAULT_TOLERANCE = 1e-3


def default_input_hw(model: Model) -> int:
    return 224 if model.spec.name == "full" else 32


# ---------------------------------------------------------------------------
# data


def synth_dataset(n: int, seed: int = 0, size: int = 32) -> DeskDataset:
    x, y = synth.make_dataset(n, seed=seed, size=size)
    return DeskDataset.from_arrays(x, y, synth.NUM_CLASSES)


def load_data(cfg: RunConfig) -> Tuple[DeskDataset, Optional[DeskDataset]]:
    """Training and (optional) validation sets; validation reuses the training stats."""
    d = cfg.data
    if d.synth_samples:
        full = synth_dataset(d.synth_samples + d.synth_val, d.synth_seed)
        train = full.subset(slice(0, d.synth_samples))
        train = DeskDataset.from_arrays(train.pixels, train.labels, train.num_classes)
        val = full.subset(slice(d.synth_samples, None)) if d.synth_val else None
    else:
        if not d.train:
            raise ConfigError("[data] needs either train = <file.gds> or synth_samples = N")
        train = read_dataset(cfg.resolve(d.train))
        val = read_dataset(cfg.resolve(d.val)) if d.val else None
        if val is None and d.val_fraction > 0:
            n_val = int(round(len(train) * d.val_fraction))
            val = train.subset(slice(len(train) - n_val, None))
            train = train.subset(slice(0, len(train) - n_val))
    if val is not None:
        if val.shape != train.shape or val.num_classes != train.num_classes:
            raise ConfigError("validation set shape or class count differs from the training set")
        val = DeskDataset(val.pixels, val.labels, val.num_classes, train.mean, train.std)
    return train, val


# ---------------------------------------------------------------------------
# train


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([r["epoch"]] + [repr(float(r[k])) for k in METRIC_FIELDS[1:]])
    return buf.getvalue()


def _teacher(cfg: RunConfig, n_train: int):
    kd = cfg.kd
    if kd.alpha == 0 or kd.teacher == "none":
        if kd.alpha > 0:
            raise ConfigError("[kd] alpha > 0 needs teacher = model or file")
        return None
    if not kd.teacher_path:
        raise ConfigError("[kd] teacher_path is required")
    path = cfg.resolve(kd.teacher_path)
    if kd.teacher == "model":
        return load_model(path, folded=True)
    logits = read_logits(path)
    if len(logits) < n_train:
        raise ConfigError(f"teacher logit file has {len(logits)} rows, training set has {n_train}")
    return logits[:n_train]


@dataclass
class TrainResult:
    state: TrainState
    checkpoint: str
    metrics: str


def run_train(cfg: RunConfig, out_dir: Optional[str] = None) -> TrainResult:
    train_ds, val_ds = load_data(cfg)
    spec = cfg.model.spec(train_ds.num_classes, train_ds.shape[0])
    model = build_model(spec, seed=cfg.train.seed)
    recipe = cfg.recipe(steps_per_epoch(len(train_ds), cfg.train.batch_size))
    teacher = _teacher(cfg, len(train_ds))
    state = train_loop(model, train_ds.to_imageset(), val_ds.to_imageset() if val_ds else None, recipe, teacher)
    out_dir = out_dir or cfg.resolve(cfg.train.output_dir)
    os.makedirs(out_dir, exist_ok=True)
    ck_path = os.path.join(out_dir, "model.gnv3")
    m_path = os.path.join(out_dir, "metrics.csv")
    save_checkpoint(ck_path, model, fingerprint(cfg.to_dict()))
    with open(m_path, "w", newline="") as f:
        f.write(metrics_csv(state.metrics))
    return TrainResult(state, ck_path, m_path)


# ---------------------------------------------------------------------------
# fold / verify


def run_fold(src: str, dst: str) -> Checkpoint:
    ck = fold_checkpoint(load_checkpoint(src))
    with open(dst, "wb") as f:
        write_checkpoint(f, ck)
    return ck


def relative_error(out: np.ndarray, ref: np.ndarray) -> float:
    """max |out - ref| / (max |ref| + 1e-6), computed in float64."""
    out, ref = np.asarray(out, np.float64), np.asarray(ref, np.float64)
    return float(np.max(np.abs(out - ref)) / (np.max(np.abs(ref)) + 1e-6))


@dataclass
class FoldReport:
    errors: List[float]
    tolerance: float
    n: int
    shape: tuple
    params_train: int
    params_folded: int

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def text(self) -> str:
        return "\n".join([
            f"# verify-fold: tolerance={self.tolerance:g} inputs={self.n} input_shape={'x'.join(map(str, self.shape))}"
            f" metric=max|a-b|/(max|b|+1e-6)",
            f"params reference={self.params_train} candidate={self.params_folded}",
            f"max_relative_error={self.max_error:.3e}",
            "PASS" if self.passed else "FAIL",
        ])


def verify_fold(reference: Model, candidate: Model, n: int = 16, tolerance: float = DEFAULT_TOLERANCE,
                seed: int = 0, hw: Optional[int] = None) -> FoldReport:
    """Compare logits of two models on ``n`` random inputs, one input at a time."""
    if reference.spec != candidate.spec:
        raise ValueError("checkpoints describe different architectures")
    hw = hw or default_input_hw(reference)
    shape = (1, reference.spec.in_channels, hw, hw)
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n):
        x = rng.standard_normal(shape).astype(np.float32)
        errs.append(relative_error(candidate.forward(x), reference.forward(x)))
    return FoldReport(errs, tolerance, n, shape, count_params(reference), count_params(candidate))


# ---------------------------------------------------------------------------
# eval / bench


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    if len(labels) == 0:
        return 0.0
    k = min(k, logits.shape[1])
    top = np.argpartition(-logits, k - 1, axis=1)[:, :k]
    return float(np.mean(np.any(top == np.asarray(labels)[:, None], axis=1)) * 100.0)


def run_eval(model: Model, data: DeskDataset, batch_size: int = 256):
    """(top-1 %, top-5 %, logits) of ``model`` on ``data``."""
    if model.spec.num_classes != data.num_classes:
        raise ValueError(f"model has {model.spec.num_classes} classes, dataset {data.num_classes}")
    m = model if model.folded else fold_model(model)
    ims = data.to_imageset()
    logits = m.predict(ims.normalize(ims.x), batch_size)
    return topk_accuracy(logits, ims.y, 1), topk_accuracy(logits, ims.y, 5), logits


def run_bench(path: str, shape: Sequence[int], runs: int, compare_folded: bool = True) -> List[BenchResult]:
    ck = load_checkpoint(path)
    model = ck.to_model()
    name = os.path.basename(path)
    out = [time_model(model, shape, runs, name=name)]
    if compare_folded and not model.folded:
        out.append(time_model(fold_model(model), shape, runs, name=name + " (folded)"))
    return out
