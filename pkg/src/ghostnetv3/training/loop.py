"""Desk-scale training loop composing losses, optimizer, schedule, EMA and augmentation.

Randomness comes from three independent streams derived from the run seed:
model initialisation (owned by the caller), epoch shuffling, and per-batch
augmentation. Each batch's augmentation generator is keyed on
``(seed, epoch, batch)``, so results do not depend on how many worker threads
prepare batches.
"""
from __future__ import annotations

import copy
import logging
import os
import queue
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Optional, Union

import numpy as np

from ..ghostnet import Model, fold_model
from ..tensor import DTYPE
from .augment import AugmentConfig, mix_batch, rand_transforms, random_erasing
from .ema import EMAState, ema_update
from .losses import KDConfig, cross_entropy, cross_entropy_grad, kd_loss, kd_loss_grad, total_loss
from .optim import Moments, OptimizerConfig, optimizer_step
from .schedule import ScheduleConfig, lr_at

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "lr", "train_loss", "val_top1_raw", "val_top1_ema")


class TrainingDiverged(FloatingPointError):
    """Raised when the training loss stops being finite."""


@dataclass
class ImageSet:
    """Images in [0, 1] (n, c, h, w) with integer labels and per-channel normalisation stats."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    mean: np.ndarray = None
    std: np.ndarray = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=DTYPE)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 4 or len(self.x) != len(self.y):
            raise ValueError(f"expected (n, c, h, w) images and n labels, got {self.x.shape} / {self.y.shape}")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels out of range")
        c = self.x.shape[1]
        self.mean = np.zeros(c, DTYPE) if self.mean is None else np.asarray(self.mean, DTYPE)
        self.std = np.ones(c, DTYPE) if self.std is None else np.asarray(self.std, DTYPE)

    def __len__(self):
        return len(self.y)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean[:, None, None]) / self.std[:, None, None]).astype(DTYPE)


@dataclass
class Recipe:
    kd: KDConfig = field(default_factory=KDConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ema_decay: float = 0.9999
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    workers: int = 0
    eval_batch: int = 256

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")


@dataclass
class TrainState:
    model: Model
    ema: EMAState
    moments: Moments
    step: int = 0
    epoch: int = 0
    metrics: List[Dict[str, float]] = field(default_factory=list)


def steps_per_epoch(n: int, batch_size: int) -> int:
    # the ragged tail is dropped so every batch-norm step sees a full batch
    return max(1, n // batch_size)


def deterministic_mode() -> bool:
    return os.environ.get("GNV3_DETERMINISTIC", "") not in ("", "0")


def top1(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels) * 100.0)


def evaluate(model: Model, data: ImageSet, batch_size: int = 256) -> float:
    """Top-1 accuracy (percent) of ``model`` in inference mode."""
    m = model if model.folded else fold_model(model)
    return top1(m.predict(data.normalize(data.x), batch_size), data.y)


# ---------------------------------------------------------------------------
# batches


def _make_batch(data: ImageSet, idx: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    x = data.x[idx]
    if cfg.rand_transforms:
        x = np.stack([rand_transforms(img, rng, cfg.num_ops) for img in x])
    if cfg.erasing:
        x = random_erasing(x, rng, cfg)
    x, soft, _, _ = mix_batch(x, data.y[idx], rng, cfg, data.num_classes)
    return data.normalize(x), soft, idx


def _batch_plan(n: int, recipe: Recipe, epoch: int) -> List[np.ndarray]:
    perm = np.random.default_rng([recipe.seed, 0, epoch]).permutation(n)
    bs = min(recipe.batch_size, n)
    return [perm[i * bs:(i + 1) * bs] for i in range(steps_per_epoch(n, bs))]


def iter_batches(data: ImageSet, recipe: Recipe, epoch: int, workers: int = 0) -> Iterator[tuple]:
    """Yield ``(x_normalized, soft_targets, indices)`` for one epoch, in a fixed order.

    With ``workers > 0`` batches are prepared on background threads and handed
    over through a bounded queue; the output is identical to the inline path.
    """
    plan = _batch_plan(len(data), recipe, epoch)

    def build(b):
        return _make_batch(data, plan[b], recipe.augment, np.random.default_rng([recipe.seed, 1, epoch, b]))

    if workers <= 0:
        for b in range(len(plan)):
            yield build(b)
        return

    slots: Dict[int, tuple] = {}
    cond = threading.Condition()
    todo: "queue.Queue[int]" = queue.Queue()
    for b in range(len(plan)):
        todo.put(b)
    limit = 2 * workers + 1     # bound on batches held in memory
    next_out = [0]
    stop = threading.Event()

    def worker():
        while not stop.is_set():
            try:
                b = todo.get_nowait()
            except queue.Empty:
                return
            with cond:
                cond.wait_for(lambda: b < next_out[0] + limit or stop.is_set())
            if stop.is_set():
                return
            try:
                item = build(b)
            except BaseException as e:  # surface in the consumer
                item = e
            with cond:
                slots[b] = item
                cond.notify_all()

    threads = [threading.Thread(target=worker, daemon=True) for _ in range(workers)]
    for t in threads:
        t.start()
    try:
        for b in range(len(plan)):
            with cond:
                cond.wait_for(lambda: b in slots)
                item = slots.pop(b)
                next_out[0] = b + 1
                cond.notify_all()
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        with cond:
            cond.notify_all()
        for t in threads:
            t.join()


# ---------------------------------------------------------------------------
# loop

Teacher = Union[Model, np.ndarray, None]


def _teacher_logits(teacher: Teacher, x: np.ndarray, idx: np.ndarray, batch: int) -> np.ndarray:
    if isinstance(teacher, np.ndarray):
        return teacher[idx]
    return teacher.predict(x, batch)


def _weights(model) -> Dict[str, np.ndarray]:
    out = dict(model.named_parameters())
    out.update(model.named_buffers())
    return out


def init_state(model, recipe: Recipe) -> TrainState:
    """Fresh optimiser and EMA state for any :class:`~ghostnetv3.nn.Layer`."""
    return TrainState(model, EMAState.from_weights(_weights(model), recipe.ema_decay), Moments())


def train_step(state: TrainState, x: np.ndarray, soft: np.ndarray, lr: float, recipe: Recipe,
               teacher_logits: Optional[np.ndarray] = None) -> float:
    """One optimisation step; returns the blended loss."""
    model = state.model
    logits = model.forward(x, train=True)
    alpha = recipe.kd.alpha
    ce = cross_entropy(logits, soft)
    d = cross_entropy_grad(logits, soft)
    kd = 0.0
    if alpha > 0:
        if teacher_logits is None:
            raise ValueError("alpha > 0 needs a teacher")
        tau = recipe.kd.temperature
        kd = kd_loss(logits, teacher_logits, tau)
        d = (1.0 - alpha) * d + alpha * kd_loss_grad(logits, teacher_logits, tau)
        d = d.astype(DTYPE)
    loss = total_loss(ce, kd, alpha)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss} at step {state.step} (epoch {state.epoch}, lr {lr:.3g})")
    model.backward(d)
    optimizer_step(recipe.optimizer, dict(model.named_parameters()), dict(model.named_grads()), lr,
                   state.moments)
    ema_update(state.ema, _weights(model))
    state.step += 1
    return loss


def ema_model(state: TrainState) -> Model:
    """Copy of the model carrying the EMA shadow weights."""
    m = copy.deepcopy(state.model)
    m.load_state_dict(state.ema.shadow)
    return m


def train_loop(model: Model, data: ImageSet, val: Optional[ImageSet], recipe: Recipe,
               teacher: Teacher = None,
               on_epoch: Optional[Callable[[Dict[str, float]], None]] = None) -> TrainState:
    """Train ``model`` in place and return the final state with one metrics row per epoch.

    Args:
        model: Multi-branch model to train.
        data: Training images.
        val: Validation images; accuracy columns are NaN when omitted.
        recipe: All hyper-parameters. ``schedule.total_steps`` is overridden by
            ``epochs * steps_per_epoch``.
        teacher: A model run on each (augmented) batch, or an array of
            precomputed logits indexed like ``data``. Needed when ``kd.alpha > 0``.
        on_epoch: Called with each metrics row as it is produced.

    Raises:
        TrainingDiverged: If the loss becomes NaN or infinite.
    """
    if recipe.kd.alpha > 0 and teacher is None:
        raise ValueError("kd.alpha > 0 but no teacher was given")
    if recipe.kd.literal:
        raise ValueError("the literal KD variant has no gradient here; use kd_loss_literal directly")
    if isinstance(teacher, np.ndarray) and teacher.shape != (len(data), data.num_classes):
        raise ValueError(f"teacher logits shape {teacher.shape} != {(len(data), data.num_classes)}")
    spe = steps_per_epoch(len(data), recipe.batch_size)
    schedule = replace(recipe.schedule, total_steps=recipe.epochs * spe)
    workers = 0 if deterministic_mode() else recipe.workers
    state = init_state(model, recipe)
    for epoch in range(recipe.epochs):
        state.epoch = epoch
        losses = []
        lr = lr_at(schedule, state.step)
        for x, soft, idx in iter_batches(data, recipe, epoch, workers):
            lr = lr_at(schedule, state.step)
            t_logits = None
            if recipe.kd.alpha > 0:
                t_logits = _teacher_logits(teacher, x, idx, recipe.eval_batch)
            losses.append(train_step(state, x, soft, lr, recipe, t_logits))
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "val_top1_raw": float("nan"),
            "val_top1_ema": float("nan"),
        }
        if val is not None:
            row["val_top1_raw"] = evaluate(model, val, recipe.eval_batch)
            row["val_top1_ema"] = evaluate(ema_model(state), val, recipe.eval_batch)
        state.metrics.append(row)
        log.info("epoch %d lr %.3g loss %.4f raw %.2f ema %.2f", *(row[k] for k in METRIC_FIELDS))
        if on_epoch is not None:
            on_epoch(row)
    state.epoch = recipe.epochs
    return state

