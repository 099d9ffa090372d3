"""Desk-scale ablation: multi-branch vs single-branch, distillation, and mixing augmentations.

Every student run shares data, epochs and optimiser settings; arms differ in
one factor only. The teacher is a 2x-wide model of the same family trained
once with the baseline recipe and then folded.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..ghostnet import Model, build_model, fold_model, mini_spec
from ..training import AugmentConfig, ImageSet, KDConfig, Recipe, ScheduleConfig, train_loop
from ..training.loop import evaluate
from .commands import synth_dataset
from .config import DESK_EMA, DESK_LR
from .io import DeskDataset

log = logging.getLogger(__name__)

ARMS = ("rep", "norep", "kd", "mix")


@dataclass
class AblationConfig:
    train_samples: int = 5000
    val_samples: int = 2000
    data_seed: int = 0
    seeds: Sequence[int] = (0, 1, 2)
    epochs: int = 10
    teacher_epochs: int = 10
    teacher_width: float = 2.0
    batch_size: int = 64
    lr: float = DESK_LR
    ema_decay: float = DESK_EMA
    kd_alpha: float = 0.5
    kd_tau: float = 1.0
    metric: str = "val_top1_raw"
    arms: Sequence[str] = ARMS


@dataclass
class AblationResult:
    config: AblationConfig
    scores: Dict[str, List[float]] = field(default_factory=dict)
    teacher_score: float = float("nan")
    seconds: float = 0.0

    def mean(self, arm: str) -> float:
        return float(np.mean(self.scores[arm]))

    def gaps(self) -> Dict[str, float]:
        out = {}
        if "norep" in self.scores:
            out["rep_minus_norep"] = self.mean("rep") - self.mean("norep")
        if "kd" in self.scores:
            out["kd_minus_ce"] = self.mean("kd") - self.mean("rep")
        if "mix" in self.scores:
            out["mix_minus_base"] = self.mean("mix") - self.mean("rep")
        return out

    def text(self) -> str:
        lines = [f"{'arm':<8} {'mean':>7}  runs"]
        for arm, s in self.scores.items():
            lines.append(f"{arm:<8} {np.mean(s):7.2f}  " + " ".join(f"{v:.2f}" for v in s))
        lines.append(f"teacher  {self.teacher_score:7.2f}")
        lines += [f"{k} = {v:+.2f}" for k, v in self.gaps().items()]
        lines.append(f"elapsed {self.seconds:.0f} s")
        return "\n".join(lines)


def base_recipe(cfg: AblationConfig, seed: int) -> Recipe:
    return Recipe(
        kd=KDConfig(),
        schedule=ScheduleConfig(kind="cosine", lr_max=cfg.lr),
        augment=AugmentConfig(rand_transforms=True, erasing=True),
        ema_decay=cfg.ema_decay, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed,
    )


def arm_setup(arm: str, cfg: AblationConfig, seed: int):
    """(model spec, recipe) for one arm."""
    spec = mini_spec()
    r = base_recipe(cfg, seed)
    if arm == "norep":
        spec = spec.with_(rep_branches=1, rep_1x1=False)
    elif arm == "kd":
        r = replace(r, kd=KDConfig(alpha=cfg.kd_alpha, temperature=cfg.kd_tau, teacher="model"))
    elif arm == "mix":
        r = replace(r, augment=replace(r.augment, mixup=True, cutmix=True))
    elif arm != "rep":
        raise ValueError(f"unknown arm {arm!r}")
    return spec, r


def train_teacher(cfg: AblationConfig, train: ImageSet, val: ImageSet) -> Model:
    spec = mini_spec(width=cfg.teacher_width)
    r = replace(base_recipe(cfg, seed=1000), epochs=cfg.teacher_epochs)
    model = build_model(spec, seed=1000)
    train_loop(model, train, val, r)
    return fold_model(model)


def run_ablation(cfg: Optional[AblationConfig] = None, teacher: Optional[Model] = None) -> AblationResult:
    cfg = cfg or AblationConfig()
    t0 = time.perf_counter()
    full = synth_dataset(cfg.train_samples + cfg.val_samples, cfg.data_seed)
    tr_ds = full.subset(slice(0, cfg.train_samples))
    tr_ds = DeskDataset.from_arrays(tr_ds.pixels, tr_ds.labels, tr_ds.num_classes)
    va_ds = DeskDataset(full.pixels[cfg.train_samples:], full.labels[cfg.train_samples:], full.num_classes,
                        tr_ds.mean, tr_ds.std)
    train, val = tr_ds.to_imageset(), va_ds.to_imageset()
    res = AblationResult(cfg)
    if "kd" in cfg.arms:
        if teacher is None:
            teacher = train_teacher(cfg, train, val)
        res.teacher_score = evaluate(teacher, val)
        log.info("teacher top-1 %.2f", res.teacher_score)
    for arm in cfg.arms:
        res.scores[arm] = []
        for seed in cfg.seeds:
            spec, recipe = arm_setup(arm, cfg, seed)
            model = build_model(spec, seed=seed)
            st = train_loop(model, train, val, recipe, teacher if arm == "kd" else None)
            score = st.metrics[-1][cfg.metric]
            res.scores[arm].append(score)
            log.info("%s seed %d: %.2f", arm, seed, score)
    res.seconds = time.perf_counter() - t0
    return res
