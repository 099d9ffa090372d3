"""Learning-rate schedules."""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Tuple


@dataclass
class ScheduleConfig:
    """``step``: lr_max * factor ** (milestones passed); ``cosine``: half-cosine from lr_max to lr_min.

    Milestones are absolute step indices. ``warmup_steps`` adds a linear ramp
    from 0 (off by default).
    """

    kind: str = "cosine"
    lr_max: float = 0.005
    lr_min: float = 0.0
    total_steps: int = 1
    milestones: Tuple[int, ...] = ()
    factor: float = 0.1
    warmup_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("step", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.milestones = tuple(sorted(int(m) for m in self.milestones))


def lr_at(cfg: ScheduleConfig, t: int) -> float:
    if t < cfg.warmup_steps:
        return cfg.lr_max * (t + 1) / cfg.warmup_steps
    if cfg.kind == "step":
        return cfg.lr_max * cfg.factor ** bisect.bisect_right(cfg.milestones, t)
    t = min(max(t, 0), cfg.total_steps)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t / cfg.total_steps))
