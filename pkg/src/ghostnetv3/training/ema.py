"""Exponential moving average of model weights."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np


@dataclass
class EMAState:
    shadow: Dict[str, np.ndarray]
    decay: float = 0.9999
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {self.decay}")

    @classmethod
    def from_weights(cls, weights: Dict[str, np.ndarray], decay: float = 0.9999) -> "EMAState":
        return cls({k: np.array(v, copy=True) for k, v in weights.items()}, decay)


def ema_update(state: EMAState, weights: Dict[str, np.ndarray], decay: Optional[float] = None) -> EMAState:
    """shadow <- decay * shadow + (1 - decay) * weights, in place; returns ``state``."""
    beta = state.decay if decay is None else decay
    if set(weights) != set(state.shadow):
        raise KeyError("EMA shadow and weights have different names")
    b = state.shadow[next(iter(state.shadow))].dtype.type(beta) if state.shadow else beta
    for name, w in weights.items():
        s = state.shadow[name]
        if s.shape != w.shape:
            raise ValueError(f"{name}: shadow shape {s.shape} != weight shape {w.shape}")
        # s += (1 - b) * (w - s) rounds differently from the textbook form; keep the latter
        s *= b
        s += (1 - b) * w
    state.step += 1
    return state
