"""SGD with momentum and LAMB, operating in place on named parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

TRUST_CLIP = 10.0


@dataclass
class OptimizerConfig:
    kind: str = "lamb"
    weight_decay: float = 0.05
    momentum: float = 0.9          # SGD momentum, and LAMB beta1
    beta2: float = 0.999
    eps: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("sgd_momentum", "lamb"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


@dataclass
class Moments:
    """Per-parameter optimizer state."""

    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def default_decay_filter(name: str, arr: np.ndarray) -> bool:
    """Decay conv/linear weights only; biases and BN affine params are exempt."""
    return arr.ndim > 1


def lamb_trust_ratio(w: np.ndarray, update: np.ndarray) -> float:
    """||w|| / ||update|| clipped to [0, TRUST_CLIP]; 1 when either norm is zero."""
    wn = float(np.linalg.norm(w.astype(np.float64)))
    un = float(np.linalg.norm(update.astype(np.float64)))
    if wn == 0.0 or un == 0.0:
        return 1.0
    return min(max(wn / un, 0.0), TRUST_CLIP)


def optimizer_step(cfg: OptimizerConfig, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                   lr: float, moments: Moments,
                   decay_filter: Optional[Callable[[str, np.ndarray], bool]] = default_decay_filter) -> Moments:
    """Apply one update to every parameter that has a gradient. Updates ``params`` in place."""
    moments.step += 1
    t = moments.step
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {w.shape}")
        wd = cfg.weight_decay if (decay_filter is None or decay_filter(name, w)) else 0.0
        if cfg.kind == "sgd_momentum":
            d = g + wd * w if wd else g
            buf = moments.first.get(name)
            if buf is None:
                buf = moments.first[name] = np.array(d, dtype=w.dtype, copy=True)
            else:
                buf *= w.dtype.type(cfg.momentum)
                buf += d
            w -= w.dtype.type(lr) * buf
        else:
            m = moments.first.setdefault(name, np.zeros_like(w))
            v = moments.second.setdefault(name, np.zeros_like(w))
            b1, b2 = cfg.momentum, cfg.beta2
            m *= w.dtype.type(b1)
            m += w.dtype.type(1 - b1) * g
            v *= w.dtype.type(b2)
            v += w.dtype.type(1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            update = m_hat / (np.sqrt(v_hat) + cfg.eps)
            if wd:
                update = update + wd * w
            ratio = lamb_trust_ratio(w, update)
            w -= (lr * ratio * update).astype(w.dtype)
    return moments
