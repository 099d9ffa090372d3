"""Data augmentation on float images in [0, 1], NCHW.

Random transforms replace learned augmentation policies with a fixed menu of
seven cheap ops picked uniformly. Mixup and CutMix operate on batches and
return soft targets whose per-pair label weights sum to exactly 1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np
from scipy import ndimage

from ..nn import one_hot
from ..tensor import DTYPE


@dataclass
class AugmentConfig:
    rand_transforms: bool = True
    num_ops: int = 2
    mixup: bool = False
    mixup_alpha: float = 0.8
    cutmix: bool = False
    cutmix_alpha: float = 1.0
    switch_prob: float = 0.5       # when both are on: chance of cutmix instead of mixup
    erasing: bool = True
    erasing_prob: float = 0.25
    erasing_area: Tuple[float, float] = (0.02, 1 / 3)
    erasing_aspect: Tuple[float, float] = (0.3, 1 / 0.3)

    def __post_init__(self):
        for name in ("erasing_prob", "switch_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.erasing_area
        if not 0.0 < lo <= hi < 1.0:
            raise ValueError(f"erasing_area must be a sub-range of (0, 1), got {self.erasing_area}")
        if self.mixup_alpha <= 0 or self.cutmix_alpha <= 0:
            raise ValueError("Beta parameters must be positive")


# ---------------------------------------------------------------------------
# per-image transforms, img is (c, h, w)


def _luma(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 3:
        return (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]
    return img.mean(axis=0, keepdims=True)


def hflip(img, rng):
    return img[:, :, ::-1]


def crop_pad(img, rng, pad: int = 4):
    c, h, w = img.shape
    p = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="constant")
    i, j = rng.integers(0, 2 * pad + 1, size=2)
    return p[:, i:i + h, j:j + w]


def rotate(img, rng, max_deg: float = 15.0):
    deg = rng.uniform(-max_deg, max_deg)
    return ndimage.rotate(img, deg, axes=(1, 2), reshape=False, order=1, mode="nearest")


def brightness(img, rng):
    return img * rng.uniform(0.6, 1.4)


def contrast(img, rng):
    f = rng.uniform(0.6, 1.4)
    m = _luma(img).mean()
    return m + f * (img - m)


def saturation(img, rng):
    f = rng.uniform(0.0, 2.0)
    g = _luma(img)
    return g + f * (img - g)


def grayscale(img, rng):
    return np.broadcast_to(_luma(img), img.shape)


RAND_OPS = (hflip, crop_pad, rotate, brightness, contrast, saturation, grayscale)


def rand_transforms(img: np.ndarray, rng: np.random.Generator, num_ops: int = 2) -> np.ndarray:
    """Apply ``num_ops`` ops drawn uniformly (with replacement) from :data:`RAND_OPS`."""
    for k in rng.integers(0, len(RAND_OPS), size=num_ops):
        img = RAND_OPS[k](img, rng)
    return np.clip(img, 0.0, 1.0).astype(DTYPE)


def random_erasing(x: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Overwrite one random rectangle per image (with probability ``erasing_prob``) with U[0, 1) noise.

    Accepts (c, h, w) or (n, c, h, w); never modifies ``x``.
    """
    if x.ndim == 3:
        return random_erasing(x[None], rng, cfg)[0]
    out = np.array(x, dtype=DTYPE, copy=True)
    n, c, h, w = out.shape
    lo_a, hi_a = cfg.erasing_area
    log_r = (np.log(cfg.erasing_aspect[0]), np.log(cfg.erasing_aspect[1]))
    for b in range(n):
        if rng.random() >= cfg.erasing_prob:
            continue
        for _ in range(10):
            area = rng.uniform(lo_a, hi_a) * h * w
            ratio = np.exp(rng.uniform(*log_r))
            eh = int(round(np.sqrt(area * ratio)))
            ew = int(round(np.sqrt(area / ratio)))
            if 0 < eh < h and 0 < ew < w:
                top = int(rng.integers(0, h - eh + 1))
                left = int(rng.integers(0, w - ew + 1))
                out[b, :, top:top + eh, left:left + ew] = rng.random((c, eh, ew), dtype=DTYPE)
                break
    return out


# ---------------------------------------------------------------------------
# image mixing


class MixResult(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    weights: Tuple[float, float]


def _label_pair(w_j: float) -> Tuple[float, float]:
    # 1 - a + a == 1 exactly in binary64 round-to-nearest for 0 <= a <= 1
    w_j = float(w_j)
    return 1.0 - w_j, w_j


def mixup(x_i, x_j, y_i, y_j, lam: float) -> MixResult:
    """Convex combination lam * (x_i, y_i) + (1 - lam) * (x_j, y_j)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    w_i, w_j = _label_pair(1.0 - lam)
    x = (w_i * np.asarray(x_i, dtype=np.float64) + w_j * np.asarray(x_j, dtype=np.float64)).astype(DTYPE)
    y = w_i * np.asarray(y_i, dtype=np.float64) + w_j * np.asarray(y_j, dtype=np.float64)
    return MixResult(x, y, (w_i, w_j))


def cutmix(x_i, x_j, y_i, y_j, region: Tuple[int, int, int, int]) -> MixResult:
    """Paste ``x_j[..., top:top+h, left:left+w]`` into ``x_i``; label weights follow pasted area.

    ``region`` is (top, left, height, width) and is clipped to the image.
    """
    x_i = np.asarray(x_i)
    H, W = x_i.shape[-2:]
    top, left, rh, rw = region
    t0, l0 = max(0, top), max(0, left)
    t1, l1 = min(H, top + rh), min(W, left + rw)
    out = np.array(x_i, dtype=DTYPE, copy=True)
    area = 0
    if t1 > t0 and l1 > l0:
        out[..., t0:t1, l0:l1] = np.asarray(x_j)[..., t0:t1, l0:l1]
        area = (t1 - t0) * (l1 - l0)
    w_i, w_j = _label_pair(area / (H * W))
    y = w_i * np.asarray(y_i, dtype=np.float64) + w_j * np.asarray(y_j, dtype=np.float64)
    return MixResult(out, y, (w_i, w_j))


def cutmix_region(h: int, w: int, lam: float, rng: np.random.Generator) -> Tuple[int, int, int, int]:
    """Box of area about (1 - lam) * h * w centred at a uniform point (may be clipped later)."""
    cut = np.sqrt(1.0 - lam)
    ch, cw = int(h * cut), int(w * cut)
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    top, left = cy - ch // 2, cx - cw // 2
    return top, left, ch, cw


def mix_batch(x: np.ndarray, y: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig,
              num_classes: Optional[int] = None):
    """Batch-level mixup / cutmix pairing each sample with its mirror in the batch.

    Returns (x_mixed, soft_targets, (w_self, w_partner), used) where ``used``
    is ``"none"``, ``"mixup"`` or ``"cutmix"``.
    """
    y = np.asarray(y)
    soft = y if y.ndim == 2 else one_hot(y, num_classes)
    if not (cfg.mixup or cfg.cutmix):
        return x, soft, (1.0, 0.0), "none"
    use_cutmix = cfg.cutmix and (not cfg.mixup or rng.random() < cfg.switch_prob)
    partner = slice(None, None, -1)
    if use_cutmix:
        lam = rng.beta(cfg.cutmix_alpha, cfg.cutmix_alpha)
        region = cutmix_region(x.shape[2], x.shape[3], lam, rng)
        r = cutmix(x, x[partner], soft, soft[partner], region)
        return r.x, r.y.astype(DTYPE), r.weights, "cutmix"
    lam = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha)
    r = mixup(x, x[partner], soft, soft[partner], lam)
    return r.x, r.y.astype(DTYPE), r.weights, "mixup"
