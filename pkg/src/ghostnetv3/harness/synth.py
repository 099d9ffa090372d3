"""Procedural 10-class image set standing in for a natural-image benchmark.

Each class is one of five silhouettes (disc, square, triangle, cross, ring)
filled with one of two textures (horizontal or diagonal stripes). Position,
scale, stripe period, colours, a distractor shape and pixel noise are random,
so the task needs both shape and texture cues and does not saturate after a
few epochs.
"""
from __future__ import annotations

import numpy as np

SHAPES = ("disc", "square", "triangle", "cross", "ring")
TEXTURES = ("horizontal", "diagonal")
NUM_CLASSES = len(SHAPES) * len(TEXTURES)


def _mask(shape: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if shape == "disc":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if shape == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "cross":
        t = r * 0.35
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if shape == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(shape)


def _texture(kind: str, yy, xx, period, phase):
    u = yy if kind == "horizontal" else (yy + xx) / np.sqrt(2.0)
    return 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * u / period + phase))


def render(label: int, rng: np.random.Generator, size: int = 32, noise: float = 0.08) -> np.ndarray:
    """One (3, size, size) float image in [0, 1] for ``label``."""
    shape, tex = SHAPES[label // len(TEXTURES)], TEXTURES[label % len(TEXTURES)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    bg = rng.uniform(0.0, 1.0, 3)
    img = np.broadcast_to(bg[:, None, None], (3, size, size)).copy()
    # low-frequency background shading
    g = rng.normal(0, 0.15, 2)
    img += (g[0] * (yy / size - 0.5) + g[1] * (xx / size - 0.5))[None]
    # distractor: a plain blob of another colour
    dm = _mask(SHAPES[rng.integers(len(SHAPES))], yy, xx, *rng.uniform(4, size - 4, 2), rng.uniform(2, 5))
    img[:, dm] = rng.uniform(0, 1, 3)[:, None]
    r = rng.uniform(0.22, 0.38) * size
    cy, cx = rng.uniform(r * 0.8, size - r * 0.8, 2)
    m = _mask(shape, yy, xx, cy, cx, r)
    t = _texture(tex, yy, xx, rng.uniform(3.0, 6.0), rng.uniform(0, 2 * np.pi))
    c1, c2 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    while np.abs(c1 - c2).sum() < 0.6:
        c2 = rng.uniform(0, 1, 3)
    fill = c1[:, None, None] * t[None] + c2[:, None, None] * (1 - t[None])
    img[:, m] = fill[:, m]
    img += rng.normal(0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def make_dataset(n: int, seed: int = 0, size: int = 32, noise: float = 0.08):
    """``n`` images as uint8 (n, 3, size, size) and balanced uint16 labels."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % NUM_CLASSES
    rng.shuffle(labels)
    x = np.empty((n, 3, size, size), dtype=np.uint8)
    for i, lab in enumerate(labels):
        x[i] = np.round(render(int(lab), rng, size, noise) * 255.0).astype(np.uint8)
    return x, labels.astype(np.uint16)
