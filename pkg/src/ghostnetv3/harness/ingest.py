"""Build a desk dataset from a directory of per-class image folders."""
from __future__ import annotations

import os
from typing import List, Tuple

import numpy as np
from PIL import Image

from .io import DeskDataset

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm", ".tif", ".tiff", ".webp"}


def list_images(root: str) -> Tuple[List[str], List[Tuple[str, int]]]:
    """Class names and (path, label) pairs, both in lexicographic order."""
    if not os.path.isdir(root):
        raise FileNotFoundError(f"{root} is not a directory")
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    items = []
    for label, name in enumerate(classes):
        folder = os.path.join(root, name)
        for fn in sorted(os.listdir(folder)):
            if os.path.splitext(fn)[1].lower() in IMAGE_EXTS:
                items.append((os.path.join(folder, fn), label))
    if not items:
        raise ValueError(f"{root}: no images found in class sub-directories")
    return classes, items


def load_image(path: str, size: int) -> np.ndarray:
    """RGB uint8 (3, size, size): shorter side resized to ``size`` then centre-cropped."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        s = size / min(w, h)
        nw, nh = max(size, round(w * s)), max(size, round(h * s))
        im = im.resize((nw, nh), Image.BILINEAR)
        left, top = (nw - size) // 2, (nh - size) // 2
        im = im.crop((left, top, left + size, top + size))
        return np.asarray(im, dtype=np.uint8).transpose(2, 0, 1).copy()


def ingest_images(root: str, size: int = 32) -> Tuple[DeskDataset, List[str]]:
    classes, items = list_images(root)
    pixels = np.stack([load_image(p, size) for p, _ in items])
    labels = np.array([lab for _, lab in items], dtype=np.uint16)
    return DeskDataset.from_arrays(pixels, labels, len(classes)), classes
