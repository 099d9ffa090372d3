"""Binary file formats. Every integer and float is little-endian.

Checkpoint (``.gnv3``)::

    b"GNV3" | u32 version | u8 folded | 32 B recipe fingerprint
    | u32 len + UTF-8 JSON model spec | u32 tensor count
    | per tensor: u16 len + UTF-8 name, u8 dtype (0 = f32), u8 ndim,
      u32 dims..., raw f32 payload

Desk dataset (``.gds``)::

    b"GDS1" | u32 n | u16 channels | u16 height | u16 width | u16 classes
    | f32 mean[channels] | f32 std[channels]
    | n records of (u8 pixels[c*h*w], u16 label)

Teacher logits::

    b"GTL1" | u32 n | u32 classes | f32 logits[n*classes], row-major
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Dict, Optional, Tuple, Union

import numpy as np

from ..ghostnet import Model, ModelSpec, build_model, fold_model
from ..training.loop import ImageSet

PathLike = Union[str, os.PathLike]

CKPT_MAGIC = b"GNV3"
CKPT_VERSION = 1
DATA_MAGIC = b"GDS1"
LOGIT_MAGIC = b"GTL1"
_F32 = np.dtype("<f4")
_DTYPES = {0: _F32}


class FormatError(ValueError):
    """A file does not match the expected layout."""


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(b)}")
    return b


def _unpack(f: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read_exact(f, struct.calcsize(fmt)))


def fingerprint(obj) -> bytes:
    """SHA-256 of the canonical JSON encoding of ``obj`` (32 bytes)."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).digest()


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    spec: ModelSpec
    tensors: Dict[str, np.ndarray]
    folded: bool = False
    recipe_fingerprint: bytes = bytes(32)
    version: int = CKPT_VERSION

    @classmethod
    def from_model(cls, model: Model, recipe_fingerprint: Optional[bytes] = None) -> "Checkpoint":
        fp = recipe_fingerprint if recipe_fingerprint is not None else bytes(32)
        return cls(model.spec, dict(model.state_dict()), model.folded, fp)

    def to_model(self) -> Model:
        model = build_model(self.spec, seed=0, folded=self.folded)
        model.load_state_dict(self.tensors)
        return model

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        write_checkpoint(buf, self)
        return buf.getvalue()


def write_checkpoint(f: BinaryIO, ck: Checkpoint):
    if len(ck.recipe_fingerprint) != 32:
        raise ValueError("recipe fingerprint must be 32 bytes")
    spec = json.dumps(ck.spec.to_dict(), sort_keys=True).encode()
    f.write(CKPT_MAGIC + struct.pack("<IB", ck.version, int(ck.folded)) + ck.recipe_fingerprint)
    f.write(struct.pack("<I", len(spec)) + spec)
    f.write(struct.pack("<I", len(ck.tensors)))
    for name, arr in ck.tensors.items():
        nb = name.encode()
        f.write(struct.pack("<H", len(nb)) + nb)
        f.write(struct.pack(f"<BB{arr.ndim}I", 0, arr.ndim, *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())


def read_checkpoint(f: BinaryIO) -> Checkpoint:
    if _read_exact(f, 4) != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, folded = _unpack(f, "<IB")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    fp = _read_exact(f, 32)
    (slen,) = _unpack(f, "<I")
    spec = ModelSpec.from_dict(json.loads(_read_exact(f, slen).decode()))
    (count,) = _unpack(f, "<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = _unpack(f, "<H")
        name = _read_exact(f, nlen).decode()
        code, ndim = _unpack(f, "<BB")
        if code not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        shape = _unpack(f, f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(_read_exact(f, size), dtype=dt).reshape(shape).astype(np.float32)
    if f.read(1):
        raise FormatError("trailing bytes after tensor table")
    return Checkpoint(spec, tensors, bool(folded), fp, version)


def save_checkpoint(path: PathLike, model_or_ckpt, recipe_fingerprint: Optional[bytes] = None) -> Checkpoint:
    ck = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else \
        Checkpoint.from_model(model_or_ckpt, recipe_fingerprint)
    with open(path, "wb") as f:
        write_checkpoint(f, ck)
    return ck


def load_checkpoint(path: PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        return read_checkpoint(f)


def load_model(path: PathLike, folded: Optional[bool] = None) -> Model:
    """Model from a checkpoint; ``folded=True`` folds a training-form checkpoint on load."""
    model = load_checkpoint(path).to_model()
    if folded and not model.folded:
        model = fold_model(model)
    return model


def fold_checkpoint(ck: Checkpoint) -> Checkpoint:
    """Folded copy; a checkpoint that is already folded comes back unchanged."""
    if ck.folded:
        return ck
    return Checkpoint.from_model(fold_model(ck.to_model()), ck.recipe_fingerprint)


# ---------------------------------------------------------------------------
# desk datasets


@dataclass
class DeskDataset:
    pixels: np.ndarray                  # (n, c, h, w) uint8
    labels: np.ndarray                  # (n,) uint16
    num_classes: int
    mean: np.ndarray                    # (c,) float32, on the [0, 1] scale
    std: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.pixels.ndim != 4 or len(self.pixels) != len(self.labels):
            raise FormatError(f"pixels {self.pixels.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and int(self.labels.max()) >= self.num_classes:
            raise FormatError("label out of range for class count")
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)

    @classmethod
    def from_arrays(cls, pixels: np.ndarray, labels: np.ndarray, num_classes: int) -> "DeskDataset":
        """Wrap uint8 images, computing per-channel normalisation stats."""
        mean, std = channel_stats(pixels)
        return cls(pixels, labels, num_classes, mean, std)

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def to_imageset(self, sl: slice = slice(None)) -> ImageSet:
        return ImageSet(self.pixels[sl].astype(np.float32) / np.float32(255.0), self.labels[sl],
                        self.num_classes, self.mean, self.std)

    def subset(self, idx) -> "DeskDataset":
        return DeskDataset(self.pixels[idx], self.labels[idx], self.num_classes, self.mean, self.std)


def channel_stats(pixels: np.ndarray):
    x = np.asarray(pixels, dtype=np.float64) / 255.0
    if len(x) == 0:
        c = x.shape[1]
        return np.zeros(c, np.float32), np.ones(c, np.float32)
    std = x.std(axis=(0, 2, 3))
    return x.mean(axis=(0, 2, 3)).astype(np.float32), np.where(std > 0, std, 1.0).astype(np.float32)


def _record_dtype(c, h, w):
    return np.dtype([("px", "u1", (c, h, w)), ("label", "<u2")])


def write_dataset(path: PathLike, ds: DeskDataset):
    n, c, h, w = ds.pixels.shape
    rec = np.empty(n, dtype=_record_dtype(c, h, w))
    rec["px"], rec["label"] = ds.pixels, ds.labels
    with open(path, "wb") as f:
        f.write(DATA_MAGIC + struct.pack("<IHHHH", n, c, h, w, ds.num_classes))
        f.write(ds.mean.astype(_F32).tobytes() + ds.std.astype(_F32).tobytes())
        f.write(rec.tobytes())


def read_dataset(path: PathLike) -> DeskDataset:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != DATA_MAGIC:
            raise FormatError(f"{path}: not a desk dataset (bad magic)")
        n, c, h, w, classes = _unpack(f, "<IHHHH")
        stats = np.frombuffer(_read_exact(f, 8 * c), dtype=_F32)
        dt = _record_dtype(c, h, w)
        body = f.read()
    if len(body) != n * dt.itemsize:
        raise FormatError(f"{path}: header says {n} records, payload holds {len(body) / dt.itemsize:g}")
    rec = np.frombuffer(body, dtype=dt)
    return DeskDataset(rec["px"].copy(), rec["label"].copy(), classes, stats[:c].copy(), stats[c:].copy())


# ---------------------------------------------------------------------------
# teacher logits


def write_logits(path: PathLike, logits: np.ndarray):
    logits = np.asarray(logits)
    if logits.ndim != 2:
        raise ValueError("logits must be (n, classes)")
    with open(path, "wb") as f:
        f.write(LOGIT_MAGIC + struct.pack("<II", *logits.shape))
        f.write(np.ascontiguousarray(logits, dtype=_F32).tobytes())


def read_logits(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != LOGIT_MAGIC:
            raise FormatError(f"{path}: not a teacher-logit file (bad magic)")
        n, c = _unpack(f, "<II")
        body = f.read()
    if len(body) != 4 * n * c:
        raise FormatError(f"{path}: expected {n}x{c} logits, payload has {len(body)} bytes")
    return np.frombuffer(body, dtype=_F32).reshape(n, c).astype(np.float32)
