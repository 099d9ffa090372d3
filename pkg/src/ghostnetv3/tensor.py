"""Dense NCHW float32 primitives.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 and rank 4
(n, c, h, w). Convolution follows the cross-correlation convention (the
kernel is never flipped) with zero padding.

Tolerance ladder used throughout the package: 1e-6 for elementwise ops,
1e-5 relative for convolutions (32-bit accumulation).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from . import _kernels

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor or parameter shapes do not line up."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def as_tensor(x) -> np.ndarray:
    """Validate ``x`` as an NCHW tensor, converting to contiguous float32."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"expected rank-4 NCHW tensor, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got {x.shape}")
    return x


def check_finite(x: np.ndarray, where: str = "") -> np.ndarray:
    # a single reduction is far cheaper than isfinite().all() on big arrays
    if not np.isfinite(np.add.reduce(x, axis=None, dtype=np.float64)):
        if not np.isfinite(x).all():
            raise NonFiniteError(f"non-finite values produced{' in ' + where if where else ''}")
    return x


@dataclass
class ConvKernel:
    """Convolution weight plus geometry.

    ``weight`` has shape (c_out, c_in // groups, k_h, k_w).
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    groups: int = 1

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=DTYPE)
            if self.bias.shape != (self.c_out,):
                raise ShapeError(f"bias shape {self.bias.shape} != ({self.c_out},)")
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        self.groups = int(self.groups)
        if self.groups < 1:
            raise ShapeError("groups must be positive")
        if self.c_out % self.groups:
            raise ShapeError(f"c_out={self.c_out} not divisible by groups={self.groups}")
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> Tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.c_in == self.c_out

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        kh, kw = self.kernel_size
        (sh, sw), (ph, pw) = self.stride, self.padding
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1

    def copy(self) -> "ConvKernel":
        return replace(self, weight=self.weight.copy(),
                       bias=None if self.bias is None else self.bias.copy())


@dataclass
class BatchNormParams:
    """Per-channel batch-norm affine parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=DTYPE))
        c = self.gamma.shape
        if len(c) != 1 or any(getattr(self, n).shape != c for n in ("beta", "running_mean", "running_var")):
            raise ShapeError("batch-norm vectors must all be 1-d and of equal length")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    @classmethod
    def identity(cls, c: int, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormParams":
        return cls(np.ones(c), np.zeros(c), np.zeros(c), np.ones(c), eps, momentum)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def copy(self) -> "BatchNormParams":
        return BatchNormParams(self.gamma.copy(), self.beta.copy(), self.running_mean.copy(),
                               self.running_var.copy(), self.eps, self.momentum)


# ---------------------------------------------------------------------------
# convolution


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph:ph + h, pw:pw + w] = x
    return out


def _check_conv(x: np.ndarray, k: ConvKernel) -> Tuple[int, int]:
    if x.shape[1] != k.c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {k.c_in}")
    kh, kw = k.kernel_size
    ph, pw = k.padding
    if x.shape[2] + 2 * ph < kh or x.shape[3] + 2 * pw < kw:
        raise ShapeError(f"padded input {x.shape[2:]} smaller than kernel {(kh, kw)}")
    return k.output_hw(x.shape[2], x.shape[3])


def im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    """Gather padded input patches into shape (n, c, kh, kw, oh, ow)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw]
    return cols


def col2im(cols: np.ndarray, padded_shape, sh: int, sw: int) -> np.ndarray:
    """Scatter-add inverse of :func:`im2col`."""
    n, c, kh, kw, oh, ow = cols.shape
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw] += cols[:, :, i, j]
    return xp


def conv2d(x: np.ndarray, k: ConvKernel) -> np.ndarray:
    """2-d cross-correlation with zero padding, stride and groups.

    Output shape is (n, c_out, (h + 2p_h - k_h) // s_h + 1, (w + 2p_w - k_w) // s_w + 1).
    """
    x = as_tensor(x)
    oh, ow = _check_conv(x, k)
    n = x.shape[0]
    kh, kw = k.kernel_size
    (sh, sw), (ph, pw) = k.stride, k.padding
    g = k.groups

    if k.is_depthwise and g > 1 and _kernels.HAVE_NUMBA:
        out = np.empty((n, k.c_out, oh, ow), dtype=DTYPE)
        _kernels.dw_forward(_pad(x, ph, pw), np.ascontiguousarray(k.weight[:, 0]), out, sh, sw)
    elif k.is_depthwise and g > 1:
        xp = _pad(x, ph, pw)
        out = np.zeros((n, k.c_out, oh, ow), dtype=DTYPE)
        w = k.weight[:, 0]
        for i in range(kh):
            for j in range(kw):
                out += xp[:, :, i:i + sh * (oh - 1) + 1:sh, j:j + sw * (ow - 1) + 1:sw] * w[:, i, j, None, None]
    elif kh == kw == 1 and ph == pw == 0 and g == 1:
        xs = x[:, :, ::sh, ::sw] if (sh, sw) != (1, 1) else x
        xs = xs[:, :, :oh, :ow]
        out = np.matmul(k.weight.reshape(k.c_out, k.c_in), xs.reshape(n, k.c_in, oh * ow))
        out = out.reshape(n, k.c_out, oh, ow)
    else:
        cols = im2col(_pad(x, ph, pw), kh, kw, sh, sw, oh, ow)
        cin_g, cout_g = k.c_in // g, k.c_out // g
        cols = cols.reshape(n, g, cin_g * kh * kw, oh * ow)
        wmat = k.weight.reshape(g, cout_g, cin_g * kh * kw)
        out = np.matmul(wmat, cols).reshape(n, k.c_out, oh, ow)
    if k.bias is not None:
        out += k.bias[None, :, None, None]
    return check_finite(np.ascontiguousarray(out, dtype=DTYPE), "conv2d")


# ---------------------------------------------------------------------------
# normalisation and activations


def _check_bn(x: np.ndarray, p: BatchNormParams):
    if x.shape[1] != p.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, batch-norm has {p.channels}")


def batchnorm_infer(x: np.ndarray, p: BatchNormParams) -> np.ndarray:
    """y = gamma * (x - mean) / sqrt(var + eps) + beta with running statistics."""
    x = as_tensor(x)
    _check_bn(x, p)
    scale = (p.gamma / np.sqrt(p.running_var + DTYPE(p.eps))).astype(DTYPE)
    shift = (p.beta - p.running_mean * scale).astype(DTYPE)
    return check_finite(x * scale[None, :, None, None] + shift[None, :, None, None], "batchnorm_infer")


def batchnorm_train(x: np.ndarray, p: BatchNormParams):
    """Normalise with batch statistics over (n, h, w).

    Returns ``(y, updated_params, cache)``; ``p`` itself is not modified.
    Running variance is updated with the unbiased batch variance.
    """
    x = as_tensor(x)
    _check_bn(x, p)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if _kernels.HAVE_NUMBA:
        y, xhat = np.empty_like(x), np.empty_like(x)
        mean64, var64 = np.empty(x.shape[1]), np.empty(x.shape[1])
        _kernels.bn_train_forward(x, p.gamma, p.beta, DTYPE(p.eps), y, xhat, mean64, var64)
        mean, var = mean64.astype(DTYPE), var64.astype(DTYPE)
        inv_std = (1.0 / np.sqrt(var + DTYPE(p.eps))).astype(DTYPE)
    else:
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
        xc = x - mean[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
        inv_std = (1.0 / np.sqrt(var + DTYPE(p.eps))).astype(DTYPE)
        xhat = xc * inv_std[None, :, None, None]
        y = xhat * p.gamma[None, :, None, None] + p.beta[None, :, None, None]
    unbiased = var * (m / (m - 1)) if m > 1 else var
    mom = DTYPE(p.momentum)
    new = BatchNormParams(
        p.gamma, p.beta,
        ((1 - mom) * p.running_mean + mom * mean).astype(DTYPE),
        ((1 - mom) * p.running_var + mom * unbiased).astype(DTYPE),
        p.eps, p.momentum,
    )
    return check_finite(y, "batchnorm_train"), new, (xhat, inv_std)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, DTYPE(0))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, clipped so the result lies strictly inside (0, 1) in float32."""
    y = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=DTYPE)))
    return np.clip(y, _SIG_LO, _SIG_HI).astype(DTYPE, copy=False)


_SIG_LO = DTYPE(np.finfo(DTYPE).tiny)
_SIG_HI = DTYPE(1.0) - DTYPE(np.finfo(DTYPE).epsneg)


def softmax(x: np.ndarray, axis: int = 1) -> np.ndarray:
    """Softmax over the channel axis (axis 1) by default; works for (n, c) logits too."""
    x = np.asarray(x)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = 1) -> np.ndarray:
    x = np.asarray(x)
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# pooling, resampling and plumbing
#
# Pooling and nearest resampling are separable linear maps; they are applied
# as small (out, in) matrices along each spatial axis so the backward pass is
# just the transpose.


def pool_matrix(size: int, window: int, stride: int) -> np.ndarray:
    out = (size - window) // stride + 1
    if out < 1:
        raise ShapeError(f"spatial size {size} smaller than pooling window {window}")
    m = np.zeros((out, size), dtype=DTYPE)
    for i in range(out):
        m[i, i * stride:i * stride + window] = 1.0 / window
    return m


def resize_matrix(size: int, out: int) -> np.ndarray:
    """Nearest-neighbour selection matrix mapping ``size`` samples to ``out``."""
    src = np.minimum((np.arange(out) * size) // out, size - 1)
    m = np.zeros((out, size), dtype=DTYPE)
    m[np.arange(out), src] = 1.0
    return m


def separable_apply(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    """Compute mh @ x @ mw.T over the trailing spatial axes."""
    return np.ascontiguousarray(np.matmul(np.matmul(mh, x), mw.T), dtype=DTYPE)


def avg_pool2d(x: np.ndarray, window, stride=None) -> np.ndarray:
    x = as_tensor(x)
    wh, ww = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    return separable_apply(x, pool_matrix(x.shape[2], wh, sh), pool_matrix(x.shape[3], ww, sw))


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over (h, w); keeps rank 4 with shape (n, c, 1, 1)."""
    x = as_tensor(x)
    return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(DTYPE)


def nearest_upsample(x: np.ndarray, factor) -> np.ndarray:
    fh, fw = _pair(factor)
    x = as_tensor(x)
    return np.repeat(np.repeat(x, fh, axis=2), fw, axis=3)


def nearest_resize(x: np.ndarray, size) -> np.ndarray:
    x = as_tensor(x)
    oh, ow = _pair(size)
    return separable_apply(x, resize_matrix(x.shape[2], oh), resize_matrix(x.shape[3], ow))


def linear(x_flat: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Fully connected layer: (n, f_in) @ W.T + b with W of shape (f_out, f_in)."""
    x_flat = np.asarray(x_flat, dtype=DTYPE)
    if x_flat.ndim != 2 or x_flat.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x_flat.shape} incompatible with weight {weight.shape}")
    out = x_flat @ weight.T
    if bias is not None:
        out = out + bias
    return check_finite(out.astype(DTYPE, copy=False), "linear")


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)
