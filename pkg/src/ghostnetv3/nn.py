"""Backward passes for the primitives in :mod:`ghostnetv3.tensor`.

Each ``backward_*`` takes the forward inputs (or the cache the forward
returned) plus the upstream gradient and returns the gradient with respect to
the input and to every parameter. There is no tape: callers chain these by
hand.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from . import _kernels
from .tensor import (
    DTYPE,
    BatchNormParams,
    ConvKernel,
    ShapeError,
    _pad,
    col2im,
    im2col,
    linear,
    log_softmax,
    relu,
    softmax,
)


@dataclass
class LayerGrad:
    d_input: np.ndarray
    d_params: Dict[str, np.ndarray] = field(default_factory=dict)


def _expect(shape, got, what):
    if tuple(shape) != tuple(got):
        raise ShapeError(f"{what}: upstream gradient shape {tuple(got)} != forward output {tuple(shape)}")


def backward_conv2d(x: np.ndarray, k: ConvKernel, d_out: np.ndarray) -> LayerGrad:
    """Gradients of :func:`~ghostnetv3.tensor.conv2d` w.r.t. input, weight and bias."""
    n, c, h, w = x.shape
    oh, ow = k.output_hw(h, w)
    _expect((n, k.c_out, oh, ow), d_out.shape, "conv2d")
    kh, kw = k.kernel_size
    (sh, sw), (ph, pw) = k.stride, k.padding
    g = k.groups
    xp = _pad(x, ph, pw)
    hs, ws = sh * (oh - 1) + 1, sw * (ow - 1) + 1

    if k.is_depthwise and g > 1 and _kernels.HAVE_NUMBA:
        dxp = np.zeros(xp.shape, dtype=DTYPE)
        dw = np.zeros(k.weight.shape, dtype=DTYPE)
        _kernels.dw_backward(xp, np.ascontiguousarray(k.weight[:, 0]), np.ascontiguousarray(d_out, dtype=DTYPE),
                             dxp, dw[:, 0], sh, sw)
    elif k.is_depthwise and g > 1:
        dw = np.empty_like(k.weight)
        dxp = np.zeros(xp.shape, dtype=DTYPE)
        w0 = k.weight[:, 0]
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + hs:sh, j:j + ws:sw]
                dw[:, 0, i, j] = np.einsum("nchw,nchw->c", patch, d_out)
                dxp[:, :, i:i + hs:sh, j:j + ws:sw] += d_out * w0[:, i, j, None, None]
    else:
        cin_g, cout_g = c // g, k.c_out // g
        cols = im2col(xp, kh, kw, sh, sw, oh, ow).reshape(n, g, cin_g * kh * kw, oh * ow)
        dy = d_out.reshape(n, g, cout_g, oh * ow)
        dw = np.empty((g, cout_g, cin_g * kh * kw), dtype=DTYPE)
        for gi in range(g):
            dw[gi] = np.tensordot(dy[:, gi], cols[:, gi], axes=([0, 2], [0, 2]))
        dw = dw.reshape(k.weight.shape)
        wmat = k.weight.reshape(g, cout_g, cin_g * kh * kw)
        dcols = np.matmul(wmat.transpose(0, 2, 1), dy)
        dxp = col2im(dcols.reshape(n, c, kh, kw, oh, ow), xp.shape, sh, sw)

    dx = dxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dxp
    grads = {"weight": dw.astype(DTYPE, copy=False)}
    if k.bias is not None:
        grads["bias"] = d_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(DTYPE)
    return LayerGrad(np.ascontiguousarray(dx, dtype=DTYPE), grads)


def backward_batchnorm_train(d_out: np.ndarray, p: BatchNormParams, cache) -> LayerGrad:
    """Gradient of training-mode batch norm; ``cache`` is what ``batchnorm_train`` returned."""
    xhat, inv_std = cache
    _expect(xhat.shape, d_out.shape, "batchnorm")
    m = d_out.shape[0] * d_out.shape[2] * d_out.shape[3]
    if _kernels.HAVE_NUMBA:
        dx = np.empty_like(xhat)
        d_gamma, d_beta = np.empty(xhat.shape[1]), np.empty(xhat.shape[1])
        _kernels.bn_train_backward(np.ascontiguousarray(d_out, dtype=DTYPE), xhat, p.gamma, inv_std,
                                   dx, d_gamma, d_beta)
    else:
        d_beta = d_out.sum(axis=(0, 2, 3), dtype=np.float64)
        d_gamma = np.einsum("nchw,nchw->c", d_out, xhat, dtype=np.float64)
        scale = (p.gamma * inv_std / m).astype(DTYPE)
        dx = scale[None, :, None, None] * (
            m * d_out
            - d_beta.astype(DTYPE)[None, :, None, None]
            - xhat * d_gamma.astype(DTYPE)[None, :, None, None]
        )
    return LayerGrad(dx.astype(DTYPE, copy=False),
                     {"gamma": d_gamma.astype(DTYPE), "beta": d_beta.astype(DTYPE)})


def backward_relu(x: np.ndarray, d_out: np.ndarray) -> LayerGrad:
    _expect(x.shape, d_out.shape, "relu")
    return LayerGrad(np.where(x > 0, d_out, DTYPE(0)).astype(DTYPE, copy=False))


def backward_sigmoid(y: np.ndarray, d_out: np.ndarray) -> LayerGrad:
    """Gradient of the sigmoid given its *output* ``y``."""
    _expect(y.shape, d_out.shape, "sigmoid")
    return LayerGrad((d_out * y * (1 - y)).astype(DTYPE, copy=False))


def backward_linear(x_flat: np.ndarray, weight: np.ndarray, d_out: np.ndarray, has_bias: bool = True) -> LayerGrad:
    _expect((x_flat.shape[0], weight.shape[0]), d_out.shape, "linear")
    grads = {"weight": (d_out.T @ x_flat).astype(DTYPE)}
    if has_bias:
        grads["bias"] = d_out.sum(axis=0).astype(DTYPE)
    return LayerGrad((d_out @ weight).astype(DTYPE), grads)


def backward_separable(d_out: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> LayerGrad:
    """Backward of ``separable_apply`` (pooling / nearest resize): mh.T @ d @ mw."""
    return LayerGrad(np.ascontiguousarray(np.matmul(np.matmul(mh.T, d_out), mw), dtype=DTYPE))


def backward_global_avg_pool(x_shape, d_out: np.ndarray) -> LayerGrad:
    n, c, h, w = x_shape
    _expect((n, c, 1, 1), d_out.shape, "global_avg_pool")
    return LayerGrad(np.broadcast_to(d_out / DTYPE(h * w), x_shape).astype(DTYPE))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=DTYPE)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _as_target(target, logits: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    if target.ndim == 1:
        return one_hot(target.astype(np.int64), logits.shape[1])
    if target.shape != logits.shape:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    return target.astype(DTYPE, copy=False)


def softmax_ce(logits: np.ndarray, target) -> float:
    """Mean cross-entropy; ``target`` is integer labels or per-row class weights."""
    t = _as_target(target, logits)
    return float(-(t * log_softmax(logits.astype(np.float64), axis=1)).sum(axis=1).mean())


def backward_softmax_ce(logits: np.ndarray, target) -> np.ndarray:
    """d(mean CE)/d(logits) = (softmax(logits) - target) / batch."""
    t = _as_target(target, logits)
    return ((softmax(logits, axis=1) - t) / logits.shape[0]).astype(DTYPE)


# ---------------------------------------------------------------------------
# stateful layer wrappers


class Layer:
    """Base for layers with a hand-written backward.

    ``forward(x, train)`` caches whatever ``backward`` needs when ``train`` is
    true. Parameters and buffers are exposed by name; the optimizer updates the
    parameter arrays in place, so their identity must never change.
    """

    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def children(self) -> Dict[str, "Layer"]:
        return {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.forward(x, train)

    def named_parameters(self, prefix: str = ""):
        for name, arr in self.params().items():
            yield prefix + name, arr
        for cname, child in self.children().items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = ""):
        for name, arr in self.buffers().items():
            yield prefix + name, arr
        for cname, child in self.children().items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def named_grads(self, prefix: str = ""):
        for name, arr in getattr(self, "grads", {}).items():
            yield prefix + name, arr
        for cname, child in self.children().items():
            yield from child.named_grads(f"{prefix}{cname}.")

    def modules(self):
        yield self
        for child in self.children().values():
            yield from child.modules()


class ReLU(Layer):
    def forward(self, x, train=False):
        if train:
            self._x = x
        return relu(x)

    def backward(self, d_out):
        return backward_relu(self._x, d_out).d_input


class Linear(Layer):
    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight, dtype=DTYPE)
        self.bias = np.asarray(bias, dtype=DTYPE)
        self.grads: Dict[str, np.ndarray] = {}

    @classmethod
    def init(cls, f_in: int, f_out: int, rng: np.random.Generator) -> "Linear":
        return cls(rng.normal(0.0, 0.01, (f_out, f_in)), np.zeros(f_out))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, train=False):
        flat = x.reshape(x.shape[0], -1)
        if train:
            self._x, self._shape = flat, x.shape
        return linear(flat, self.weight, self.bias)

    def backward(self, d_out):
        g = backward_linear(self._x, self.weight, d_out)
        self.grads = g.d_params
        return g.d_input.reshape(self._shape)
