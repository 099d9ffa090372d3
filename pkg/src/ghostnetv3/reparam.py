"""Multi-branch re-parameterizable convolutions and their exact folding.

A :class:`RepBranchSet` is a group of parallel linear branches, each a
convolution followed by its own batch norm, whose outputs are summed. Any
activation is applied by the caller *after* the sum, which is what makes the
set collapsible at inference time:

1. every (conv, bn) branch is folded into a single conv with bias,
2. 1x1 branches are zero-padded to the k x k kernel size,
3. the aligned kernels and biases are summed.

The result is one :class:`FoldedConv` whose output equals the multi-branch
output computed with running statistics.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .nn import Layer, backward_batchnorm_train, backward_conv2d
from .tensor import (
    DTYPE,
    BatchNormParams,
    ConvKernel,
    ShapeError,
    as_tensor,
    batchnorm_infer,
    batchnorm_train,
    conv2d,
)


class FoldedConv(ConvKernel):
    """A convolution with a mandatory bias, produced by folding."""

    def __post_init__(self):
        if self.bias is None:
            self.bias = np.zeros(np.shape(self.weight)[0], dtype=DTYPE)
        super().__post_init__()
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ValueError("folded conv has non-finite entries")

    @classmethod
    def from_kernel(cls, k: ConvKernel) -> "FoldedConv":
        return cls(k.weight, k.bias, k.stride, k.padding, k.groups)


@dataclass
class RepBranch:
    """One (conv, bn) branch. ``conv is None`` marks a BN-only identity branch."""

    conv: Optional[ConvKernel]
    bn: BatchNormParams

    @property
    def kernel_size(self) -> int:
        return 1 if self.conv is None else self.conv.kernel_size[0]

    @property
    def is_identity(self) -> bool:
        return self.conv is None


@dataclass
class RepBranchSet:
    """Parallel conv+BN branches sharing one logical layer.

    The first ``n_main`` branches are k x k; then an optional 1x1 branch
    (only allowed on depthwise layers), then an optional identity branch
    (only allowed when stride is 1 and c_in == c_out).
    """

    branches: List[RepBranch]
    n_main: int
    include_1x1_dw: bool = False
    include_identity: bool = False

    def __post_init__(self):
        if self.n_main < 1:
            raise ValueError("n_main must be >= 1")
        expected = self.n_main + int(self.include_1x1_dw) + int(self.include_identity)
        if len(self.branches) != expected:
            raise ShapeError(f"expected {expected} branches, got {len(self.branches)}")
        ref = self.branches[0].conv
        if ref is None:
            raise ShapeError("first branch must be a convolution")
        k = ref.kernel_size
        if k[0] % 2 == 0 or k[1] % 2 == 0:
            raise ShapeError(f"main kernel must have odd sizes, got {k}")
        for i, br in enumerate(self.branches):
            if br.bn.channels != ref.c_out:
                raise ShapeError(f"branch {i}: bn has {br.bn.channels} channels, expected {ref.c_out}")
            if br.conv is None:
                continue
            c = br.conv
            if (c.c_in, c.c_out, c.stride, c.groups) != (ref.c_in, ref.c_out, ref.stride, ref.groups):
                raise ShapeError(f"branch {i} disagrees with branch 0 on c_in/c_out/stride/groups")
            kh, kw = c.kernel_size
            if c.padding != ((kh - 1) // 2, (kw - 1) // 2):
                raise ShapeError(f"branch {i}: {c.kernel_size} kernel needs padding {((kh - 1) // 2, (kw - 1) // 2)}")
            if i < self.n_main and c.kernel_size != k:
                raise ShapeError(f"main branch {i} has kernel {c.kernel_size}, expected {k}")
        if (self.include_1x1_dw or self.include_identity) and k[0] != k[1]:
            raise ShapeError("extra 1x1 / identity branches need a square main kernel")
        if self.include_1x1_dw:
            one = self.branches[self.n_main].conv
            if one is None or one.kernel_size != (1, 1):
                raise ShapeError("the branch after the main branches must be 1x1")
            if not ref.is_depthwise:
                raise ShapeError("a 1x1 branch is only supported on depthwise layers")
            if k == (1, 1):
                raise ShapeError("a 1x1 branch on a 1x1 layer is just another main branch")
        if self.include_identity:
            if not self.branches[-1].is_identity:
                raise ShapeError("last branch must be the identity branch")
            if ref.stride != (1, 1) or ref.c_in != ref.c_out:
                raise ShapeError("identity branch needs stride 1 and c_in == c_out")
        elif any(b.is_identity for b in self.branches):
            raise ShapeError("identity branch present but include_identity is False")

    @property
    def main(self) -> ConvKernel:
        return self.branches[0].conv

    @property
    def c_in(self) -> int:
        return self.main.c_in

    @property
    def c_out(self) -> int:
        return self.main.c_out

    @property
    def kernel_size(self):
        return self.main.kernel_size

    @property
    def stride(self):
        return self.main.stride

    @property
    def groups(self) -> int:
        return self.main.groups

    @classmethod
    def create(cls, c_in: int, c_out: int, kernel_size, stride: int = 1, groups: int = 1,
               n_main: int = 3, include_1x1_dw: bool = False, include_identity: bool = False,
               rng: Optional[np.random.Generator] = None, bn_momentum: float = 0.1,
               bn_eps: float = 1e-5) -> "RepBranchSet":
        """Build a freshly initialised set (Kaiming-normal weights, unit BN)."""
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = (kernel_size, kernel_size) if np.isscalar(kernel_size) else kernel_size

        def branch(kh, kw):
            fan_in = (c_in // groups) * kh * kw
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, c_in // groups, kh, kw))
            conv = ConvKernel(w, None, stride, ((kh - 1) // 2, (kw - 1) // 2), groups)
            return RepBranch(conv, BatchNormParams.identity(c_out, bn_eps, bn_momentum))

        branches = [branch(kh, kw) for _ in range(n_main)]
        if include_1x1_dw:
            branches.append(branch(1, 1))
        if include_identity:
            branches.append(RepBranch(None, BatchNormParams.identity(c_out, bn_eps, bn_momentum)))
        return cls(branches, n_main, include_1x1_dw, include_identity)

    def param_count(self) -> int:
        total = 0
        for b in self.branches:
            if b.conv is not None:
                total += b.conv.weight.size + (0 if b.conv.bias is None else b.conv.bias.size)
            total += b.bn.gamma.size + b.bn.beta.size
        return total


# ---------------------------------------------------------------------------
# forward


def _branch_forward(br: RepBranch, x: np.ndarray, mode: str) -> np.ndarray:
    y = x if br.conv is None else conv2d(x, br.conv)
    if mode == "infer":
        return batchnorm_infer(y, br.bn)
    return batchnorm_train(y, br.bn)[0]


def forward_multibranch(s: RepBranchSet, x: np.ndarray, mode: str = "infer") -> np.ndarray:
    """Sum of bn(conv(x)) over all branches, no activation.

    ``mode="train"`` normalises with batch statistics (running stats are not
    touched here; :class:`RepConv` owns that state); ``"infer"`` uses running
    statistics.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = as_tensor(x)
    if x.shape[1] != s.c_in:
        raise ShapeError(f"input has {x.shape[1]} channels, set expects {s.c_in}")
    out = _branch_forward(s.branches[0], x, mode)
    for br in s.branches[1:]:
        y = _branch_forward(br, x, mode)
        if y.shape != out.shape:
            raise ShapeError(f"branch output {y.shape} disagrees with {out.shape}")
        out += y
    return out


# ---------------------------------------------------------------------------
# folding


def fold_conv_bn(conv: ConvKernel, bn: BatchNormParams) -> FoldedConv:
    """Absorb inference-mode batch norm into the preceding convolution.

    W' = W * gamma / sqrt(var + eps) per output channel, and
    b' = (b - mean) * gamma / sqrt(var + eps) + beta.
    """
    if bn.channels != conv.c_out:
        raise ShapeError(f"bn has {bn.channels} channels, conv has {conv.c_out} outputs")
    denom = bn.running_var.astype(np.float64) + bn.eps
    if np.any(denom <= 0):
        raise ValueError("running_var + eps must be positive to fold")
    t = bn.gamma.astype(np.float64) / np.sqrt(denom)
    b = np.zeros(conv.c_out) if conv.bias is None else conv.bias.astype(np.float64)
    w = conv.weight.astype(np.float64) * t[:, None, None, None]
    bias = (b - bn.running_mean) * t + bn.beta
    return FoldedConv(w.astype(DTYPE), bias.astype(DTYPE), conv.stride, conv.padding, conv.groups)


def identity_kernel(channels: int, groups: int, kernel_size: int = 1) -> ConvKernel:
    """Conv that reproduces its input: a centred unit tap per channel."""
    cin_g = channels // groups
    w = np.zeros((channels, cin_g, kernel_size, kernel_size), dtype=DTYPE)
    c = kernel_size // 2
    w[np.arange(channels), np.arange(channels) % cin_g, c, c] = 1.0
    return ConvKernel(w, None, 1, c, groups)


def embed_kernel(small: FoldedConv, target_k: int) -> FoldedConv:
    """Zero-pad a k' x k' kernel to target_k x target_k, tap centred.

    Padding grows by (target_k - k') / 2 so outputs stay aligned at any stride.
    """
    kh, kw = small.kernel_size
    if target_k % 2 == 0:
        raise ValueError(f"target kernel size must be odd, got {target_k}")
    if kh != kw or target_k < kh or (target_k - kh) % 2:
        raise ValueError(f"cannot embed a {kh}x{kw} kernel into {target_k}x{target_k}")
    off = (target_k - kh) // 2
    w = np.zeros(small.weight.shape[:2] + (target_k, target_k), dtype=DTYPE)
    w[:, :, off:off + kh, off:off + kw] = small.weight
    ph, pw = small.padding
    return FoldedConv(w, small.bias.copy(), small.stride, (ph + off, pw + off), small.groups)


def merge_branches(folded: Sequence[FoldedConv]) -> FoldedConv:
    """Elementwise sum of aligned folded convs: one kernel, one bias."""
    if not folded:
        raise ValueError("need at least one folded conv")
    ref = folded[0]
    w = ref.weight.copy()
    b = ref.bias.copy()
    for f in folded[1:]:
        if (f.weight.shape, f.stride, f.padding, f.groups) != (ref.weight.shape, ref.stride, ref.padding, ref.groups):
            raise ShapeError("cannot merge folded convs with different geometry")
        w += f.weight
        b += f.bias
    return FoldedConv(w, b, ref.stride, ref.padding, ref.groups)


def reparameterize(s: RepBranchSet) -> FoldedConv:
    """Collapse a branch set into a single equivalent convolution."""
    k = s.kernel_size
    parts = []
    for br in s.branches:
        conv = br.conv if br.conv is not None else identity_kernel(s.c_out, s.groups, 1)
        f = fold_conv_bn(conv, br.bn)
        if f.kernel_size != k:
            f = embed_kernel(f, k[0])
        parts.append(f)
    return merge_branches(parts)


# ---------------------------------------------------------------------------
# trainable layer


class RepConv(Layer):
    """Trainable wrapper around a :class:`RepBranchSet`, or its folded form.

    Parameter names: ``b{i}.weight``, ``b{i}.gamma``, ``b{i}.beta`` (and
    ``b{i}.running_mean`` / ``b{i}.running_var`` buffers) per branch before
    folding; ``weight`` / ``bias`` after.
    """

    def __init__(self, branch_set: Optional[RepBranchSet] = None, folded: Optional[FoldedConv] = None):
        if (branch_set is None) == (folded is None):
            raise ValueError("give exactly one of branch_set or folded")
        self.set = branch_set
        self.folded = folded
        self.grads: Dict[str, np.ndarray] = {}
        self._cache = None

    @classmethod
    def create(cls, *args, **kwargs) -> "RepConv":
        return cls(RepBranchSet.create(*args, **kwargs))

    @property
    def is_folded(self) -> bool:
        return self.folded is not None

    @property
    def geometry(self) -> ConvKernel:
        return self.folded if self.is_folded else self.set.main

    @property
    def c_out(self) -> int:
        return self.geometry.c_out

    def params(self):
        if self.is_folded:
            return {"weight": self.folded.weight, "bias": self.folded.bias}
        out = {}
        for i, br in enumerate(self.set.branches):
            if br.conv is not None:
                out[f"b{i}.weight"] = br.conv.weight
                if br.conv.bias is not None:
                    out[f"b{i}.bias"] = br.conv.bias
            out[f"b{i}.gamma"] = br.bn.gamma
            out[f"b{i}.beta"] = br.bn.beta
        return out

    def buffers(self):
        if self.is_folded:
            return {}
        out = {}
        for i, br in enumerate(self.set.branches):
            out[f"b{i}.running_mean"] = br.bn.running_mean
            out[f"b{i}.running_var"] = br.bn.running_var
        return out

    def fold(self) -> "RepConv":
        """Return a folded copy; folding a folded layer returns an equal copy."""
        if self.is_folded:
            f = self.folded
            return RepConv(folded=FoldedConv(f.weight.copy(), f.bias.copy(), f.stride, f.padding, f.groups))
        return RepConv(folded=reparameterize(self.set))

    def forward(self, x, train=False):
        if self.is_folded:
            if train:
                raise RuntimeError("folded layers are inference-only")
            return conv2d(x, self.folded)
        if not train:
            return forward_multibranch(self.set, x, "infer")
        out = None
        caches = []
        for br in self.set.branches:
            y = x if br.conv is None else conv2d(x, br.conv)
            z, new_bn, bn_cache = batchnorm_train(y, br.bn)
            br.bn.running_mean[...] = new_bn.running_mean
            br.bn.running_var[...] = new_bn.running_var
            caches.append(bn_cache)
            out = z if out is None else out + z
        self._cache = (x, caches)
        return out

    def backward(self, d_out):
        x, caches = self._cache
        dx = None
        grads = {}
        for i, (br, cache) in enumerate(zip(self.set.branches, caches)):
            g_bn = backward_batchnorm_train(d_out, br.bn, cache)
            grads[f"b{i}.gamma"] = g_bn.d_params["gamma"]
            grads[f"b{i}.beta"] = g_bn.d_params["beta"]
            if br.conv is None:
                d = g_bn.d_input
            else:
                g_conv = backward_conv2d(x, br.conv, g_bn.d_input)
                grads[f"b{i}.weight"] = g_conv.d_params["weight"]
                if "bias" in g_conv.d_params:
                    grads[f"b{i}.bias"] = g_conv.d_params["bias"]
                d = g_conv.d_input
            dx = d if dx is None else dx + d
        self.grads = grads
        self._cache = None
        return dx
