"""Ghost modules, DFC attention and GhostNetV3-style models.

Every convolution in a model is a :class:`~ghostnetv3.reparam.RepConv`. The
ones that are re-parameterized during training (ghost primary 1x1, ghost cheap
depthwise, bottleneck depthwise) get ``rep_branches`` parallel branches and,
for depthwise k x k layers, an extra 1x1 depthwise branch; all others are a
single conv+BN. :func:`fold_model` collapses every one of them to a plain conv.

The stage tables here are reconstructions in the GhostNet family layout, not
published GhostNetV3 dimensions.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .nn import (
    Layer,
    Linear,
    ReLU,
    backward_global_avg_pool,
    backward_separable,
    backward_sigmoid,
)
from .reparam import FoldedConv, RepBranchSet, RepConv
from .tensor import (
    ConvKernel,
    ShapeError,
    as_tensor,
    concat_channels,
    global_avg_pool,
    pool_matrix,
    resize_matrix,
    separable_apply,
    sigmoid,
)

WIDTH_MULTIPLIERS = (0.5, 1.0, 1.3, 1.6)


def round_channels(c: float, divisor: int = 4) -> int:
    """Round to the nearest multiple of ``divisor`` (ties up), never below it."""
    return max(divisor, int(math.floor(c / divisor + 0.5)) * divisor)


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class BottleneckSpec:
    kernel: int
    expansion: int
    out: int
    stride: int = 1
    attention: bool = False

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture plus re-parameterization settings.

    ``stages`` holds un-scaled channel counts; ``width`` is applied when the
    model is built. ``cheap_on_input`` selects the literal ``Cat(Y', X * W_c)``
    ghost variant, and ``gate_position`` chooses whether the DFC gate scales the
    concatenated output (``"output"``) or only the intrinsic features before the
    cheap op (``"intrinsic"``).
    """

    stages: Tuple[Tuple[BottleneckSpec, ...], ...]
    stem_channels: int = 16
    final_channels: int = 64
    head_channels: int = 0
    num_classes: int = 10
    in_channels: int = 3
    width: float = 1.0
    stem_stride: int = 2
    ghost_ratio: int = 2
    rep_branches: int = 3
    rep_1x1: bool = True
    rep_identity: bool = False
    dfc_kernel: int = 5
    cheap_on_input: bool = False
    gate_position: str = "output"
    name: str = "custom"

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("width multiplier must be positive")
        if self.rep_branches < 1:
            raise ValueError("rep_branches must be >= 1")
        if self.gate_position not in ("output", "intrinsic"):
            raise ValueError(f"unknown gate_position {self.gate_position!r}")
        if self.ghost_ratio < 2:
            raise ValueError("ghost_ratio must be >= 2")

    def ch(self, c: int) -> int:
        return round_channels(c * self.width)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [[asdict(b) for b in st] for st in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["stages"] = tuple(tuple(BottleneckSpec(**b) for b in st) for st in d["stages"])
        return cls(**d)

    def with_(self, **kw) -> "ModelSpec":
        return replace(self, **kw)


def mini_spec(width: float = 1.0, num_classes: int = 10, **kw) -> ModelSpec:
    """Desk-scale spec: 4 stages, at most 64 channels, for 32x32 inputs."""
    stages = (
        (BottleneckSpec(3, 16, 16, 1, False),),
        (BottleneckSpec(3, 48, 24, 2, False),),
        (BottleneckSpec(5, 64, 32, 2, True),),
        (BottleneckSpec(3, 64, 64, 2, True),),
    )
    return ModelSpec(stages, stem_channels=16, final_channels=64, num_classes=num_classes,
                     width=width, name="mini", **kw)


def full_spec(width: float = 1.0, num_classes: int = 1000, **kw) -> ModelSpec:
    """GhostNet-family layout for 224x224 inputs (reconstruction; no SE blocks)."""
    rows = [
        # k, exp, out, stride
        [(3, 16, 16, 1)],
        [(3, 48, 24, 2)],
        [(3, 72, 24, 1)],
        [(5, 72, 40, 2)],
        [(5, 120, 40, 1)],
        [(3, 240, 80, 2)],
        [(3, 200, 80, 1), (3, 184, 80, 1), (3, 184, 80, 1), (3, 480, 112, 1), (3, 672, 112, 1)],
        [(5, 672, 160, 2)],
        [(5, 960, 160, 1), (5, 960, 160, 1), (5, 960, 160, 1), (5, 960, 160, 1)],
    ]
    stages, idx = [], 0
    for row in rows:
        st = []
        for k, e, o, s in row:
            st.append(BottleneckSpec(k, e, o, s, attention=idx > 1))
            idx += 1
        stages.append(tuple(st))
    return ModelSpec(tuple(stages), stem_channels=16, final_channels=960, head_channels=1280,
                     num_classes=num_classes, width=width, name="full", **kw)


# ---------------------------------------------------------------------------
# layers


def _conv_flops(k: ConvKernel, shape) -> Tuple[int, tuple]:
    n, _, h, w = shape
    oh, ow = k.output_hw(h, w)
    kh, kw = k.kernel_size
    return n * k.c_out * (k.c_in // k.groups) * kh * kw * oh * ow, (n, k.c_out, oh, ow)


def rep_flops(layer: RepConv, shape) -> Tuple[int, tuple]:
    """Multiply-accumulates of every conv branch (identity branches are free)."""
    if layer.is_folded:
        return _conv_flops(layer.folded, shape)
    total, out = 0, None
    for br in layer.set.branches:
        if br.conv is None:
            continue
        f, out = _conv_flops(br.conv, shape)
        total += f
    return total, out


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def children(self):
        return {str(i): l for i, l in enumerate(self.layers)}

    def replace_child(self, name, new):
        self.layers[int(name)] = new

    def forward(self, x, train=False):
        for l in self.layers:
            x = l.forward(x, train)
        return x

    def backward(self, d_out):
        for l in reversed(self.layers):
            d_out = l.backward(d_out)
        return d_out

    def flops(self, shape):
        total = 0
        for l in self.layers:
            f, shape = layer_flops(l, shape)
            total += f
        return total, shape


def layer_flops(layer: Layer, shape) -> Tuple[int, tuple]:
    if isinstance(layer, RepConv):
        return rep_flops(layer, shape)
    if isinstance(layer, ReLU):
        return 0, shape
    return layer.flops(shape)


class DFCAttention(Layer):
    """Decoupled fully-connected attention gate.

    avg-pool /2 -> 1x1 conv+BN -> (1 x k) depthwise conv+BN -> (k x 1)
    depthwise conv+BN -> sigmoid -> nearest resize back to the input size.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int = 5, rng=None):
        self.reduce = RepConv.create(c_in, c_out, 1, rng=rng, n_main=1)
        self.horizontal = RepConv.create(c_out, c_out, (1, kernel), groups=c_out, rng=rng, n_main=1)
        self.vertical = RepConv.create(c_out, c_out, (kernel, 1), groups=c_out, rng=rng, n_main=1)

    def children(self):
        return {"reduce": self.reduce, "horizontal": self.horizontal, "vertical": self.vertical}

    def replace_child(self, name, new):
        setattr(self, name, new)

    def _mats(self, h, w):
        ph, pw = pool_matrix(h, 2, 2), pool_matrix(w, 2, 2)
        return ph, pw, resize_matrix(ph.shape[0], h), resize_matrix(pw.shape[0], w)

    def forward(self, x, train=False):
        h, w = x.shape[2:]
        if h < 2 or w < 2:
            raise ShapeError(f"DFC attention needs spatial size >= 2, got {(h, w)}")
        ph, pw, rh, rw = self._mats(h, w)
        z = separable_apply(x, ph, pw)
        z = self.reduce.forward(z, train)
        z = self.horizontal.forward(z, train)
        z = self.vertical.forward(z, train)
        s = sigmoid(z)
        if train:
            self._cache = (s, ph, pw, rh, rw)
        return separable_apply(s, rh, rw)

    def backward(self, d_out):
        s, ph, pw, rh, rw = self._cache
        d = backward_separable(d_out, rh, rw).d_input
        d = backward_sigmoid(s, d).d_input
        d = self.vertical.backward(d)
        d = self.horizontal.backward(d)
        d = self.reduce.backward(d)
        return backward_separable(d, ph, pw).d_input

    def flops(self, shape):
        n, c, h, w = shape
        pooled = (n, c, (h - 2) // 2 + 1, (w - 2) // 2 + 1)
        total = 0
        for l in (self.reduce, self.horizontal, self.vertical):
            f, pooled = rep_flops(l, pooled)
            total += f
        return total, (n, pooled[1], h, w)


class GhostModule(Layer):
    """Primary conv to intrinsic channels, cheap depthwise op to ghost channels, concat.

    With ratio r the primary conv produces ceil(c_out / r) channels and the
    cheap op (r - 1) times that; the concatenation is cut to c_out.
    """

    def __init__(self, c_in: int, c_out: int, relu: bool = True, attention: bool = False,
                 spec: Optional[ModelSpec] = None, primary_kernel: int = 1, cheap_kernel: int = 3,
                 rng=None):
        spec = spec if spec is not None else mini_spec()
        self.c_in, self.c_out, self.relu = c_in, c_out, relu
        self.init_ch = math.ceil(c_out / spec.ghost_ratio)
        self.ghost_ch = self.init_ch * (spec.ghost_ratio - 1)
        self.cheap_on_input = spec.cheap_on_input
        self.gate_position = spec.gate_position
        n = spec.rep_branches
        self.primary = RepConv.create(c_in, self.init_ch, primary_kernel, rng=rng, n_main=n)
        src = c_in if self.cheap_on_input else self.init_ch
        groups = math.gcd(src, self.ghost_ch)
        depthwise = groups == src == self.ghost_ch
        self.cheap = RepConv.create(src, self.ghost_ch, cheap_kernel, groups=groups, rng=rng, n_main=n,
                                    include_1x1_dw=spec.rep_1x1 and depthwise and cheap_kernel > 1,
                                    include_identity=spec.rep_identity and depthwise)
        self.act1 = ReLU() if relu else None
        self.act2 = ReLU() if relu else None
        self.attention = None
        if attention:
            gate_ch = c_out if self.gate_position == "output" else self.init_ch
            self.attention = DFCAttention(c_in, gate_ch, spec.dfc_kernel, rng=rng)

    def children(self):
        out = {"primary": self.primary, "cheap": self.cheap}
        if self.attention is not None:
            out["attention"] = self.attention
        return out

    def replace_child(self, name, new):
        setattr(self, name, new)

    def forward(self, x, train=False):
        x = as_tensor(x)
        if x.shape[1] != self.c_in:
            raise ShapeError(f"ghost module expects {self.c_in} channels, got {x.shape[1]}")
        gate = self.attention.forward(x, train) if self.attention is not None else None
        y1 = self.primary.forward(x, train)
        if self.act1:
            y1 = self.act1.forward(y1, train)
        if gate is not None and self.gate_position == "intrinsic":
            pre_gate1 = y1
            y1 = y1 * gate
        y2 = self.cheap.forward(x if self.cheap_on_input else y1, train)
        if self.act2:
            y2 = self.act2.forward(y2, train)
        out = concat_channels(y1, y2)[:, :self.c_out]
        if gate is not None and self.gate_position == "output":
            if train:
                self._cache = (out, gate)
            out = out * gate
        elif gate is not None and train:
            self._cache = (pre_gate1, gate)
        return out

    def backward(self, d_out):
        d_gate = None
        if self.attention is not None and self.gate_position == "output":
            pre, gate = self._cache
            d_gate = (d_out * pre)
            d_out = d_out * gate
        n, _, h, w = d_out.shape
        d_cat = np.zeros((n, self.init_ch + self.ghost_ch, h, w), dtype=d_out.dtype)
        d_cat[:, :self.c_out] = d_out
        d_y1 = d_cat[:, :self.init_ch]
        d_y2 = d_cat[:, self.init_ch:]
        if self.act2:
            d_y2 = self.act2.backward(d_y2)
        d_src = self.cheap.backward(np.ascontiguousarray(d_y2))
        if self.cheap_on_input:
            dx_cheap = d_src
        else:
            d_y1 = d_y1 + d_src
            dx_cheap = None
        if self.attention is not None and self.gate_position == "intrinsic":
            pre1, gate = self._cache
            d_gate = d_y1 * pre1
            d_y1 = d_y1 * gate
        if self.act1:
            d_y1 = self.act1.backward(d_y1)
        dx = self.primary.backward(np.ascontiguousarray(d_y1))
        if dx_cheap is not None:
            dx = dx + dx_cheap
        if d_gate is not None:
            dx = dx + self.attention.backward(d_gate)
        return dx

    def flops(self, shape):
        n, _, h, w = shape
        total, s1 = rep_flops(self.primary, shape)
        f, _ = rep_flops(self.cheap, shape if self.cheap_on_input else s1)
        total += f
        if self.attention is not None:
            total += self.attention.flops(shape)[0]
        return total, (n, self.c_out, s1[2], s1[3])


class Bottleneck(Layer):
    """Ghost bottleneck: expand ghost (+DFC) -> depthwise k x k -> project ghost, plus shortcut."""

    def __init__(self, c_in: int, b: BottleneckSpec, spec: ModelSpec, rng=None):
        mid, out = spec.ch(b.expansion), spec.ch(b.out)
        self.c_in, self.c_out, self.stride = c_in, out, b.stride
        n = spec.rep_branches
        self.ghost1 = GhostModule(c_in, mid, relu=True, attention=b.attention, spec=spec, rng=rng)
        self.dw = RepConv.create(mid, mid, b.kernel, stride=b.stride, groups=mid, rng=rng, n_main=n,
                                 include_1x1_dw=spec.rep_1x1 and b.kernel > 1,
                                 include_identity=spec.rep_identity and b.stride == 1)
        self.ghost2 = GhostModule(mid, out, relu=False, attention=False, spec=spec, rng=rng)
        if b.stride == 1 and c_in == out:
            self.shortcut = None
        else:
            self.shortcut = Sequential([
                RepConv.create(c_in, c_in, b.kernel, stride=b.stride, groups=c_in, rng=rng, n_main=1),
                RepConv.create(c_in, out, 1, rng=rng, n_main=1),
            ])

    def children(self):
        out = {"ghost1": self.ghost1, "dw": self.dw, "ghost2": self.ghost2}
        if self.shortcut is not None:
            out["shortcut"] = self.shortcut
        return out

    def replace_child(self, name, new):
        setattr(self, name, new)

    def forward(self, x, train=False):
        y = self.ghost1.forward(x, train)
        y = self.dw.forward(y, train)
        y = self.ghost2.forward(y, train)
        res = x if self.shortcut is None else self.shortcut.forward(x, train)
        return y + res

    def backward(self, d_out):
        d = self.ghost2.backward(d_out)
        d = self.dw.backward(d)
        dx = self.ghost1.backward(d)
        return dx + (d_out if self.shortcut is None else self.shortcut.backward(d_out))

    def flops(self, shape):
        total = 0
        s = shape
        for l in (self.ghost1, self.dw, self.ghost2):
            f, s = layer_flops(l, s)
            total += f
        if self.shortcut is not None:
            total += self.shortcut.flops(shape)[0]
        return total, s


class GlobalPool(Layer):
    def forward(self, x, train=False):
        if train:
            self._shape = x.shape
        return global_avg_pool(x)

    def backward(self, d_out):
        return backward_global_avg_pool(self._shape, d_out).d_input

    def flops(self, shape):
        return 0, (shape[0], shape[1], 1, 1)


class LinearLayer(Linear):
    def flops(self, shape):
        n = shape[0]
        f_out, f_in = self.weight.shape
        return n * f_in * f_out, (n, f_out, 1, 1)


class Model(Layer):
    """A GhostNetV3-style classifier built from a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        stem = spec.ch(spec.stem_channels)
        self.stem = Sequential([
            RepConv.create(spec.in_channels, stem, 3, stride=spec.stem_stride, rng=rng, n_main=1),
            ReLU(),
        ])
        blocks, c = [], stem
        for stage in spec.stages:
            for b in stage:
                blk = Bottleneck(c, b, spec, rng=rng)
                blocks.append(blk)
                c = blk.c_out
        self.blocks = Sequential(blocks)
        final = spec.ch(spec.final_channels)
        head: List[Layer] = [RepConv.create(c, final, 1, rng=rng, n_main=1), ReLU(), GlobalPool()]
        feat = final
        if spec.head_channels:
            head += [LinearLayer.init(feat, spec.head_channels, rng), ReLU()]
            feat = spec.head_channels
        head.append(LinearLayer.init(feat, spec.num_classes, rng))
        self.head = Sequential(head)

    def children(self):
        return {"stem": self.stem, "blocks": self.blocks, "head": self.head}

    def replace_child(self, name, new):
        setattr(self, name, new)

    @property
    def folded(self) -> bool:
        return all(m.is_folded for m in self.modules() if isinstance(m, RepConv))

    def forward(self, x, train=False):
        if train and self.folded:
            raise RuntimeError("a folded model cannot be trained")
        x = as_tensor(x)
        x = self.stem.forward(x, train)
        x = self.blocks.forward(x, train)
        return self.head.forward(x, train).reshape(x.shape[0], -1)

    def backward(self, d_logits):
        d = self.head.backward(d_logits)
        d = self.blocks.backward(d)
        return self.stem.backward(d)

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        return np.concatenate([self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])

    def flops(self, shape):
        total = 0
        for part in (self.stem, self.blocks, self.head):
            f, shape = part.flops(shape)
            total += f
        return total, shape

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters and buffers by name (live references, not copies)."""
        out = dict(self.named_parameters())
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        mine = self.state_dict()
        if set(mine) != set(state):
            missing, extra = set(mine) - set(state), set(state) - set(mine)
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, arr in mine.items():
            if arr.shape != state[k].shape:
                raise ShapeError(f"{k}: shape {state[k].shape} != {arr.shape}")
            arr[...] = state[k]


# ---------------------------------------------------------------------------
# model-level operations


def ghost_module_forward(x: np.ndarray, module: GhostModule, mode: str = "infer") -> np.ndarray:
    return module.forward(x, train=(mode == "train"))


def dfc_attention(x: np.ndarray, attn: DFCAttention) -> np.ndarray:
    return attn.forward(x, train=False)


def bottleneck_forward(x: np.ndarray, block: Bottleneck, mode: str = "infer") -> np.ndarray:
    return block.forward(x, train=(mode == "train"))


def build_model(spec: ModelSpec, seed: int = 0, folded: bool = False) -> Model:
    m = Model(spec, np.random.default_rng(seed))
    return fold_model(m) if folded else m


def _fold_in_place(layer: Layer):
    for name, child in list(layer.children().items()):
        if isinstance(child, RepConv):
            if not child.is_folded:
                layer.replace_child(name, child.fold())
        else:
            _fold_in_place(child)


def fold_model(model: Model) -> Model:
    """Copy of ``model`` with every multi-branch conv replaced by its folded conv."""
    out = copy.deepcopy(model)
    _fold_in_place(out)
    return out


def count_params(obj) -> int:
    """Learnable parameter count (BN running statistics excluded)."""
    if isinstance(obj, RepBranchSet):
        return obj.param_count()
    if isinstance(obj, ConvKernel):
        return obj.weight.size + (0 if obj.bias is None else obj.bias.size)
    if isinstance(obj, Layer):
        return int(sum(a.size for _, a in obj.named_parameters()))
    raise TypeError(f"cannot count parameters of {type(obj).__name__}")


def count_flops(obj, input_shape) -> int:
    """Multiply-accumulate count of all conv and linear layers for ``input_shape``.

    Batch norm, activations, pooling and elementwise ops are not counted.
    """
    shape = tuple(input_shape)
    if len(shape) == 3:
        shape = (1,) + shape
    if isinstance(obj, ConvKernel):
        return _conv_flops(obj, shape)[0]
    return int(layer_flops(obj, shape)[0])


def ordinary_conv_cost(c_in: int, c_out: int, k: int, h: int, w: int) -> Tuple[int, int]:
    """(params incl. bias, MACs) of a plain k x k conv producing an h x w map."""
    return c_out * c_in * k * k + c_out, c_out * c_in * k * k * h * w
