"""Residual-network and MLP factory with exact parameter and FLOP accounting.

ResNet depth counts stem conv + two convs per basic block + classifier, so a
network with ``b`` blocks in each of its four stages has depth ``8*b + 2``
(10, 18, 26, ...).  Stage widths are ``width * (1, 2, 4, 8)``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autograd as ag
from ._config import DTYPE
from .autograd import Tensor

FAMILIES = ("resnet", "mlp")
PENULTIMATE = ("gap", "avgpool4x4s3", "gap2x2")


class ArchError(ValueError):
    pass


def valid_resnet_depths(limit=50):
    return [8 * b + 2 for b in range(1, (limit - 2) // 8 + 1)]


@dataclass(frozen=True)
class ArchSpec:
    family: str
    depth: int
    width: int
    num_classes: int
    penultimate: str = "gap"
    small_image_stem: bool = True
    in_channels: int = 3
    input_size: int = 32
    in_features: int = 784

    def validate(self):
        if self.family not in FAMILIES:
            raise ArchError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.width < 1 or self.num_classes < 1:
            raise ArchError("width and num_classes must be positive")
        if self.family == "mlp":
            if self.depth < 2:
                raise ArchError(f"mlp depth must be >= 2, got {self.depth}")
            if self.in_features < 1:
                raise ArchError("mlp in_features must be positive")
        else:
            if self.depth < 10 or (self.depth - 2) % 8:
                raise ArchError(f"unsupported resnet depth {self.depth}; valid depths are "
                                f"{valid_resnet_depths()} (8*blocks_per_stage + 2)")
            if self.penultimate not in PENULTIMATE:
                raise ArchError(f"unknown penultimate {self.penultimate!r}; expected one of {PENULTIMATE}")
        return self

    @property
    def blocks_per_stage(self):
        return (self.depth - 2) // 8

    def with_classes(self, n):
        return replace(self, num_classes=int(n))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()

    def label(self):
        if self.family == "mlp":
            return f"mlp-d{self.depth}-w{self.width}"
        stem = "s" if self.small_image_stem else "l"
        return f"resnet-d{self.depth}-w{self.width}-{self.penultimate}-{stem}{self.input_size}"


def preset(name, num_classes=100, **overrides) -> ArchSpec:
    """Named architectures: resnet18, sta_net, pla_net, the Table-1 style
    variants ``resnet:<depth>,<width>[,<penultimate>]`` and ``mlp:<depth>,<width>``."""
    name = name.strip().lower()
    if name == "resnet18":
        spec = ArchSpec("resnet", 18, 64, num_classes)
    elif name == "sta_net":
        spec = ArchSpec("resnet", 10, 64, num_classes, penultimate="gap2x2")
    elif name == "pla_net":
        spec = ArchSpec("resnet", 18, 42, num_classes)
    elif name.startswith("mlp:") or name.startswith("resnet:"):
        fam, _, rest = name.partition(":")
        parts = [p.strip() for p in rest.split(",")]
        try:
            depth, width = int(parts[0]), int(parts[1])
        except (IndexError, ValueError):
            raise ArchError(f"cannot parse preset {name!r}; use {fam}:<depth>,<width>") from None
        kw = {}
        if fam == "resnet" and len(parts) > 2:
            kw["penultimate"] = parts[2]
        spec = ArchSpec(fam, depth, width, num_classes, **kw)
    else:
        raise ArchError(f"unknown preset {name!r}")
    if overrides:
        spec = replace(spec, **overrides)
    return spec.validate()


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Module:
    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, list):
                for i, m in enumerate(value):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")
            elif isinstance(value, list):
                for i, m in enumerate(value):
                    if isinstance(m, Module):
                        yield from m.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for m in value:
                    if isinstance(m, Module):
                        yield from m.modules()

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, x):
        return self.forward(x)

    def trace(self, shape):
        """Return (output shape, multiply-accumulates) for one pass over ``shape``."""
        raise NotImplementedError


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, dtype=DTYPE):
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (fan_out, fan_in)), requires_grad=True, dtype=dtype)
        self.bias = Tensor(rng.uniform(-bound, bound, (fan_out,)), requires_grad=True, dtype=dtype)

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def forward(self, x):
        return ag.add(ag.matmul(x, ag.transpose(self.weight)), self.bias)

    def trace(self, shape):
        n, f = shape
        if f != self.in_features:
            raise ag.ShapeError("linear", shape, self.weight.shape)
        return (n, self.out_features), n * f * self.out_features


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride, padding, rng, dtype=DTYPE):
        std = math.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True, dtype=dtype)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ag.conv2d(x, self.weight, stride=self.stride, padding=self.padding)

    def trace(self, shape):
        n, c, h, w = shape
        k, cin, r, s = self.weight.shape
        if c != cin:
            raise ag.ShapeError("conv2d", shape, self.weight.shape)
        oh = (h + 2 * self.padding - r) // self.stride + 1
        ow = (w + 2 * self.padding - s) // self.stride + 1
        return (n, k, oh, ow), n * k * oh * ow * cin * r * s


class BatchNorm(Module):
    def __init__(self, channels, dtype=DTYPE, momentum=0.1, eps=1e-5):
        self.weight = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return ag.batchnorm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)

    def trace(self, shape):
        return shape, 0


class ReLU(Module):
    def forward(self, x):
        return ag.relu(x)

    def trace(self, shape):
        return shape, 0


class MaxPool(Module):
    def __init__(self, k=3, stride=2, padding=1):
        self.k, self.stride, self.padding = k, stride, padding

    def forward(self, x):
        return ag.maxpool2d(x, self.k, self.stride, self.padding)

    def trace(self, shape):
        n, c, h, w = shape
        oh = (h + 2 * self.padding - self.k) // self.stride + 1
        ow = (w + 2 * self.padding - self.k) // self.stride + 1
        return (n, c, oh, ow), 0


class Pool(Module):
    """Penultimate spatial reduction followed by flattening."""

    def __init__(self, kind):
        self.kind = kind

    def forward(self, x):
        if self.kind == "gap":
            y = ag.adaptive_avgpool2d(x, (1, 1))
        elif self.kind == "gap2x2":
            y = ag.adaptive_avgpool2d(x, (2, 2))
        else:
            y = ag.avgpool2d(x, 4, 3)
        return ag.reshape(y, (y.shape[0], -1))

    def out_hw(self, h, w):
        if self.kind == "gap":
            return 1, 1
        if self.kind == "gap2x2":
            return 2, 2
        return (h - 4) // 3 + 1, (w - 4) // 3 + 1

    def trace(self, shape):
        n, c, h, w = shape
        oh, ow = self.out_hw(h, w)
        if oh < 1 or ow < 1:
            raise ag.ShapeError("avgpool", shape, detail="feature map smaller than the 4x4 pooling window")
        return (n, c * oh * ow), 0


class Flatten(Module):
    def forward(self, x):
        return ag.reshape(x, (x.shape[0], -1))

    def trace(self, shape):
        return (shape[0], int(np.prod(shape[1:]))), 0


class BasicBlock(Module):
    def __init__(self, cin, cout, stride, rng, dtype=DTYPE):
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, rng, dtype)
        self.bn1 = BatchNorm(cout, dtype)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, rng, dtype)
        self.bn2 = BatchNorm(cout, dtype)
        if stride != 1 or cin != cout:
            self.down_conv = Conv2d(cin, cout, 1, stride, 0, rng, dtype)
            self.down_bn = BatchNorm(cout, dtype)
        else:
            self.down_conv = self.down_bn = None

    def forward(self, x):
        out = ag.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        short = x if self.down_conv is None else self.down_bn(self.down_conv(x))
        return ag.relu(ag.add(out, short))

    def trace(self, shape):
        s1, m1 = self.conv1.trace(shape)
        s2, m2 = self.conv2.trace(s1)
        m3 = self.down_conv.trace(shape)[1] if self.down_conv is not None else 0
        return s2, m1 + m2 + m3


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def trace(self, shape):
        total = 0
        for layer in self.layers:
            shape, macs = layer.trace(shape)
            total += macs
        return shape, total


class Network(Module):
    """Feature extractor plus a growable linear classifier head."""

    def __init__(self, backbone, head=None, spec=None):
        self.backbone = backbone
        self.head = head
        self.spec = spec

    @classmethod
    def empty(cls):
        return cls(Sequential([]), None, None)

    @property
    def num_classes(self):
        return 0 if self.head is None else self.head.out_features

    @property
    def feature_dim(self):
        return None if self.head is None else self.head.in_features

    def features(self, x):
        return self.backbone(x)

    def forward(self, x):
        feats = self.backbone(x)
        return feats if self.head is None else self.head(feats)

    def trace(self, shape):
        shape, macs = self.backbone.trace(shape)
        if self.head is not None:
            shape, m = self.head.trace(shape)
            macs += m
        return shape, macs

    def input_shape(self, batch=1):
        if self.spec is None:
            return None
        if self.spec.family == "mlp":
            return (batch, self.spec.in_features)
        return (batch, self.spec.in_channels, self.spec.input_size, self.spec.input_size)

    def state_dict(self):
        state = {k: p.data.copy() for k, p in self.named_parameters()}
        state.update({k: b.copy() for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch on keys {sorted(missing)}")
        for k, p in params.items():
            if p.data.shape != state[k].shape:
                raise ag.ShapeError("load_state_dict", p.data.shape, state[k].shape, detail=k)
            p.data[...] = state[k]
        for k, b in buffers.items():
            b[...] = state[k]

    def copy(self):
        return copy.deepcopy(self)

    def frozen(self):
        """Deep copy in eval mode with no trainable tensors (a snapshot)."""
        snap = self.copy().eval()
        for p in snap.parameters():
            p.requires_grad = False
            p.grad = None
        snap.is_frozen = True
        return snap

    def astype(self, dtype):
        for m in self.modules():
            for name, value in list(vars(m).items()):
                if isinstance(value, Tensor):
                    value.data = value.data.astype(dtype)
                    if value.grad is not None:
                        value.grad = np.zeros_like(value.data)
                elif isinstance(value, np.ndarray):
                    setattr(m, name, value.astype(dtype))
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


# ---------------------------------------------------------------------------
# factory
# ---------------------------------------------------------------------------

def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def build(spec: ArchSpec, rng=0, dtype=DTYPE) -> Network:
    spec.validate()
    rng = _rng(rng)
    if spec.family == "mlp":
        layers, fan_in = [], spec.in_features
        for _ in range(spec.depth - 1):
            layers += [Linear(fan_in, spec.width, rng, dtype), ReLU()]
            fan_in = spec.width
        backbone = Sequential([Flatten()] + layers)
        feat = spec.width
    else:
        w = spec.width
        if spec.small_image_stem:
            layers = [Conv2d(spec.in_channels, w, 3, 1, 1, rng, dtype), BatchNorm(w, dtype), ReLU()]
        else:
            layers = [Conv2d(spec.in_channels, w, 7, 2, 3, rng, dtype), BatchNorm(w, dtype), ReLU(), MaxPool(3, 2, 1)]
        cin = w
        for stage, mult in enumerate((1, 2, 4, 8)):
            cout = w * mult
            for b in range(spec.blocks_per_stage):
                stride = 2 if stage > 0 and b == 0 else 1
                layers.append(BasicBlock(cin, cout, stride, rng, dtype))
                cin = cout
        pool = Pool(spec.penultimate)
        layers.append(pool)
        backbone = Sequential(layers)
        shape, _ = backbone.trace((1, spec.in_channels, spec.input_size, spec.input_size))
        feat = shape[1]
    head = Linear(feat, spec.num_classes, rng, dtype)
    return Network(backbone, head, spec)


def build_sta_net(num_classes, rng=0, **overrides):
    return build(preset("sta_net", num_classes, **overrides), rng)


def build_pla_net(num_classes, rng=0, **overrides):
    return build(preset("pla_net", num_classes, **overrides), rng)


def param_count(net: Network) -> int:
    """All trainable scalars, including biases and batchnorm affine terms."""
    return int(sum(p.size for p in net.parameters()))


def feature_dim(spec: ArchSpec) -> int:
    if spec.family == "mlp":
        return spec.width
    h = spec.input_size
    if not spec.small_image_stem:
        h = (h + 6 - 7) // 2 + 1
        h = (h + 2 - 3) // 2 + 1
    for _ in range(3):
        h = (h + 2 - 3) // 2 + 1
    oh, ow = Pool(spec.penultimate).out_hw(h, h)
    return spec.width * 8 * oh * ow


def analytic_param_count(spec: ArchSpec) -> int:
    """Closed-form parameter count, independent of any constructed network."""
    spec.validate()
    c, w = spec.num_classes, spec.width
    if spec.family == "mlp":
        d_in = spec.in_features
        hidden = spec.depth - 1
        return (d_in + 1) * w + (hidden - 1) * (w + 1) * w + (w + 1) * c
    stem_k = 3 if spec.small_image_stem else 7
    total = spec.in_channels * w * stem_k * stem_k + 2 * w
    b = spec.blocks_per_stage
    for stage, mult in enumerate((1, 2, 4, 8)):
        cout = w * mult
        cin = w if stage == 0 else cout // 2
        # first block of the stage
        total += 9 * cin * cout + 9 * cout * cout + 4 * cout
        if cin != cout:
            total += cin * cout + 2 * cout
        total += (b - 1) * (18 * cout * cout + 4 * cout)
    return total + (feature_dim(spec) + 1) * c


def flops_estimate(net: Network, input_shape=None) -> int:
    """FLOPs of one forward pass, counting conv and linear multiply-accumulates
    with 1 MAC = 2 FLOPs (batchnorm, activations and pooling are not counted).
    ``input_shape`` includes the batch axis."""
    if input_shape is None:
        input_shape = net.input_shape(1)
    if input_shape is None:
        return 0
    return 2 * int(net.trace(tuple(input_shape))[1])


def conv_fc_depth(net: Network) -> int:
    """Number of weight layers on the main path (shortcut 1x1 convs excluded)."""
    depth = 0
    for m in net.modules():
        if isinstance(m, BasicBlock):
            depth += 2
        elif isinstance(m, (Linear,)):
            depth += 1
    for layer in net.backbone.layers:
        if isinstance(layer, Conv2d):
            depth += 1
    return depth


def grow_classifier(net: Network, new_classes: int, rng=0) -> Network:
    """Append ``new_classes`` freshly initialised output rows; existing rows are untouched."""
    if new_classes < 0:
        raise ValueError("new_classes must be >= 0")
    if new_classes == 0:
        return net
    head = net.head
    rng = _rng(rng)
    bound = 1.0 / math.sqrt(head.in_features)
    dtype = head.weight.dtype
    w_new = rng.uniform(-bound, bound, (new_classes, head.in_features)).astype(dtype)
    b_new = rng.uniform(-bound, bound, (new_classes,)).astype(dtype)
    head.weight = Tensor(np.concatenate([head.weight.data, w_new]), requires_grad=True, dtype=dtype)
    head.bias = Tensor(np.concatenate([head.bias.data, b_new]), requires_grad=True, dtype=dtype)
    if net.spec is not None:
        net.spec = net.spec.with_classes(head.out_features)
    return net


def layer_summary(net: Network, input_shape=None):
    """Rows of (name, kind, params, output shape) for top-level backbone layers and the head."""
    if input_shape is None:
        input_shape = net.input_shape(1)
    rows, shape = [], tuple(input_shape) if input_shape else None
    entries = [(f"backbone.{i}", layer) for i, layer in enumerate(net.backbone.layers)]
    if net.head is not None:
        entries.append(("head", net.head))
    for name, layer in entries:
        n_params = int(sum(p.size for _, p in layer.named_parameters()))
        if shape is not None:
            shape, _ = layer.trace(shape)
        rows.append({"name": name, "kind": type(layer).__name__, "params": n_params,
                     "output_shape": list(shape) if shape is not None else None})
    return rows
