"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Every primitive that sees an input with ``requires_grad`` appends a node to the
thread-local :class:`ComputationTape`.  Because nodes are appended in creation
order the tape is already topologically sorted; :func:`backward` walks it once
in reverse and then clears it.

Shape conventions: images are NCHW, convolution kernels are KCRS
(out-channels, in-channels, rows, cols).
"""
import threading
from contextlib import contextmanager

import numpy as np

from . import kernels
from ._config import DTYPE

__all__ = [
    "Tensor", "ComputationTape", "ShapeError", "backward", "no_grad", "grad_enabled",
    "get_tape", "finite_difference_check", "check_gradients",
    "add", "sub", "mul", "scale", "neg", "matmul", "transpose", "relu", "conv2d",
    "batchnorm", "avgpool2d", "maxpool2d", "adaptive_avgpool2d", "reshape", "concat",
    "slice_last", "take_rows", "log_softmax", "tsum", "tmean",
]


class ShapeError(ValueError):
    def __init__(self, primitive, *shapes, detail=""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        msg = f"{primitive}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    """Dense real array with an optional gradient buffer.

    Leaves created with ``requires_grad=True`` always carry a zero-initialised
    ``grad`` of the same shape; intermediate results never store one.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = np.array(data, dtype=dtype or DTYPE, order="C")
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @classmethod
    def _result(cls, data):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.is_leaf = True
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("out", "inputs", "vjp", "op")

    def __init__(self, op, out, inputs, vjp):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class ComputationTape:
    """Ordered record of primitive applications awaiting a reverse sweep."""

    def __init__(self):
        self.ops = []

    def record(self, node):
        self.ops.append(node)

    def clear(self):
        self.ops = []

    def __len__(self):
        return len(self.ops)


_local = threading.local()


def get_tape():
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = ComputationTape()
    return tape


def grad_enabled():
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


@contextmanager
def record_kinks():
    """Collect the branch choices of piecewise ops (relu masks, max-pool argmax).

    Two forward passes with equal records lie on the same linear piece of
    every relu/max, which is what a finite-difference stencil needs.
    """
    prev = getattr(_local, "kinks", None)
    _local.kinks = rec = []
    try:
        yield rec
    finally:
        _local.kinks = prev


def _note_kink(pattern):
    rec = getattr(_local, "kinks", None)
    if rec is not None:
        rec.append(np.packbits(pattern) if pattern.dtype == bool else pattern)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _emit(op, data, inputs, vjp):
    out = Tensor._result(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        get_tape().record(_Node(op, out, inputs, vjp))
    return out


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf reachable on the tape."""
    if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.data.ndim > 1:
        shape = getattr(loss, "shape", None)
        raise ValueError(f"backward needs a scalar loss, got shape {shape}")
    tape = get_tape()
    if not tape.ops:
        raise RuntimeError("backward called with an empty tape (loss does not depend on any tensor requiring grad)")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.ops):
        g = pending.pop(id(node.out), None)
        for inp in node.inputs:
            if inp.requires_grad and inp.is_leaf and inp.grad is None:
                inp.grad = np.zeros_like(inp.data)
        if g is None:
            continue
        grads = node.vjp(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad += gi
            else:
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------

def _sum_to(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead > 0 else g


def _broadcast_ok(a, b):
    return a.shape == b.shape or (b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape)


def add(a, b):
    """Elementwise sum; ``b`` may also be a trailing-axes bias (e.g. (C,) added to (N, C))."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if not _broadcast_ok(a, b):
        if _broadcast_ok(b, a):
            a, b = b, a
        else:
            raise ShapeError("add", a.shape, b.shape)
    shape_b = b.shape

    def vjp(g):
        return g, _sum_to(g, shape_b)

    return _emit("add", a.data + b.data, (a, b), vjp)


def neg(a):
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def sub(a, b):
    return add(a, neg(_as_tensor(b, like=a)))


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        return g * bd, g * ad

    return _emit("mul", ad * bd, (a, b), vjp)


def scale(a, c):
    c = float(c)
    return _emit("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def matmul(a, b):
    """2-D matrix product (n, k) @ (k, m)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape, detail="expects (n, k) @ (k, m)")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), vjp)


def transpose(a):
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="expects a 2-D tensor")
    return _emit("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def relu(a):
    mask = a.data > 0
    _note_kink(mask)
    return _emit("relu", np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


def tsum(a):
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a):
    n = a.data.size
    return scale(tsum(a), 1.0 / n)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    old = a.shape
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError("concat", ref, t.shape, detail=f"axis={axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), vjp)


def slice_last(a, start, stop):
    """Columns ``start:stop`` along the last axis (e.g. the old-class slice of logits)."""
    n = a.shape[-1]
    if not 0 <= start <= stop <= n:
        raise ShapeError("slice_last", a.shape, detail=f"range [{start}, {stop})")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice", np.ascontiguousarray(a.data[..., start:stop]), (a,), vjp)


def take_rows(a, idx):
    """Rows ``idx`` of a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or (idx.size and (idx.min() < -a.shape[0] or idx.max() >= a.shape[0])):
        raise ShapeError("take_rows", a.shape, idx.shape)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("take_rows", a.data[idx], (a,), vjp)


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (a,), vjp)


# ---------------------------------------------------------------------------
# convolutional primitives
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride=1, padding=0):
    """NCHW input, KCRS kernel, optional (K,) bias."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape, detail="input NCHW, kernel KCRS with matching C")
    n, c, h, wd = x.shape
    k, _, r, s = w.shape
    oh = kernels.conv_out_size(h, r, stride, padding)
    ow = kernels.conv_out_size(wd, s, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail=f"kernel larger than padded input (stride={stride}, padding={padding})")
    cols = kernels.im2col(x.data, r, s, stride, padding)
    wmat = w.data.reshape(k, -1)
    out = cols @ wmat.T
    if b is not None:
        if b.shape != (k,):
            raise ShapeError("conv2d", w.shape, b.shape, detail="bias must be (K,)")
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, k).transpose(0, 3, 1, 2))
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, k)
        gx = kernels.col2im(g2 @ wmat, x.shape, r, s, stride, padding) if x.requires_grad else None
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit("conv2d", out, inputs, vjp)


def avgpool2d(x, kernel, stride=None):
    """Average pooling without padding over an NCHW tensor."""
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError("avgpool", x.shape, detail="expects NCHW")
    n, c, h, w = x.shape
    oh = kernels.conv_out_size(h, kernel, stride, 0)
    ow = kernels.conv_out_size(w, kernel, stride, 0)
    if oh < 1 or ow < 1:
        raise ShapeError("avgpool", x.shape, detail=f"kernel {kernel} exceeds spatial extent")
    flat = x.data.reshape(n * c, 1, h, w)
    cols = kernels.im2col(flat, kernel, kernel, stride, 0)
    out = cols.mean(axis=1).reshape(n, c, oh, ow)
    area = kernel * kernel

    def vjp(g):
        gcols = np.repeat(g.reshape(-1, 1) / area, area, axis=1).astype(g.dtype)
        return (kernels.col2im(gcols, (n * c, 1, h, w), kernel, kernel, stride, 0).reshape(x.shape),)

    return _emit("avgpool", np.ascontiguousarray(out), (x,), vjp)


def maxpool2d(x, kernel, stride, padding=0):
    if x.ndim != 4:
        raise ShapeError("maxpool", x.shape, detail="expects NCHW")
    n, c, h, w = x.shape
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    hp, wp = xp.shape[2:]
    oh = kernels.conv_out_size(hp, kernel, stride, 0)
    ow = kernels.conv_out_size(wp, kernel, stride, 0)
    cols = kernels.im2col(xp.reshape(n * c, 1, hp, wp), kernel, kernel, stride, 0)
    arg = cols.argmax(axis=1)
    _note_kink(arg)
    out = cols[np.arange(cols.shape[0]), arg].reshape(n, c, oh, ow)

    def vjp(g):
        gcols = np.zeros(cols.shape, dtype=g.dtype)
        gcols[np.arange(cols.shape[0]), arg] = g.reshape(-1)
        gx = kernels.col2im(gcols, (n * c, 1, hp, wp), kernel, kernel, stride, 0).reshape(n, c, hp, wp)
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return (np.ascontiguousarray(gx),)

    return _emit("maxpool", np.ascontiguousarray(out), (x,), vjp)


def _adaptive_bins(size, out):
    return [((i * size) // out, -(-((i + 1) * size) // out)) for i in range(out)]


def adaptive_avgpool2d(x, out_hw):
    """Average over ``out_hw`` bins (floor start, ceil end); (1, 1) is global average pooling."""
    if x.ndim != 4:
        raise ShapeError("adaptive_avgpool", x.shape, detail="expects NCHW")
    n, c, h, w = x.shape
    oh, ow = out_hw
    if oh > h or ow > w:
        raise ShapeError("adaptive_avgpool", x.shape, (oh, ow), detail="output larger than input")
    rb, cb = _adaptive_bins(h, oh), _adaptive_bins(w, ow)
    out = np.empty((n, c, oh, ow), dtype=x.data.dtype)
    for i, (r0, r1) in enumerate(rb):
        for j, (c0, c1) in enumerate(cb):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i, (r0, r1) in enumerate(rb):
            for j, (c0, c1) in enumerate(cb):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / area)[:, :, None, None]
        return (gx,)

    return _emit("adaptive_avgpool", out, (x,), vjp)


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Batch normalisation over (N, C) or (N, C, H, W).

    In training mode the batch statistics are used and differentiated through,
    and the running buffers (plain arrays) are updated in place with the
    unbiased batch variance.  In eval mode the running statistics are used.
    """
    if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != gamma.shape:
        raise ShapeError("batchnorm", x.shape, gamma.shape, detail="channel axis 1 must match affine params")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    xd = x.data
    m = xd.size // xd.shape[1]
    if training:
        if m < 2:
            raise ShapeError("batchnorm", x.shape, detail="training mode needs more than one value per channel")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            s1 = dxhat.sum(axis=axes).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            dx = (inv_std.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx.astype(xd.dtype), dgamma, dbeta

    return _emit("batchnorm", out.astype(xd.dtype), (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _rel_err(analytic, numeric):
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise FloatingPointError("non-finite value in gradient check")
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def _same_piece(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


class GradCheckStats:
    """Per-call bookkeeping of :func:`check_gradients` (coordinates probed, step shrinks)."""

    def __init__(self):
        self.probed = 0
        self.shrunk = 0
        self.unresolved = 0
        self.min_eps = None


def check_gradients(loss_fn, params, eps=1e-4, max_coords=None, rng=None, kink_aware=True, stats=None):
    """Max relative error between backward() and central differences.

    ``loss_fn()`` must rebuild the scalar loss from ``params`` each call.  With
    ``max_coords`` only that many coordinates per parameter are probed, chosen
    by ``rng``.

    With ``kink_aware`` a coordinate whose +-eps stencil changes any relu mask
    or max-pool choice is re-probed with eps/10 (down to eps*1e-4): across a
    kink the difference quotient is not a derivative estimate.  Coordinates
    that never settle are skipped and counted in ``stats.unresolved``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    stats = stats if stats is not None else GradCheckStats()
    params = list(params)
    for p in params:
        p.zero_grad()
    get_tape().clear()
    with record_kinks() as base:
        loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss in gradient check")
    if loss.requires_grad:
        backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def probe(flat, i, h):
        orig = flat[i]
        with no_grad():
            flat[i] = orig + h
            with record_kinks() as kp:
                fp = float(loss_fn().data)
            flat[i] = orig - h
            with record_kinks() as km:
                fm = float(loss_fn().data)
        flat[i] = orig
        smooth = _same_piece(kp, base) and _same_piece(km, base)
        return (fp - fm) / (2 * h), smooth

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=max_coords, replace=False)
        for i in idx:
            h = eps
            num, smooth = probe(flat, i, h)
            while kink_aware and not smooth and h > eps * 1e-4:
                h /= 10
                num, smooth = probe(flat, i, h)
            stats.probed += 1
            if h != eps:
                stats.shrunk += 1
                stats.min_eps = h if stats.min_eps is None else min(stats.min_eps, h)
            if kink_aware and not smooth:
                stats.unresolved += 1
                continue
            worst = max(worst, float(_rel_err(a.reshape(-1)[i], num)))
    return worst


def finite_difference_check(f, x, eps=1e-4):
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|) for scalar ``f(x)``."""
    return check_gradients(lambda: f(x), [x], eps=eps)
