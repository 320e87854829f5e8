"""A small reverse-mode autodiff engine over float64 numpy arrays.

Every operation returns a new :class:`Tensor`; when any input requires a
gradient, the result remembers its parents, the op kind and the attributes
needed to replay it. :func:`backward` linearises that graph into a
:class:`Tape` (parents always before children) and walks it in reverse.

Broadcasting is deliberately limited: elementwise binary ops accept equal
shapes or a single-element operand; anything else must go through
:func:`expand` explicitly.
"""
from __future__ import annotations

import enum
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, expit

from . import kernels
from .errors import BadAxis, NonFinite, NotScalar, ShapeMismatch


class OpKind(str, enum.Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    SCALE = "scale"
    MATMUL = "matmul"
    PERMUTE = "permute"
    RESHAPE = "reshape"
    EXPAND = "expand"
    CONCAT = "concat"
    SLICE = "slice"
    RELU = "relu"
    GELU = "gelu"
    SIGMOID = "sigmoid"
    SOFTMAX = "softmax"
    LOG = "log"
    EXP = "exp"
    REDUCE_MEAN = "reduce_mean"
    REDUCE_MAX = "reduce_max"
    REDUCE_SUM = "reduce_sum"
    LAYER_NORM = "layer_norm"
    BATCH_NORM = "batch_norm"
    CONV2D = "conv2d"
    AVG_POOL2D = "avg_pool2d"
    L2_NORMALIZE = "l2_normalize"


_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "retains_grad",
                 "_parents", "_backward", "op", "attrs")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.retains_grad = False
        self._parents = ()
        self._backward = None
        self.op = None
        self.attrs = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def retain_grad(self):
        self.retains_grad = True
        return self

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = axes[0]
        return permute(self, axes)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op, attrs=None):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.retains_grad = False
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.op = op
    out.attrs = attrs if attrs is not None else {}
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, (tuple, list)):
        return tuple(sorted(_axis(a, ndim) for a in axis))
    a = int(axis)
    if not -ndim <= a < ndim:
        raise BadAxis(f"axis {axis} out of range for rank {ndim}")
    return a % ndim


def _unbroadcast_scalar(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_binary(a, b, name):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeMismatch(f"{name}: shapes {a.shape} and {b.shape} are not aligned")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    _check_binary(a, b, "add")

    def bw(g):
        return _unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(g, b.shape)
    return _node(a.data + b.data, (a, b), bw, OpKind.ADD)


def sub(a, b):
    _check_binary(a, b, "sub")

    def bw(g):
        return _unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(-g, b.shape)
    return _node(a.data - b.data, (a, b), bw, OpKind.SUB)


def mul(a, b):
    _check_binary(a, b, "mul")

    def bw(g):
        return (_unbroadcast_scalar(g * b.data, a.shape),
                _unbroadcast_scalar(g * a.data, b.shape))
    return _node(a.data * b.data, (a, b), bw, OpKind.MUL)


def scale(a, c):
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), OpKind.SCALE, {"c": c})


def relu(a):
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), OpKind.RELU)


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def bw(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)
    return _node(x * cdf, (a,), bw, OpKind.GELU)


def sigmoid(a):
    s = expit(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), OpKind.SIGMOID)


def exp(a):
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,), OpKind.EXP)


def log(a):
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,), OpKind.LOG)


def softmax(a, axis=-1):
    ax = _axis(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)
    return _node(s, (a,), bw, OpKind.SOFTMAX, {"axis": ax})


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """(..., n, k) @ (k, m) or (..., n, k) @ (..., k, m) with equal batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul: batch dims {a.shape[:-2]} vs {b.shape[:-2]}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if shared:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb
    return _node(out, (a, b), bw, OpKind.MATMUL)


# ---------------------------------------------------------------- shape ops

def permute(a, axes):
    axes = tuple(_axis(x, a.ndim) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise BadAxis(f"permute: {axes} is not a permutation of rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _node(out, (a,), lambda g: (np.transpose(g, inv),), OpKind.PERMUTE,
                 {"axes": axes})


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape {a.shape} -> {shape}") from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), OpKind.RESHAPE,
                 {"shape": shape})


def expand(a, shape):
    """Explicit broadcast of size-1 axes to ``shape`` (same rank)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != a.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeMismatch(f"expand {a.shape} -> {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _node(out, (a,), lambda g: (g.sum(axis=axes, keepdims=True),),
                 OpKind.EXPAND, {"shape": shape})


def concat(tensors, axis=0):
    tensors = list(tensors)
    ax = _axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax):
            raise ShapeMismatch(f"concat: {t.shape} vs {tensors[0].shape} on axis {ax}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))
    return _node(out, tensors, bw, OpKind.CONCAT, {"axis": ax})


def slice_(a, key):
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (int, slice, np.integer)) and k is not Ellipsis:
            raise ShapeMismatch(f"slice supports ints and slices only, got {k!r}")
    try:
        out = np.ascontiguousarray(a.data[key])
    except IndexError as exc:
        raise BadAxis(str(exc)) from exc

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)
    return _node(out, (a,), bw, OpKind.SLICE, {"key": key})


# ---------------------------------------------------------------- reductions

def reduce_sum(a, axis=None, keepdims=False):
    ax = _axis(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=ax, keepdims=keepdims))

    def bw(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _node(out, (a,), bw, OpKind.REDUCE_SUM, {"axis": ax, "keepdims": keepdims})


def reduce_mean(a, axis=None, keepdims=False):
    ax = _axis(axis, a.ndim)
    out = np.asarray(a.data.mean(axis=ax, keepdims=keepdims))
    n = a.size // max(out.size, 1)

    def bw(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, a.shape).copy(),)
    return _node(out, (a,), bw, OpKind.REDUCE_MEAN, {"axis": ax, "keepdims": keepdims})


def reduce_max(a, axis=None, keepdims=False):
    """Max reduction; the gradient is shared equally among tied maxima."""
    ax = _axis(axis, a.ndim)
    m = a.data.max(axis=ax, keepdims=True)
    hit = a.data == m
    share = hit / hit.sum(axis=ax, keepdims=True)
    out = np.asarray(m if keepdims else (m.reshape(()) if ax is None else np.squeeze(m, ax)))

    def bw(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (share * g,)
    return _node(out, (a,), bw, OpKind.REDUCE_MAX, {"axis": ax, "keepdims": keepdims})


# ---------------------------------------------------------------- normalisation

def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm: affine {gamma.shape}/{beta.shape} for dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(x.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb
    return _node(out, (x, gamma, beta), bw, OpKind.LAYER_NORM, {"eps": eps})


def batch_norm(x, gamma, beta, running_mean, running_var, training=True,
               momentum=0.1, eps=1e-5, update_stats=True):
    """Per-channel normalisation for N×C or N×C×H×W input.

    In training mode batch statistics are used and the running buffers
    (plain Tensors) are updated in place unless ``update_stats`` is false.
    """
    if x.ndim not in (2, 4):
        raise ShapeMismatch(f"batch_norm expects rank 2 or 4, got {x.shape}")
    c = x.shape[1]
    for t in (gamma, beta, running_mean, running_var):
        if t.shape != (c,):
            raise ShapeMismatch(f"batch_norm: parameter shape {t.shape} for {c} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    attrs = {"running_mean": running_mean, "running_var": running_var,
             "training": training, "momentum": momentum, "eps": eps}
    if training:
        n = x.size // c
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        if update_stats:
            unbiased = var.reshape(c) * (n / (n - 1) if n > 1 else 1.0)
            running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mu.reshape(c)
            running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased
    else:
        rstd = 1.0 / np.sqrt(running_var.data.reshape(bshape) + eps)
        xhat = (x.data - running_mean.data.reshape(bshape)) * rstd
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx_hat = g * gamma.data.reshape(bshape)
        if training:
            gx = rstd * (gx_hat - gx_hat.mean(axis=axes, keepdims=True)
                         - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gx_hat * rstd
        return gx, gg, gb
    return _node(out, (x, gamma, beta), bw, OpKind.BATCH_NORM, attrs)


def l2_normalize(a, axis=-1):
    ax = _axis(axis, a.ndim)
    norm = np.sqrt((a.data * a.data).sum(axis=ax, keepdims=True))
    y = a.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=ax, keepdims=True)) / norm,)
    return _node(y, (a,), bw, OpKind.L2_NORMALIZE, {"axis": ax})


# ---------------------------------------------------------------- spatial

def conv2d(x, w):
    """Stride-1 convolution with zero padding k//2; x: B×C×H×W, w: O×C×k×k."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernel {w.shape}")
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeMismatch(f"conv2d: kernel must be square and odd, got {w.shape[2:]}")
    out = kernels.conv2d_forward(x.data, w.data)

    def bw(g):
        return kernels.conv2d_backward(x.data, w.data, g)
    return _node(out, (x, w), bw, OpKind.CONV2D)


def avg_pool2d(x, k):
    """Non-overlapping k×k average pooling of B×C×H×W input."""
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeMismatch(f"avg_pool2d: {x.shape} not divisible by {k}")
    b, c, h, w = x.shape
    out = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        up = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return (up / (k * k),)
    return _node(out, (x,), bw, OpKind.AVG_POOL2D, {"k": k})


# ---------------------------------------------------------------- composites

def logsumexp(a, axis=-1):
    """log Σ exp(a) along ``axis`` (keeps the axis) via max-shift."""
    ax = _axis(axis, a.ndim)
    m = Tensor(a.data.max(axis=ax, keepdims=True))
    shifted = sub(a, expand(m, a.shape))
    return add(log(reduce_sum(exp(shifted), ax, keepdims=True)), m)


def log_softmax(a, axis=-1):
    return sub(a, expand(logsumexp(a, axis), a.shape))


_OPS = {
    OpKind.ADD: add, OpKind.SUB: sub, OpKind.MUL: mul, OpKind.SCALE: scale,
    OpKind.MATMUL: matmul, OpKind.PERMUTE: permute, OpKind.RESHAPE: reshape,
    OpKind.EXPAND: expand, OpKind.CONCAT: lambda *ts, axis=0: concat(ts, axis),
    OpKind.SLICE: slice_, OpKind.RELU: relu, OpKind.GELU: gelu,
    OpKind.SIGMOID: sigmoid, OpKind.SOFTMAX: softmax, OpKind.LOG: log,
    OpKind.EXP: exp, OpKind.REDUCE_MEAN: reduce_mean, OpKind.REDUCE_MAX: reduce_max,
    OpKind.REDUCE_SUM: reduce_sum, OpKind.LAYER_NORM: layer_norm,
    OpKind.BATCH_NORM: batch_norm, OpKind.CONV2D: conv2d,
    OpKind.AVG_POOL2D: avg_pool2d, OpKind.L2_NORMALIZE: l2_normalize,
}


def apply(kind, inputs, **attrs):
    """Apply an op by kind name, e.g. ``apply("softmax", [x], axis=0)``."""
    return _OPS[OpKind(kind)](*inputs, **attrs)


# ---------------------------------------------------------------- backward

@dataclass
class Tape:
    """Topologically ordered view of the graph below a root tensor."""
    nodes: list = field(default_factory=list)
    parents: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            t, done = stack.pop()
            if done:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in reversed(t._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        index = {id(t): i for i, t in enumerate(order)}
        parents = [tuple(index[id(p)] for p in t._parents) for t in order]
        return cls(order, parents)

    def replay(self):
        """Recompute every interior node from the leaf values."""
        values = []
        with no_grad():
            for t, ps in zip(self.nodes, self.parents):
                if not ps:
                    values.append(t.data)
                    continue
                ins = [Tensor(values[i]) for i in ps]
                attrs = dict(t.attrs)
                if t.op == OpKind.BATCH_NORM:
                    attrs["update_stats"] = False
                values.append(apply(t.op, ins, **attrs).data)
        return values


def backward(root, leaves=None):
    """Fill ``.grad`` of every requires-grad leaf reachable from ``root``.

    Gradients are overwritten, not accumulated. Tensors listed in
    ``leaves`` that the root does not depend on receive a zero gradient.
    """
    if root.size != 1:
        raise NotScalar(f"backward root has shape {root.shape}")
    tape = Tape.from_root(root)
    grads = {id(root): np.ones_like(root.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if not t._parents:
            if t.requires_grad:
                t.grad = g
            continue
        if t.retains_grad:
            t.grad = g
        for p, gp in zip(t._parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=np.float64).reshape(p.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + gp
            else:
                grads[id(p)] = gp
    if leaves is not None:
        reached = {id(t) for t in tape.nodes}
        for leaf in leaves:
            if id(leaf) not in reached:
                leaf.grad = np.zeros_like(leaf.data)
    return tape


def grad_check(f, x, h=1e-5, indices=None):
    """Max relative error between autodiff and central differences.

    ``f`` maps the tensor ``x`` to a scalar Tensor. The error per
    coordinate is |a-n| / max(1, |a|, |n|). ``indices`` restricts the
    check to those flat coordinates.
    """
    x.requires_grad = True
    y = f(x)
    if not np.isfinite(y.data).all():
        raise NonFinite("f(x) is not finite")
    backward(y, leaves=[x])
    analytic = x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFinite(f"f is not finite near coordinate {i}")
            num = (fp - fm) / (2.0 * h)
            a = analytic[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
