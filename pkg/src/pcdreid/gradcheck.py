"""Randomised finite-difference checks for every op and loss.

Each case builder takes a numpy Generator and returns a list of
``(label, f, x)`` triples; ``f`` maps the Tensor ``x`` to a scalar.
Non-scalar op outputs are contracted with a fixed random weight so
every output coordinate contributes to the checked gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as LS
from . import tensor as T
from .tensor import OpKind, Tensor

TOLERANCE = 1e-4


def _shape(rng, ndim, lo=2, hi=5):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=ndim))


def _contract(rng, fn):
    """Wrap an op so its output is reduced to a scalar against random weights."""
    cache = {}

    def f(x):
        out = fn(x)
        if "w" not in cache:
            cache["w"] = rng.standard_normal(out.shape)
        return T.reduce_sum(T.mul(out, Tensor(cache["w"])))
    return f


def _away_from_zero(rng, shape, gap=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


def _distinct(rng, shape, gap=1e-3):
    """Values whose pairwise gaps all exceed ``gap`` so max has no near-ties."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) + rng.uniform(0.1, 0.9, n)) * (10 * gap)
    return vals.reshape(shape) - vals.mean()


def _binary(rng, name, op):
    shape = _shape(rng, int(rng.integers(1, 4)))
    a, b = rng.standard_normal(shape), rng.standard_normal(shape)
    return [(f"{name}[a]", _contract(rng, lambda x: op(x, Tensor(b))), Tensor(a.copy())),
            (f"{name}[b]", _contract(rng, lambda x: op(Tensor(a), x)), Tensor(b.copy()))]


def _unary(rng, name, op, data):
    return [(name, _contract(rng, op), Tensor(data))]


def _matmul(rng):
    m, k, n = _shape(rng, 3)
    out = []
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    out.append(("matmul[a]", _contract(rng, lambda x: T.matmul(x, Tensor(b))), Tensor(a.copy())))
    out.append(("matmul[b]", _contract(rng, lambda x: T.matmul(Tensor(a), x)), Tensor(b.copy())))
    bs = int(rng.integers(2, 4))
    a3 = rng.standard_normal((bs, m, k))
    out.append(("matmul[batched,shared]",
                _contract(rng, lambda x: T.matmul(Tensor(a3), x)), Tensor(b.copy())))
    b3 = rng.standard_normal((bs, k, n))
    out.append(("matmul[batched]",
                _contract(rng, lambda x: T.matmul(x, Tensor(b3))), Tensor(a3.copy())))
    return out


def _permute(rng):
    nd = int(rng.integers(2, 5))
    axes = tuple(int(i) for i in rng.permutation(nd))
    return _unary(rng, "permute", lambda x: T.permute(x, axes), rng.standard_normal(_shape(rng, nd)))


def _reshape(rng):
    shape = _shape(rng, 3)
    new = (shape[0] * shape[1], shape[2])
    return _unary(rng, "reshape", lambda x: T.reshape(x, new), rng.standard_normal(shape))


def _expand(rng):
    a, b = _shape(rng, 2)
    return _unary(rng, "expand", lambda x: T.expand(x, (a, 3, b)), rng.standard_normal((a, 1, b)))


def _concat(rng):
    shape = _shape(rng, 3)
    axis = int(rng.integers(0, 3))
    other = rng.standard_normal(shape)
    return _unary(rng, "concat", lambda x: T.concat([Tensor(other), x, Tensor(other)], axis),
                  rng.standard_normal(shape))


def _slice(rng):
    shape = _shape(rng, 3, lo=3, hi=6)
    key = (slice(1, None), slice(None, -1), 1)
    return _unary(rng, "slice", lambda x: T.slice_(x, key), rng.standard_normal(shape))


def _softmax(rng):
    shape = _shape(rng, int(rng.integers(1, 4)))
    axis = int(rng.integers(0, len(shape)))
    return _unary(rng, "softmax", lambda x: T.softmax(x, axis), 2 * rng.standard_normal(shape))


def _reduce(rng, name, op, data_fn):
    shape = _shape(rng, 3)
    axis = [None, 0, 1, 2][int(rng.integers(0, 4))]
    return _unary(rng, name, lambda x: op(x, axis), data_fn(shape))


def _layer_norm(rng):
    shape = _shape(rng, 2) + (int(rng.integers(3, 9)),)
    d = shape[-1]
    g, b = 1 + 0.1 * rng.standard_normal(d), 0.1 * rng.standard_normal(d)
    x = rng.standard_normal(shape)
    return [("layer_norm[x]", _contract(rng, lambda t: T.layer_norm(t, Tensor(g), Tensor(b))),
             Tensor(x.copy())),
            ("layer_norm[gamma]", _contract(rng, lambda t: T.layer_norm(Tensor(x), t, Tensor(b))),
             Tensor(g.copy()))]


def _batch_norm(rng, training):
    rank4 = bool(rng.integers(0, 2))
    c = int(rng.integers(1, 4))
    shape = (int(rng.integers(3, 6)), c) + (_shape(rng, 2) if rank4 else ())
    g, b = 1 + 0.1 * rng.standard_normal(c), 0.1 * rng.standard_normal(c)
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)

    def op(x, gamma=None):
        return T.batch_norm(x, Tensor(g) if gamma is None else gamma, Tensor(b),
                            Tensor(rm.copy()), Tensor(rv.copy()), training=training)
    x = 3 * rng.standard_normal(shape) + 1
    tag = "train" if training else "eval"
    return [(f"batch_norm[{tag},x]", _contract(rng, op), Tensor(x.copy())),
            (f"batch_norm[{tag},gamma]", _contract(rng, lambda t: op(Tensor(x), t)),
             Tensor(g.copy()))]


def _conv2d(rng):
    bsz, c, o = _shape(rng, 3, lo=1, hi=3)
    h, w = _shape(rng, 2, lo=3, hi=7)
    k = int(rng.choice([1, 3, 5]))
    x, wt = rng.standard_normal((bsz, c, h, w)), rng.standard_normal((o, c, k, k))
    return [("conv2d[x]", _contract(rng, lambda t: T.conv2d(t, Tensor(wt))), Tensor(x.copy())),
            ("conv2d[w]", _contract(rng, lambda t: T.conv2d(Tensor(x), t)), Tensor(wt.copy()))]


def _avg_pool(rng):
    k = int(rng.integers(1, 4))
    b, c = _shape(rng, 2, lo=1, hi=3)
    gh, gw = _shape(rng, 2, lo=1, hi=3)
    return _unary(rng, "avg_pool2d", lambda x: T.avg_pool2d(x, k),
                  rng.standard_normal((b, c, gh * k, gw * k)))


def _l2(rng):
    shape = _shape(rng, 2)
    axis = int(rng.integers(0, 2))
    return _unary(rng, "l2_normalize", lambda x: T.l2_normalize(x, axis), rng.standard_normal(shape))


def _scale(rng):
    c = float(rng.uniform(-3, 3))
    return _unary(rng, "scale", lambda x: T.scale(x, c), rng.standard_normal(_shape(rng, 2)))


OP_CASES = {
    OpKind.ADD: lambda r: _binary(r, "add", T.add),
    OpKind.SUB: lambda r: _binary(r, "sub", T.sub),
    OpKind.MUL: lambda r: _binary(r, "mul", T.mul),
    OpKind.SCALE: _scale,
    OpKind.MATMUL: _matmul,
    OpKind.PERMUTE: _permute,
    OpKind.RESHAPE: _reshape,
    OpKind.EXPAND: _expand,
    OpKind.CONCAT: _concat,
    OpKind.SLICE: _slice,
    OpKind.RELU: lambda r: _unary(r, "relu", T.relu, _away_from_zero(r, _shape(r, 2))),
    OpKind.GELU: lambda r: _unary(r, "gelu", T.gelu, 2 * r.standard_normal(_shape(r, 2))),
    OpKind.SIGMOID: lambda r: _unary(r, "sigmoid", T.sigmoid, 3 * r.standard_normal(_shape(r, 2))),
    OpKind.SOFTMAX: _softmax,
    OpKind.LOG: lambda r: _unary(r, "log", T.log, r.uniform(0.2, 3.0, _shape(r, 2))),
    OpKind.EXP: lambda r: _unary(r, "exp", T.exp, r.standard_normal(_shape(r, 2))),
    OpKind.REDUCE_MEAN: lambda r: _reduce(r, "reduce_mean", T.reduce_mean, r.standard_normal),
    OpKind.REDUCE_MAX: lambda r: _reduce(r, "reduce_max", T.reduce_max,
                                         lambda s: _distinct(r, s)),
    OpKind.REDUCE_SUM: lambda r: _reduce(r, "reduce_sum", T.reduce_sum, r.standard_normal),
    OpKind.LAYER_NORM: _layer_norm,
    OpKind.BATCH_NORM: lambda r: _batch_norm(r, bool(r.integers(0, 2))),
    OpKind.CONV2D: _conv2d,
    OpKind.AVG_POOL2D: _avg_pool,
    OpKind.L2_NORMALIZE: _l2,
}


def _pk_batch(rng, p=None, k=None, d=None):
    p = int(rng.integers(2, 5)) if p is None else p
    k = int(rng.integers(2, 4)) if k is None else k
    d = int(rng.integers(3, 7)) if d is None else d
    labels = np.repeat(np.arange(p), k)
    return rng.standard_normal((p * k, d)), labels, p


def _loss_cases(rng):
    x, labels, p = _pk_batch(rng)
    logits = rng.standard_normal((x.shape[0], p))
    cw = rng.standard_normal((p, x.shape[1]))
    eps = float(rng.uniform(0, 0.3))
    # a small circle scale keeps the exponentials in a range where central
    # differences are meaningful; the default scale is covered in the tests
    scale = float(rng.uniform(2, 16))
    return [
        ("ce", lambda t: LS.ce_loss(t, labels, eps), Tensor(logits)),
        ("triplet", lambda t: LS.triplet_loss(t, labels, 0.3), Tensor(x.copy())),
        ("circle", lambda t: LS.circle_loss(t, labels, scale), Tensor(x.copy())),
        ("cosface[features]", lambda t: LS.cosface_loss(t, labels, Tensor(cw)), Tensor(x.copy())),
        ("cosface[weights]", lambda t: LS.cosface_loss(Tensor(x), labels, t), Tensor(cw.copy())),
    ]


LOSS_NAMES = ("ce", "triplet", "circle", "cosface")


@dataclass
class CheckResult:
    name: str
    trial: int
    error: float

    @property
    def passed(self):
        return self.error < TOLERANCE


def run_suite(seed=0, trials=20, h=1e-5):
    """grad_check every op kind and loss on ``trials`` random draws each."""
    rng = np.random.default_rng(seed)
    results = []
    for trial in range(trials):
        cases = []
        for kind in OpKind:
            cases.extend(OP_CASES[kind](rng))
        cases.extend(_loss_cases(rng))
        for name, f, x in cases:
            results.append(CheckResult(name, trial, T.grad_check(f, x, h=h)))
    return results


def summarize(results):
    """Worst error per case name, in first-seen order."""
    worst = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    return worst
