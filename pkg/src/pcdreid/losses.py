"""Identity-supervision losses and their weighted combination.

All losses take a feature matrix (N×D Tensor) and integer labels and
return a scalar Tensor that can be differentiated with
:func:`pcdreid.tensor.backward`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import BadLabel, ConfigError, NoNegative, NoPairs, NoPositive, ShapeMismatch
from .tensor import Tensor

_FAR = 1e30


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0     # cross-entropy
    beta: float = 1.0      # triplet
    gamma_w: float = 1.0   # circle
    delta: float = 1.0     # cosface

    def __post_init__(self):
        ws = self.as_tuple()
        if any(not np.isfinite(w) or w < 0 for w in ws):
            raise ConfigError(f"loss weights must be finite and nonnegative, got {ws}")
        if all(w == 0 for w in ws):
            raise ConfigError("at least one loss weight must be positive")

    def as_tuple(self):
        return (self.alpha, self.beta, self.gamma_w, self.delta)

    @property
    def pairwise(self):
        """True when any term needs several instances per identity."""
        return self.beta > 0 or self.gamma_w > 0 or self.delta > 0


@dataclass(frozen=True)
class LossConfig:
    num_classes: int
    smoothing: float = 0.1
    triplet_margin: float = 0.3
    triplet_reduction: str = "mean"
    circle_scale: float = 64.0
    delta_p: float = 0.75
    delta_n: float = 0.25
    cosface_scale: float = 30.0
    cosface_margin: float = 0.35

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not 0 <= self.smoothing < 1:
            raise ConfigError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        if self.triplet_reduction not in ("mean", "sum"):
            raise ConfigError(f"triplet_reduction must be 'mean' or 'sum'")
        if self.circle_scale <= 0 or self.cosface_scale <= 0:
            raise ConfigError("scales must be positive")
        margins = (self.triplet_margin, self.delta_p, self.delta_n, self.cosface_margin)
        if not all(np.isfinite(m) for m in margins):
            raise ConfigError("margins must be finite")
        if not self.delta_n < self.delta_p:
            raise ConfigError("delta_n must be smaller than delta_p")


def _labels(labels, num_classes=None):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise BadLabel(f"labels must be a 1-D integer array, got {labels.dtype} {labels.shape}")
    if num_classes is not None and labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise BadLabel(f"labels must lie in [0, {num_classes})")
    return labels


def _check_rows(features, labels):
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"features {features.shape} vs {labels.shape[0]} labels")


def smooth_labels(labels, num_classes, eps):
    """Targets (1-eps)·onehot + eps/K as an N×K float array."""
    labels = _labels(labels, num_classes)
    off = eps / num_classes
    y = np.full((labels.shape[0], num_classes), off)
    y[np.arange(labels.shape[0]), labels] = (1.0 - eps) + off
    return y


def ce_loss(logits, labels, eps=0.0):
    """Mean label-smoothed cross-entropy of softmax(logits)."""
    n, k = logits.shape
    target = Tensor(smooth_labels(labels, k, eps))
    logp = T.log_softmax(logits, axis=1)
    return T.scale(T.reduce_sum(T.mul(logp, target)), -1.0 / n)


def _pairwise_sqdist(f):
    n, d = f.shape
    a = T.expand(T.reshape(f, (n, 1, d)), (n, n, d))
    b = T.expand(T.reshape(f, (1, n, d)), (n, n, d))
    diff = T.sub(a, b)
    return T.reduce_sum(T.mul(diff, diff), axis=2)


def _masks(labels):
    same = labels[:, None] == labels[None, :]
    eye = np.eye(labels.shape[0], dtype=bool)
    return same & ~eye, ~same


def triplet_loss(features, labels, margin=0.3, reduction="mean"):
    """Batch-hard triplet loss on squared Euclidean distances."""
    labels = _labels(labels)
    _check_rows(features, labels)
    ids, counts = np.unique(labels, return_counts=True)
    if (counts < 2).any():
        raise NoPositive(f"identities {ids[counts < 2].tolist()} have a single instance")
    if ids.size < 2:
        raise NoNegative("batch holds a single identity")
    pos, neg = _masks(labels)
    d2 = _pairwise_sqdist(features)
    hardest_pos = T.reduce_max(T.add(d2, Tensor(np.where(pos, 0.0, -_FAR))), axis=1)
    hardest_neg = T.scale(
        T.reduce_max(T.add(T.scale(d2, -1.0), Tensor(np.where(neg, 0.0, -_FAR))), axis=1), -1.0)
    hinge = T.relu(T.add(T.sub(hardest_pos, hardest_neg), Tensor(margin)))
    return T.reduce_mean(hinge) if reduction == "mean" else T.reduce_sum(hinge)


def circle_loss(features, labels, scale=64.0, delta_p=0.75, delta_n=0.25):
    """Per-anchor log(1 + Σ_pos e^{γ(Δp-s)} + Σ_neg e^{γ(s-Δn)}), averaged.

    Similarities are cosines of the L2-normalised rows.
    """
    labels = _labels(labels)
    _check_rows(features, labels)
    pos, neg = _masks(labels)
    if not pos.any() or not neg.any():
        raise NoPairs("circle loss needs at least one positive and one negative pair; "
                      "sample more than one instance per identity")
    fn = T.l2_normalize(features, axis=1)
    sim = T.matmul(fn, T.permute(fn, (1, 0)))
    z = T.add(T.mul(T.scale(T.sub(Tensor(delta_p), sim), scale), Tensor(pos * 1.0)),
              T.mul(T.scale(T.sub(sim, Tensor(delta_n)), scale), Tensor(neg * 1.0)))
    valid = pos | neg
    # log(1 + Σ e^z) evaluated with a constant shift u ≥ 0
    u = np.maximum(0.0, np.where(valid, z.data, -np.inf).max(axis=1))
    shifted = T.sub(z, Tensor(np.broadcast_to(u[:, None], z.shape)))
    total = T.add(T.reduce_sum(T.mul(T.exp(shifted), Tensor(valid * 1.0)), axis=1),
                  Tensor(np.exp(-u)))
    per_anchor = T.add(T.log(total), Tensor(u))
    return T.reduce_mean(per_anchor)


def cosface_logits(features, class_weights, labels, scale=30.0, margin=0.35):
    k = class_weights.shape[0]
    labels = _labels(labels, k)
    if class_weights.ndim != 2 or class_weights.shape[1] != features.shape[1]:
        raise ShapeMismatch(f"class weights {class_weights.shape} vs features {features.shape}")
    cos = T.matmul(T.l2_normalize(features, axis=1),
                   T.permute(T.l2_normalize(class_weights, axis=1), (1, 0)))
    onehot = np.zeros(cos.shape)
    onehot[np.arange(labels.shape[0]), labels] = scale * margin
    return T.sub(T.scale(cos, scale), Tensor(onehot))


def cosface_loss(features, labels, class_weights, scale=30.0, margin=0.35):
    """Large-margin cosine loss against L2-normalised class weights."""
    labels = _labels(labels)
    _check_rows(features, labels)
    if class_weights.shape[0] < 2:
        raise ConfigError("cosface needs at least two classes")
    return ce_loss(cosface_logits(features, class_weights, labels, scale, margin), labels, 0.0)


TERMS = ("ce", "triplet", "circle", "cosface")


def joint_loss(features, labels, weights, config, logits=None, class_weights=None):
    """Weighted sum of the four terms.

    Returns ``(total, report)`` where ``report`` maps each term name to its
    float value, or ``None`` when a zero-weight term could not be computed.
    Errors from terms with positive weight propagate.
    """
    labels = _labels(labels, config.num_classes)

    def ce():
        if logits is None:
            raise ConfigError("cross-entropy term needs classifier logits")
        return ce_loss(logits, labels, config.smoothing)

    def tri():
        return triplet_loss(features, labels, config.triplet_margin, config.triplet_reduction)

    def cir():
        return circle_loss(features, labels, config.circle_scale, config.delta_p, config.delta_n)

    def cos():
        if class_weights is None:
            raise ConfigError("cosface term needs class weights")
        return cosface_loss(features, labels, class_weights,
                            config.cosface_scale, config.cosface_margin)

    total, report = None, {}
    for name, w, fn in zip(TERMS, weights.as_tuple(), (ce, tri, cir, cos)):
        if w > 0:
            term = fn()
            report[name] = term.item()
            part = term if w == 1.0 else T.scale(term, w)
            total = part if total is None else T.add(total, part)
        else:
            try:
                with T.no_grad():
                    report[name] = fn().item()
            except (ConfigError, NoPairs, NoPositive, NoNegative, BadLabel):
                report[name] = None
    report["total"] = total.item()
    return total, report
