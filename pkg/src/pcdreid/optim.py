"""Learning-rate schedule and in-place optimizer updates on numpy arrays."""
import math

import numpy as np

from .errors import ShapeMismatch


def cosine_lr(t, total, lr0=0.008, lr_min=0.0):
    """lr_min + (lr0 - lr_min)(1 + cos(pi t / T)) / 2, exact at both ends."""
    if not 0 <= t <= total:
        raise ValueError(f"t={t} outside [0, {total}]")
    if t == 0:
        return float(lr0)
    if t == total:
        return float(lr_min)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


def _check(*arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ShapeMismatch(f"optimizer state {a.shape} vs parameter {shape}")


def sgd_step(param, grad, lr, momentum, velocity):
    """v <- momentum*v + g ; p <- p - lr*v. Updates both arrays in place."""
    _check(param, grad, velocity)
    velocity *= momentum
    velocity += grad
    param -= lr * velocity
    return param, velocity


def adam_step(param, grad, lr, betas, eps, m, v, t):
    """Bias-corrected Adam update at step ``t`` (1-based), in place."""
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    _check(param, grad, m, v)
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
    return param, m, v


class SGD:
    def __init__(self, params, momentum=0.9):
        self.params = params
        self.momentum = momentum
        self.state = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr):
        for k, p in self.params.items():
            if p.grad is not None:
                sgd_step(p.data, p.grad, lr, self.momentum, self.state[k])

    def state_tensors(self):
        return {f"velocity/{k}": v for k, v in self.state.items()}

    def load_state(self, tensors, scalars):
        for k in self.state:
            self.state[k] = np.array(tensors[f"velocity/{k}"], dtype=np.float64)


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr):
        self.t += 1
        for k, p in self.params.items():
            if p.grad is not None:
                adam_step(p.data, p.grad, lr, self.betas, self.eps, self.m[k], self.v[k], self.t)

    def state_tensors(self):
        out = {f"adam.m/{k}": a for k, a in self.m.items()}
        out.update({f"adam.v/{k}": a for k, a in self.v.items()})
        return out

    def load_state(self, tensors, scalars):
        self.t = int(scalars.get("adam_t", 0))
        for k in self.m:
            self.m[k] = np.array(tensors[f"adam.m/{k}"], dtype=np.float64)
            self.v[k] = np.array(tensors[f"adam.v/{k}"], dtype=np.float64)


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = list(params)
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm is not None and total > max_norm:
        s = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s
    return total
