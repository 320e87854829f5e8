"""Numpy implementations of the hot kernels.

Used when the compiled ``_kernels_c`` extension is unavailable or when
``PCDREID_PURE_PYTHON=1`` is set. Signatures match the extension exactly.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, k):
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(xp, (k, k), axis=(2, 3))


def conv2d_forward(x, w):
    """Stride-1 'same' cross-correlation. x: B×C×H×W, w: O×C×k×k."""
    k = w.shape[-1]
    return np.einsum("bchwij,ocij->bohw", _windows(x, k), w)


def conv2d_backward(x, w, gout):
    k = w.shape[-1]
    gw = np.einsum("bohw,bchwij->ocij", gout, _windows(x, k))
    wflip = w[:, :, ::-1, ::-1]
    gx = np.einsum("bohwij,ocij->bchw", _windows(gout, k), wflip)
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw)


def rank_metrics(matches, keep):
    """Per-query retrieval statistics over ranked match flags.

    Both inputs are Q×G int8 arrays already in ranked order; entries with
    ``keep == 0`` are skipped and do not occupy a rank position.

    Returns (first_hit, ap, inp, num_matches, num_kept); ``first_hit`` is
    the 1-based rank of the first true match, 0 when there is none.
    """
    q = matches.shape[0]
    first_hit = np.zeros(q, dtype=np.int64)
    ap = np.zeros(q, dtype=np.float64)
    inp = np.zeros(q, dtype=np.float64)
    num_matches = np.zeros(q, dtype=np.int64)
    num_kept = np.zeros(q, dtype=np.int64)
    for i in range(q):
        m = matches[i][keep[i] != 0]
        num_kept[i] = m.shape[0]
        pos = np.flatnonzero(m) + 1
        n = pos.shape[0]
        num_matches[i] = n
        if n == 0:
            continue
        first_hit[i] = pos[0]
        prec = np.arange(1, n + 1) / pos
        ap[i] = np.cumsum(prec)[-1] / n
        inp[i] = n / pos[-1]
    return first_hit, ap, inp, num_matches, num_kept
