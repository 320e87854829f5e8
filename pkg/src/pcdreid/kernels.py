"""Backend selection for the hot kernels.

The compiled extension is preferred; the numpy fallback is used when it
is missing or when ``PCDREID_PURE_PYTHON`` is set to a non-empty value
other than ``0``.
"""
import os

import numpy as np

from . import _kernels_py

_force_py = os.environ.get("PCDREID_PURE_PYTHON", "") not in ("", "0")

_compiled = None
if not _force_py:
    try:
        from . import _kernels_c as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"


def available_backends():
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def get_backend(name=None):
    if name is None:
        return _impl
    try:
        return available_backends()[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available") from None


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i8(a):
    return np.ascontiguousarray(a, dtype=np.int8)


def conv2d_forward(x, w, backend=None):
    return get_backend(backend).conv2d_forward(_f64(x), _f64(w))


def conv2d_backward(x, w, gout, backend=None):
    return get_backend(backend).conv2d_backward(_f64(x), _f64(w), _f64(gout))


def rank_metrics(matches, keep, backend=None):
    return get_backend(backend).rank_metrics(_i8(matches), _i8(keep))
