import os
import subprocess
import sys

import numpy as np
import pytest
from scipy.signal import correlate

from pcdreid import kernels

BACKENDS = sorted(kernels.available_backends())
needs_cython = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled extension not built")


def _conv_oracle(x, w):
    b, c, h, wd = x.shape
    o = w.shape[0]
    out = np.zeros((b, o, h, wd))
    for i in range(b):
        for j in range(o):
            for k in range(c):
                out[i, j] += correlate(x[i, k], w[j, k], mode="same")
    return out


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("ksize", [1, 3, 7])
def test_conv2d_forward_matches_scipy_correlation(backend, ksize):
    rng = np.random.default_rng(ksize)
    x = rng.standard_normal((2, 3, 9, 6))
    w = rng.standard_normal((2, 3, ksize, ksize))
    np.testing.assert_allclose(kernels.conv2d_forward(x, w, backend), _conv_oracle(x, w),
                               rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_conv2d_backward_is_the_adjoint(backend):
    # <conv(x, w), g> = <x, gx> = <w, gw> because conv is bilinear
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((2, 2, 7, 5)), rng.standard_normal((3, 2, 5, 5))
    g = rng.standard_normal((2, 3, 7, 5))
    y = kernels.conv2d_forward(x, w, backend)
    gx, gw = kernels.conv2d_backward(x, w, g, backend)
    inner = (y * g).sum()
    assert np.isclose((x * gx).sum(), inner, rtol=1e-12)
    assert np.isclose((w * gw).sum(), inner, rtol=1e-12)


def _rank_oracle(matches, keep):
    out = []
    for m, k in zip(matches.astype(bool), keep.astype(bool)):
        m = m[k]
        hits = [i + 1 for i, v in enumerate(m) if v]
        if not hits:
            out.append((0, 0.0, 0.0, 0, int(k.sum())))
            continue
        ap = sum((j + 1) / r for j, r in enumerate(hits)) / len(hits)
        out.append((hits[0], ap, len(hits) / hits[-1], len(hits), int(k.sum())))
    return out


@pytest.mark.parametrize("backend", BACKENDS)
def test_rank_metrics_match_naive_loop(backend):
    rng = np.random.default_rng(2)
    keep = (rng.random((30, 25)) < 0.8).astype(np.int8)
    matches = ((rng.random((30, 25)) < 0.2) & keep.astype(bool)).astype(np.int8)
    first, ap, inp, n, kept = kernels.rank_metrics(matches, keep, backend)
    for i, (f, a, p, c, k) in enumerate(_rank_oracle(matches, keep)):
        assert (first[i], n[i], kept[i]) == (f, c, k)
        assert abs(ap[i] - a) < 1e-15 and abs(inp[i] - p) < 1e-15


@needs_cython
def test_backends_agree():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((3, 2, 16, 8)), rng.standard_normal((1, 2, 7, 7))
    g = rng.standard_normal((3, 1, 16, 8))
    np.testing.assert_allclose(kernels.conv2d_forward(x, w, "cython"),
                               kernels.conv2d_forward(x, w, "python"), rtol=1e-13, atol=1e-13)
    for a, b in zip(kernels.conv2d_backward(x, w, g, "cython"),
                    kernels.conv2d_backward(x, w, g, "python")):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
    keep = (rng.random((40, 60)) < 0.9).astype(np.int8)
    matches = ((rng.random((40, 60)) < 0.1) & keep.astype(bool)).astype(np.int8)
    for a, b in zip(kernels.rank_metrics(matches, keep, "cython"),
                    kernels.rank_metrics(matches, keep, "python")):
        assert np.array_equal(a, b)


def test_unknown_backend_is_rejected():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_environment_variable_forces_fallback():
    env = dict(os.environ, PCDREID_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import pcdreid.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
