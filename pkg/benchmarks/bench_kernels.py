"""Time the compiled and pure-Python kernel backends side by side.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes match the triplet-attention gates at the default 256×128 input
(batch 8) and a 3368×15913 ranking table. The ranking table is the size
of a full Market1501 query/gallery evaluation.
"""
import argparse
import timeit

import numpy as np

from pcdreid import kernels


def cases(rng):
    x = rng.standard_normal((8, 2, 256, 128))
    w = rng.standard_normal((1, 2, 7, 7))
    g = rng.standard_normal((8, 1, 256, 128))
    keep = (rng.random((3368, 15913)) < 0.999).astype(np.int8)
    matches = ((rng.random(keep.shape) < 0.0015) & keep.astype(bool)).astype(np.int8)
    matches[:, 0] = 1
    return {
        "conv2d_forward 8x2x256x128 k7": lambda b: kernels.conv2d_forward(x, w, b),
        "conv2d_backward 8x2x256x128 k7": lambda b: kernels.conv2d_backward(x, w, g, b),
        "rank_metrics 3368x15913": lambda b: kernels.rank_metrics(matches, keep, b),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    backends = sorted(kernels.available_backends())
    print(f"default backend: {kernels.BACKEND}; available: {', '.join(backends)}")
    table = cases(np.random.default_rng(0))
    print(f"{'kernel':<34}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, fn in table.items():
        best = {b: min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) for b in backends}
        row = f"{name:<34}" + "".join(f"{best[b] * 1e3:>10.1f}ms" for b in backends)
        if len(backends) == 2:
            row += f"{best['python'] / best['cython']:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
