"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeats N]

Shapes mirror the training loop: mini-batches of 8 and a full-corpus
evaluation pass of 2000 rows.
"""
import argparse
import timeit

import numpy as np

from vaalab import _kernels_py as pyk

try:
    from vaalab import _ckernels as ck
except ImportError:  # extension not built
    ck = None

CASES = [
    ("linear d16 k4, batch 8", 0, 16, 0, 4, 0, 8),
    ("linear d16 k4, batch 2000", 0, 16, 0, 4, 0, 2000),
    ("mlp d16 h32 k4 tanh, batch 8", 1, 16, 32, 4, 0, 8),
    ("mlp d16 h32 k4 relu, batch 2000", 1, 16, 32, 4, 1, 2000),
]


def n_params(kind, d, h, k):
    return k * d + k if kind == 0 else h * d + h + k * h + k


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'case':36s} {'python us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for name, kind, d, h, k, act, n in CASES:
        X = rng.standard_normal((n, d))
        y = rng.integers(0, k, size=n).astype(np.int64)
        p = rng.standard_normal(n_params(kind, d, h, k)) * 0.1
        number = max(1, 20000 // n)
        t_py = min(timeit.repeat(lambda: pyk.loss_grad(X, y, p, kind, d, h, k, act), number=number,
                                 repeat=args.repeats)) / number
        if ck is None:
            print(f"{name:36s} {t_py * 1e6:10.1f} {'n/a':>10s} {'':>8s}")
            continue
        t_c = min(timeit.repeat(lambda: ck.loss_grad(X, y, p, kind, d, h, k, act), number=number,
                                repeat=args.repeats)) / number
        print(f"{name:36s} {t_py * 1e6:10.1f} {t_c * 1e6:10.1f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
