"""Time the compiled kernels against the numpy fallback on block-sized inputs.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5] [--points 512]

Each kernel is run on identical inputs with both backends; the script checks
that the outputs are bit-identical before reporting times.
"""
import argparse
import time

import numpy as np

from bfgseg import kernels


def _best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(n_points, rng):
    coords = rng.normal(size=(n_points, 3))
    feats = rng.random((n_points, 64))
    seeds = feats[rng.choice(n_points, 5, replace=False)]
    idx = rng.integers(0, 64, n_points)
    src = rng.normal(size=(n_points, 64))

    def scatter(b):
        return kernels.scatter_add_rows(np.zeros((64, 64)), idx, src, backend=b)

    return {
        "knn k=16": lambda b: kernels.knn_indices(coords, 16, backend=b),
        "fps K=5 (D=64)": lambda b: kernels.farthest_point_sampling(feats, 5, 0, backend=b),
        "nearest_seed K=5": lambda b: kernels.nearest_seed(feats, seeds, backend=b),
        "scatter_add_rows": scatter,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--points", type=int, default=512)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    try:
        kernels.get_backend("cython")
    except ImportError:
        print("compiled kernels are not built; only the numpy fallback is available")
        return 1
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':20s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(args.points, rng).items():
        if not np.array_equal(fn("python"), fn("cython")):
            raise SystemExit(f"{name}: backends disagree")
        tp = _best_of(lambda: fn("python"), args.repeat)
        tc = _best_of(lambda: fn("cython"), args.repeat)
        print(f"{name:20s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
