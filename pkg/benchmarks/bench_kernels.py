"""Time the numba kernels against their pure-numpy fallbacks.

Usage:
    python benchmarks/bench_kernels.py [--sizes 64 256 1024] [--repeats 5]

Each kernel is run once before timing so numba compilation is excluded.
"""

import argparse
import os
import time
from contextlib import contextmanager

import numpy as np

from pcda._accel import HAVE_NUMBA
from pcda.geometry._kernels import auction_assign, batch_auction_assign, fps_indices
from pcda.geometry.emd import pairwise_distances


@contextmanager
def backend(name):
    old = os.environ.get("PCDA_DISABLE_NUMBA")
    os.environ["PCDA_DISABLE_NUMBA"] = "0" if name == "numba" else "1"
    try:
        yield
    finally:
        if old is None:
            del os.environ["PCDA_DISABLE_NUMBA"]
        else:
            os.environ["PCDA_DISABLE_NUMBA"] = old


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases(n, rng):
    cloud = rng.normal(size=(4 * n, 3))
    a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    cost = pairwise_distances(a, b)
    batch_a, batch_b = rng.normal(size=(8, n, 3)), rng.normal(size=(8, n, 3))
    return {
        f"fps {4 * n}->{n}": lambda: fps_indices(cloud, n, 0),
        f"auction {n}x{n}": lambda: auction_assign(cost, 1e-3),
        f"batch auction 8x{n}": lambda: batch_auction_assign(batch_a, batch_b, 1e-2),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[64, 256, 1024])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path can be timed")

    print(f"{'kernel':<24}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for n in args.sizes:
        for label, fn in cases(n, np.random.default_rng(args.seed)).items():
            timings = {}
            for name in ("numba", "numpy") if HAVE_NUMBA else ("numpy",):
                with backend(name):
                    timings[name] = best_of(fn, args.repeats)
            fast = timings.get("numba", float("nan"))
            print(f"{label:<24}{1e3 * fast:>12.2f}{1e3 * timings['numpy']:>12.2f}"
                  f"{timings['numpy'] / fast:>9.1f}x")


if __name__ == "__main__":
    main()
