#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure-numpy fallback.

Run after building the extension (pip install -e . --no-build-isolation):

    python3 benchmarks/bench_kernels.py [--sizes 64,128,256] [--repeats 20]
"""

import argparse
import time

import numpy as np

from sarreg import kernels
from sarreg.kernels import numpy_backend


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_size(size, repeats):
    rng = np.random.default_rng(size)
    img = rng.random((size, size))
    field = rng.uniform(-6, 6, (size, size, 2))
    spacing = max(2, size // 4)
    gh = (size - 1) // spacing + 4
    coeffs = rng.normal(0, 10, (gh, gh, 2))
    n_pts = 8 * size
    src = rng.uniform(0, size, (n_pts, 2))
    dst = rng.uniform(0, size, (n_pts, 2))

    cases = {
        "warp_bilinear": (lambda m: m.warp_bilinear(img, field)),
        "warp_nearest": (lambda m: m.warp_nearest(img, field)),
        "bspline_dense": (lambda m: m.bspline_dense(coeffs, spacing, size, size)),
        "nearest_distances": (lambda m: m.nearest_distances(src, dst)),
    }
    rows = []
    for name, call in cases.items():
        t_np = timeit(lambda: call(numpy_backend), repeats)
        if kernels.BACKEND == "cython":
            t_cy = timeit(lambda: call(kernels._impl), repeats)
            rows.append((name, size, t_np * 1e3, t_cy * 1e3, t_np / t_cy))
        else:
            rows.append((name, size, t_np * 1e3, float("nan"), float("nan")))
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sizes", default="64,128,256")
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    print(f"active backend: {kernels.BACKEND}")
    if kernels.BACKEND != "cython":
        print("compiled extension not available; timing the fallback only")
    header = f"{'kernel':<20}{'size':>6}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for size in (int(s) for s in args.sizes.split(",")):
        for name, sz, t_np, t_cy, speed in bench_size(size, args.repeats):
            cy = f"{t_cy:12.3f}" if np.isfinite(t_cy) else f"{'-':>12}"
            sp = f"{speed:9.1f}x" if np.isfinite(speed) else f"{'-':>10}"
            print(f"{name:<20}{sz:>6}{t_np:12.3f}{cy}{sp}")


if __name__ == "__main__":
    main()
