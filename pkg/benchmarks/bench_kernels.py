"""Time the compiled kernels against their interpreted fallbacks.

Each kernel is benchmarked on a representative workload: the coordinate
descent sweep on a dense SVM problem and the heat-map accumulator on a stack
of overlapping rectangles.  When numba is active the script times both the
jitted function and the identical pure-Python version; run it again with
PARTMINE_DISABLE_NUMBA=1 to confirm the interpreted numbers stand alone.

Usage: python3 benchmarks/bench_kernels.py [--repeats 5] [--svm-n 4000]
"""

import argparse
import time

import numpy as np

from partmine._kernels import NUMBA_ENABLED, dcd_sweep, heat_accumulate, kernel_mode


def best_of(func, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        func()
        times.append(time.perf_counter() - t0)
    return min(times)


def svm_workload(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, dim))
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    X += 0.3 * y[:, None]
    cost = rng.uniform(0.5, 2.0, n)
    qdiag = np.einsum("ij,ij->i", X, X)
    order = rng.permutation(n)
    return X, y, cost, qdiag, order


def bench_dcd(kernel, n, dim, sweeps, repeats):
    X, y, cost, qdiag, order = svm_workload(n, dim)

    def run():
        alpha = np.zeros(n)
        w = np.zeros(dim)
        for _ in range(sweeps):
            kernel(X, y, cost, qdiag, alpha, w, order)

    kernel(X, y, cost, np.ones(n), np.zeros(n), np.zeros(dim), order[:2])
    return best_of(run, repeats)


def heat_workload(n_boxes, size, seed=0):
    rng = np.random.default_rng(seed)
    lo_r = rng.integers(0, size - 1, n_boxes)
    lo_c = rng.integers(0, size - 1, n_boxes)
    hi_r = lo_r + rng.integers(1, size // 2, n_boxes)
    hi_c = lo_c + rng.integers(1, size // 2, n_boxes)
    np.minimum(hi_r, size, out=hi_r)
    np.minimum(hi_c, size, out=hi_c)
    values = rng.random(n_boxes)
    return lo_r, hi_r, lo_c, hi_c, values, size


def bench_heat(kernel, n_boxes, size, repeats):
    lo_r, hi_r, lo_c, hi_c, values, size = heat_workload(n_boxes, size)

    def run():
        grid = np.zeros((size, size))
        for _ in range(50):
            kernel(grid, lo_r, hi_r, lo_c, hi_c, values)

    kernel(np.zeros((4, 4)), lo_r[:1] % 4, hi_r[:1] % 4 + 1,
           lo_c[:1] % 4, hi_c[:1] % 4 + 1, values[:1])
    return best_of(run, repeats)


def variants(kernel):
    out = [(kernel_mode(), kernel)]
    if NUMBA_ENABLED:
        out.append(("interpreted", kernel.py_func))
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--svm-n", type=int, default=4000)
    parser.add_argument("--svm-dim", type=int, default=64)
    parser.add_argument("--svm-sweeps", type=int, default=20)
    # defaults mirror the pipeline: stride-4 cells over 128 px images and
    # one box per instance; large rectangles on big grids favor the
    # interpreted path instead, because its slice-add is already vectorized
    parser.add_argument("--heat-boxes", type=int, default=50)
    parser.add_argument("--heat-size", type=int, default=32)
    args = parser.parse_args(argv)

    print(f"kernel mode: {kernel_mode()}")
    rows = []
    for mode, kernel in variants(dcd_sweep):
        t = bench_dcd(kernel, args.svm_n, args.svm_dim, args.svm_sweeps,
                      args.repeats)
        rows.append((f"dcd_sweep {args.svm_n}x{args.svm_dim}, "
                     f"{args.svm_sweeps} sweeps", mode, t))
    for mode, kernel in variants(heat_accumulate):
        t = bench_heat(kernel, args.heat_boxes, args.heat_size, args.repeats)
        rows.append((f"heat_accumulate {args.heat_boxes} boxes on "
                     f"{args.heat_size}^2 x50", mode, t))

    width = max(len(r[0]) for r in rows)
    base = {}
    for workload, mode, t in rows:
        base.setdefault(workload, t)
        ratio = t / base[workload]
        print(f"{workload:<{width}}  {mode:>11}  {t * 1e3:9.2f} ms  "
              f"{ratio:6.1f}x")


if __name__ == "__main__":
    main()
