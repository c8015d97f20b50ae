"""Timing comparison of the JIT kernels against their pure-numpy fallbacks.

Run:  python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs on representative workloads under both backends; the
table reports best-of-N wall times and the speedup ratio.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from petrel import kernels
from petrel.features import GLCM_DIRECTIONS


def _best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _workloads():
    rng = np.random.default_rng(2024)

    levels_small = rng.integers(0, 33, size=(24, 24, 24)).astype(np.int32)
    levels_big = rng.integers(0, 33, size=(64, 64, 64)).astype(np.int32)
    yield "glcm 24^3 x13 dirs", lambda: kernels.glcm_count(levels_small, GLCM_DIRECTIONS, 32)
    yield "glcm 64^3 x13 dirs", lambda: kernels.glcm_count(levels_big, GLCM_DIRECTIONS, 32)

    zones_small = rng.integers(0, 6, size=(24, 24, 24)).astype(np.int32)
    zones_big = rng.integers(0, 6, size=(64, 64, 64)).astype(np.int32)
    yield "labels 24^3", lambda: kernels.label_components(zones_small)
    yield "labels 64^3", lambda: kernels.label_components(zones_big)

    n, p = 130, 42
    x = rng.standard_normal((n, p))
    beta_true = np.zeros(p)
    beta_true[:4] = [1.5, -0.8, 0.6, 0.4]
    y = x @ beta_true + 0.2 * rng.standard_normal(n)
    g = x.T @ x / n
    c = x.T @ y / n
    lam_max = float(np.abs(c).max())
    grid = np.logspace(np.log10(lam_max), np.log10(lam_max * 1e-4), 100)

    def lasso_path():
        beta = None
        for lam in grid:
            beta, _, _ = kernels.lasso_cd(g, c, float(lam), beta=beta, tol=1e-7, max_sweeps=200)

    yield "lasso path 130x42 x100 lams", lasso_path


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5, help="best-of-N timing")
    args = parser.parse_args()

    if not kernels.HAVE_NUMBA:
        print("numba is not importable; only the numpy backend will run")

    kernels.warm_kernels()
    rows = []
    for name, fn in _workloads():
        timings = {}
        for mode in ("numba", "numpy"):
            if mode == "numba" and not kernels.HAVE_NUMBA:
                timings[mode] = float("nan")
                continue
            kernels.set_backend(mode)
            fn()  # one untimed pass per backend
            timings[mode] = _best_of(fn, args.repeat)
        kernels.set_backend("auto")
        rows.append((name, timings["numba"], timings["numpy"]))

    width = max(len(r[0]) for r in rows)
    print(f"{'workload'.ljust(width)}  {'numba':>10}  {'numpy':>10}  {'speedup':>8}")
    for name, t_nb, t_np in rows:
        ratio = t_np / t_nb if t_nb > 0 else float("nan")
        print(f"{name.ljust(width)}  {t_nb * 1e3:>8.2f}ms  {t_np * 1e3:>8.2f}ms  {ratio:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
