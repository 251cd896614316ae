"""Benchmark the numba kernels against their pure-numpy twins.

Run:  python benchmarks/bench_kernels.py
The numba path must be importable (STRATAPC_NUMBA unset or 1); the timings
cover the three hot kernels at sizes matching a single-country fit, the
EU-scale application, and a posterior scoring pass.
"""

import time

import numpy as np

from stratapc import _kernels


def timeit(fn, *args, repeat=200, warmup=2):
    for _ in range(warmup):
        fn(*args)
    best = np.inf
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best


def poisson_case(rng, n_cells):
    mu = rng.normal(-5.0, 0.8, size=n_cells)
    exposure = np.full(n_cells, 1e5)
    y = rng.poisson(exposure * np.exp(mu)).astype(float)
    observed = rng.uniform(size=n_cells) > 0.15
    return mu, y, exposure, observed


def pointwise_case(rng, n_samples, n_cells):
    logrates = rng.normal(-5.0, 0.5, size=(n_samples, n_cells))
    exposure = np.full(n_cells, 1e5)
    y = rng.poisson(exposure * np.exp(logrates[0])).astype(float)
    const = rng.normal(size=n_cells)
    return logrates, y, exposure, const


def pit_case(rng, n_samples, n_cells):
    samples = rng.poisson(40.0, size=(n_samples, n_cells)).astype(float)
    y = rng.poisson(40.0, size=n_cells).astype(float)
    return samples, y


def main():
    if _kernels.BACKEND != "numba":
        print("numba backend unavailable (STRATAPC_NUMBA=0 or numba missing); nothing to compare")
        return
    rng = np.random.default_rng(0)
    rows = []

    for label, n in [("likelihood 10x10x6", 600), ("likelihood 17x18x25", 7650)]:
        args = poisson_case(rng, n)
        t_np = timeit(_kernels.poisson_ll_grad_w_numpy, *args)
        t_nb = timeit(_kernels.poisson_ll_grad_w_numba, *args)
        rows.append((label, t_np, t_nb))

    for label, s, c in [("pointwise 1000x600", 1000, 600), ("pointwise 300x1530", 300, 1530)]:
        args = pointwise_case(rng, s, c)
        t_np = timeit(_kernels.pointwise_poisson_ll_numpy, *args, repeat=20)
        t_nb = timeit(_kernels.pointwise_poisson_ll_numba, *args, repeat=20)
        rows.append((label, t_np, t_nb))

    for label, s, c in [("pit 600x300", 600, 300), ("pit 1000x1530", 1000, 1530)]:
        args = pit_case(rng, s, c)
        t_np = timeit(_kernels.pit_mean_cdf_numpy, *args, repeat=20)
        t_nb = timeit(_kernels.pit_mean_cdf_numba, *args, repeat=20)
        rows.append((label, t_np, t_nb))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}")
    for label, t_np, t_nb in rows:
        print(
            f"{label:<{width}}  {t_np * 1e6:>8.1f}us  {t_nb * 1e6:>8.1f}us  "
            f"{t_np / t_nb:>7.2f}x"
        )


if __name__ == "__main__":
    main()
