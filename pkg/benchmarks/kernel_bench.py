"""Time the numba kernels against the pure-numpy fallback.

Run:  python benchmarks/kernel_bench.py [--repeats N]

The table reports the best-of-repeats time per call for each kernel at
the bundled problems' state dimension, plus an end-to-end timing of one
reduced-order Gauss-Newton solve under each path (the fallback path is
what ``SGROMTR_NO_NUMBA=1`` selects).
"""

import argparse
import time
import timeit

import numpy as np

from sgromtr import kernels

N_STATE = 127
N_COLS = 40


def make_args(rng):
    u = rng.standard_normal(N_STATE)
    kap = 1.0 + 0.3 * rng.random(N_STATE + 1)
    src = rng.standard_normal(N_STATE)
    v = rng.standard_normal(N_STATE)
    V = rng.standard_normal((N_STATE, N_COLS))
    lo = np.concatenate([[0.0], rng.standard_normal(N_STATE - 1)])
    dg = 2.0 + rng.random(N_STATE)
    up = np.concatenate([rng.standard_normal(N_STATE - 1), [0.0]])
    h = 1.0 / (N_STATE + 1)
    return {
        "diffusion_residual": (u, kap, h, src),
        "diffusion_bands": (kap, h),
        "burgers_residual": (u, 1.0, 0.0, 0.03, h, src),
        "burgers_bands": (u, 1.0, 0.0, 0.03, h),
        "band_matvec": (lo, dg, up, v),
        "band_t_matvec": (lo, dg, up, v),
        "band_matmat": (lo, dg, up, V),
        "band_t_matmat": (lo, dg, up, V),
    }


def bench_kernels(repeats):
    args = make_args(np.random.default_rng(0))
    impls = kernels.IMPLEMENTATIONS
    if "numba" not in impls:
        print("numba unavailable (or disabled); nothing to compare")
        return
    # trigger jit compilation outside the timed region
    for name, a in args.items():
        impls["numba"][name](*a)

    print(f"{'kernel':<20} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    for name, a in args.items():
        times = {}
        for impl in ("numpy", "numba"):
            fn = impls[impl][name]
            n_calls = 2000
            best = min(timeit.timeit(lambda: fn(*a), number=n_calls)
                       for _ in range(repeats))
            times[impl] = best / n_calls * 1e6
        print(f"{name:<20} {times['numpy']:>10.2f} {times['numba']:>10.2f} "
              f"{times['numpy'] / times['numba']:>7.1f}x")


def bench_rom_solve(repeats):
    """One cold reduced Gauss-Newton solve under each kernel path."""
    from sgromtr.hdm import BurgersControl, solve_adjoint, solve_primal
    from sgromtr.rom import ReducedBasis, solve_rom_primal

    problem = BurgersControl()
    rng = np.random.default_rng(1)
    basis = ReducedBasis(problem.n_u)
    mu = rng.uniform(-0.3, 0.3, problem.n_mu)
    for _ in range(8):
        y = rng.uniform(-1.0, 1.0, 2)
        sol = solve_primal(problem, y, mu)
        adj = solve_adjoint(problem, sol.u, y, mu)
        basis.append_snapshots([sol.u, adj.lam], ["primal", "adjoint"], y, mu)
    y_test = np.array([0.37, -0.21])

    print(f"\n{'rom primal solve':<20} {'ms/call':>10}")
    for impl in ("numpy", "numba"):
        if impl not in kernels.IMPLEMENTATIONS:
            continue
        saved = {}
        for name in kernels.IMPLEMENTATIONS[impl]:
            saved[name] = getattr(kernels, name)
            setattr(kernels, name, kernels.IMPLEMENTATIONS[impl][name])
        try:
            best = np.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                for _ in range(20):
                    solve_rom_primal(problem, basis, y_test, mu)
                best = min(best, (time.perf_counter() - t0) / 20)
        finally:
            for name, fn in saved.items():
                setattr(kernels, name, fn)
        print(f"{impl:<20} {best * 1e3:>10.3f}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    print(f"active path: {kernels.ACTIVE_IMPL}")
    bench_kernels(args.repeats)
    bench_rom_solve(args.repeats)


if __name__ == "__main__":
    main()
