"""Time the numba kernels against their numpy twins on realistic grid sizes.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Both paths run in the same process (the env flag only picks the default
binding), and every pair is checked for agreement before timing.
"""
import argparse
import json
import time
import warnings

import numpy as np

from conjlab import _kernels as k
from conjlab.flow import FlowEngine, GrowthWarning
from conjlab.sysdsl import load_system


def best_of(fn, repeat):
    fn()  # warm-up, includes numba compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def grid_ops(n, T, h):
    A = [["0"] * n for _ in range(n)]
    for i in range(n):
        A[i][i] = f"{-1 if i % 2 == 0 else 1} - 0.1*sin(t)"
    P0 = np.diag([1.0 if i % 2 == 0 else 0.0 for i in range(n)]).tolist()
    cfg = {"dim": n, "A": A, "f": ["0"] * n, "P0": P0, "horizon": T}
    with warnings.catch_warnings():
        # the unstable half grows like e^T; the sweeps never form those products
        warnings.simplefilter("ignore", GrowthWarning)
        return FlowEngine(load_system(json.dumps(cfg))).grid(h, T)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not k.HAVE_NUMBA:
        print("numba unavailable or disabled; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'shape':<22}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>9}")
    for n, T in ((1, 30.0), (2, 30.0), (4, 30.0)):
        ops = grid_ops(n, T, 0.01)
        N = ops.N
        for m in sorted({1, n}):
            g = np.ascontiguousarray(rng.standard_normal((N + 1, n, m)))
            args_ = (ops.F, ops.B, ops.P, ops.Q, ops.idx, ops.WP, ops.WQ, g)
            a, b = k.green_sweep_np(*args_), k.green_sweep_nb(*args_)
            assert np.allclose(a, b, rtol=1e-12, atol=1e-12)
            t_np = best_of(lambda: k.green_sweep_np(*args_), args.repeat)
            t_nb = best_of(lambda: k.green_sweep_nb(*args_), args.repeat)
            print(f"{'green_sweep':<22}{f'N={N} n={n} m={m}':<22}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}"
                  f"{t_np / t_nb:>8.1f}x")
        x0 = rng.standard_normal(n)
        kk = N // 2
        assert np.allclose(k.propagate_np(ops.F, ops.B, kk, x0), k.propagate_nb(ops.F, ops.B, kk, x0))
        t_np = best_of(lambda: k.propagate_np(ops.F, ops.B, kk, x0), args.repeat)
        t_nb = best_of(lambda: k.propagate_nb(ops.F, ops.B, kk, x0), args.repeat)
        print(f"{'propagate':<22}{f'N={N} n={n}':<22}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>8.1f}x")
    for P in (10_000, 100_000):
        c = rng.standard_normal(P)
        D = rng.uniform(-20, 20, P)
        slopes = np.linspace(0.01, 10, 1000)
        assert np.allclose(k.envelope_max_np(c, D, slopes), k.envelope_max_nb(c, D, slopes))
        t_np = best_of(lambda: k.envelope_max_np(c, D, slopes), max(3, args.repeat // 5))
        t_nb = best_of(lambda: k.envelope_max_nb(c, D, slopes), max(3, args.repeat // 5))
        print(f"{'envelope_max':<22}{f'P={P} slopes=1000':<22}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}"
              f"{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
