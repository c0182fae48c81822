"""Time each compiled kernel against its numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel with the best-of-``repeat`` wall time for both
backends, their ratio and the max absolute difference of the outputs.
The numba timing excludes the first (compiling) call.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from slfi import accel
from slfi.metrics import kernel_sum
from slfi.simulators import clv_trajectory, mg1_inter_departures
from slfi.spline import rq_forward, rq_forward_with_grad, rq_inverse


def _cases(rng):
    n, k = 200_000, 16
    x = rng.uniform(-3.5, 3.5, n)
    raw = 0.5 * rng.standard_normal((n, 3 * k - 1))
    y, _ = rq_forward(x, raw, 3.0)
    g = rng.standard_normal(n)

    def spline_grad():
        _, _, back = rq_forward_with_grad(x, raw, 3.0)
        return back(g, g)[1]

    a, b = rng.standard_normal((3000, 8)), rng.standard_normal((3000, 8)) + 0.2
    theta = np.column_stack([rng.uniform(0, 10, 20_000), rng.uniform(0, 10, 20_000), rng.uniform(0, 1 / 3, 20_000)])
    u, e = rng.random((20_000, 50)), rng.exponential(size=(20_000, 50))
    alphas = -np.abs(0.2 * rng.standard_normal((500, 5, 5))) - np.eye(5)
    r, x0 = np.ones(5), np.full(5, 0.2)
    return {
        "spline forward": lambda: rq_forward(x, raw, 3.0)[0],
        "spline inverse": lambda: rq_inverse(y, raw, 3.0)[0],
        "spline gradient": spline_grad,
        "mmd kernel sum": lambda: np.array([kernel_sum(a, b, 1.5)]),
        "M/G/1 queue": lambda: mg1_inter_departures(theta, u, e),
        "CLV RK4": lambda: clv_trajectory(alphas, r, x0, 0.05, 400),
    }


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if not accel.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    initial = accel.use_numba()
    cases = _cases(np.random.default_rng(args.seed))
    print(f"{'kernel':<18}{'numba s':>11}{'numpy s':>11}{'speedup':>9}{'max |diff|':>13}")
    try:
        for name, fn in cases.items():
            accel.set_backend(True)
            fn()  # compile
            t_nb, out_nb = _best(fn, args.repeat)
            accel.set_backend(False)
            t_np, out_np = _best(fn, args.repeat)
            diff = float(np.nanmax(np.abs(np.asarray(out_nb) - np.asarray(out_np))))
            print(f"{name:<18}{t_nb:>11.4f}{t_np:>11.4f}{t_np / t_nb:>9.1f}{diff:>13.2e}")
    finally:
        accel.set_backend(initial)


if __name__ == "__main__":
    main()
