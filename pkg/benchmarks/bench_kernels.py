"""Time the numba and numpy kernel backends side by side.

    python benchmarks/bench_kernels.py [--sizes 64 256 400] [--steps 20000]

Prints one row per (kernel, n) with the best-of-k wall time of each backend
and the speedup.  The first numba call per signature is a warm-up and is not
timed.
"""

import argparse
import math
import time

import numpy as np

from entot import _kernels
from entot.core import RegularizedInstance
from entot.instances import synthetic_instance


def best_of(fn, repeat):
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def lse_case(inst):
    n = inst.n
    u, v = np.zeros(n), np.zeros(n)
    return lambda: _kernels.lse_axes(inst.log_kernel, u, v, 1.0, 0.0)


def greenkhorn_case(inst, steps):
    n = inst.n
    logK = np.ascontiguousarray(inst.log_kernel)
    r, c = inst.r.weights, inst.c.weights

    def run():
        u, v = np.zeros(n), np.zeros(n)
        total, row, col = _kernels.lse_axes(logK, u, v, 1.0, 0.0)
        rs, cs = np.exp(row), np.exp(col)
        acc = np.array([math.exp(total), 0.0, 0.0])
        res, dual = np.empty(steps + 1), np.empty(steps + 1)
        axis = np.empty(steps + 1, dtype=np.int8)
        idx = np.empty(steps + 1, dtype=np.int64)
        _kernels.greenkhorn_steps(logK, r, c, u, v, rs, cs, acc, res, dual, axis, idx,
                                  0, steps + 1, steps, 0.0, 8 * n)

    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[64, 256, 400])
    ap.add_argument("--steps", type=int, default=20_000, help="Greenkhorn steps per timing")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    print(f"{'kernel':<12} {'n':>5} {'numba [s]':>11} {'numpy [s]':>11} {'speedup':>8}")
    for n in args.sizes:
        side = int(round(math.sqrt(n)))
        spec = synthetic_instance(0, side, 0.1)
        inst = RegularizedInstance(spec.cost, spec.r, spec.c, 1.0)
        cases = [("lse_axes", lse_case(inst)),
                 ("greenkhorn", greenkhorn_case(inst, args.steps))]
        for name, fn in cases:
            times = {}
            for backend in ("numba", "numpy"):
                with _kernels.use_backend(backend):
                    fn()  # warm-up / compile
                    times[backend] = best_of(fn, args.repeat)
            print(f"{name:<12} {spec.n:>5} {times['numba']:>11.5f} {times['numpy']:>11.5f} "
                  f"{times['numpy'] / times['numba']:>7.1f}x")


if __name__ == "__main__":
    main()
