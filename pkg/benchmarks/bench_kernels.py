"""Compare the numba and numpy PCD kernels.

Usage: python3 benchmarks/bench_kernels.py [--sizes 10 30 100 300 1000] [--repeat 3]

For each size, runs a fixed number of inner PCD steps (target 0, so no
early stop) and a full IDFG outer solve under each backend, then prints
wall times and the largest difference between the two results.
"""

import argparse
import time

import numpy as np

from dualmpc import _accel, dual, kernels
from dualmpc.harness.generators import gen_random_qp
from dualmpc.model import constants


def _time(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_inner(n, steps, repeat):
    qp = gen_random_qp(n, seed=0)
    consts = constants(qp)
    lam = np.abs(np.random.default_rng(1).standard_normal(qp.p))
    c = qp.q + qp.G.T @ lam
    Lc = consts.coordinate_lipschitz(qp.partition)
    u0 = np.zeros(n)
    res = {}
    for backend in ("numba", "numpy"):
        def run():
            return kernels.pcd_loop(qp.H, c, qp.box.lb, qp.box.ub, Lc, qp.partition.M,
                                    consts.sigma_F, 0.0, steps, u0, backend=backend)

        run()  # compile / warm caches
        res[backend] = _time(run, repeat)
    diff = float(np.max(np.abs(res["numba"][1][0] - res["numpy"][1][0])))
    return res["numba"][0], res["numpy"][0], diff


def bench_outer(n, eps_out, repeat):
    qp = gen_random_qp(n, seed=0)
    consts = constants(qp)
    k_out, eps_in = dual.idfg_iterations(consts.L_d_exact, 1.0, eps_out)
    params = dual.OuterParams(dual.IDFG, eps_out, eps_in, k_out)
    res = {}
    for backend in ("numba", "numpy"):
        _accel.set_backend(backend)
        try:
            dual.solve(qp, params, consts=consts, check=False)
            res[backend] = _time(lambda: dual.solve(qp, params, consts=consts, check=False), repeat)
        finally:
            _accel.set_backend("numba")
    diff = float(np.max(np.abs(res["numba"][1][0] - res["numpy"][1][0])))
    return k_out, res["numba"][0], res["numpy"][0], diff


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[10, 30, 100, 300, 1000])
    ap.add_argument("--steps", type=int, default=200, help="inner PCD steps per call")
    ap.add_argument("--eps-out", type=float, default=1e-2)
    ap.add_argument("--outer-max-n", type=int, default=100, help="skip outer solves above this size")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if not _accel.HAS_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'n':>6} {'inner numba s':>14} {'inner numpy s':>14} {'speedup':>8} {'max|du|':>10}")
    for n in args.sizes:
        tb, tn, diff = bench_inner(n, args.steps, args.repeat)
        print(f"{n:>6} {tb:>14.4f} {tn:>14.4f} {tn / tb:>8.1f} {diff:>10.2e}")
    print()
    print(f"{'n':>6} {'k_out':>7} {'IDFG numba s':>13} {'IDFG numpy s':>13} {'speedup':>8} {'max|du|':>10}")
    for n in args.sizes:
        if n > args.outer_max_n:
            continue
        k, tb, tn, diff = bench_outer(n, args.eps_out, args.repeat)
        print(f"{n:>6} {k:>7} {tb:>13.4f} {tn:>13.4f} {tn / tb:>8.1f} {diff:>10.2e}")


if __name__ == "__main__":
    main()
