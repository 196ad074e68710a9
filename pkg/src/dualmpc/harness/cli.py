"""``dualmpc`` command line.

Subcommands: ``solve``, ``mpc``, ``gen``, ``study`` and ``verify``.
Exit codes: 0 success, 1 usage, 2 numeric failure, 3 infeasible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .. import _accel, dual, mpc, oracle
from ..errors import (
    AdmissibilityError,
    ConvergenceError,
    DimensionError,
    InfeasibleError,
    InvalidProblemError,
    SlaterError,
)
from ..model import constants, objective, slater_dual_bound, violation
from . import io
from .generators import fixture_mpc1, fixture_p1, gen_random_qp, gen_ring_traffic
from .studies import EXPERIMENTS, ExperimentConfig, run_experiment

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_INFEASIBLE = 3

METHOD_CHOICES = ("idg", "idfg", "subgrad")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p, method=True):
    if method:
        p.add_argument("--method", choices=METHOD_CHOICES, required=True)
        p.add_argument("--eps-out", type=float, required=True, help="outer accuracy")
        p.add_argument("--eps-in", type=float, default=None, help="override the inner accuracy rule")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="numba thread count")
    p.add_argument("--out", default=None, help="output file or directory")


def build_parser():
    parser = _Parser(prog="dualmpc", description="Inexact dual gradient solvers for coupled QPs and MPC.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="solve a problem JSON; write solution JSON and trace CSV")
    p.add_argument("problem", help="problem JSON file")
    _common(p)
    p.add_argument("--R-d", dest="R_d", type=float, default=None,
                   help="multiplier bound (default: Slater bound at lambda = 0)")
    p.add_argument("--k-out", type=int, default=None, help="override the outer iteration count")

    p = sub.add_parser("mpc", help="closed-loop simulation of a system JSON; write a CSV")
    p.add_argument("system", help="system JSON (bare or with x0/horizon/terminal)")
    _common(p)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--x0", default=None, help="comma-separated initial state")
    p.add_argument("--rd-rule", choices=mpc.RD_RULES, default="paper")
    p.add_argument("--warm-start", action="store_true")

    p = sub.add_parser("gen", help="write a generated instance as JSON")
    p.add_argument("kind", choices=("random-qp", "traffic", "fixture-p1", "fixture-mpc1"))
    p.add_argument("-n", type=int, default=10, help="random-qp size")
    p.add_argument("--block-size", type=int, default=1)
    p.add_argument("-M", type=int, default=4, help="traffic junction count")
    p.add_argument("-N", type=int, default=10, help="traffic horizon")
    p.add_argument("--instances", type=int, default=1, help="traffic initial states")
    _common(p, method=False)

    p = sub.add_parser("study", help="run an experiment; write CSVs")
    p.add_argument("experiment", help=f"one of {', '.join(EXPERIMENTS)} or a config JSON")
    _common(p, method=False)
    p.add_argument("--full", action="store_true", help="paper-scale sizes")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("verify", help="KKT and oracle report for a solution JSON")
    p.add_argument("solution", help="solution JSON written by solve")
    p.add_argument("--problem", default=None, help="problem JSON when the solution does not embed one")
    _common(p, method=False)
    return parser


def _method(name):
    return dual.normalize_method(name)


def _default_R_d(qp, consts):
    u_s, _ = oracle.find_slater(qp)
    d0 = oracle.exact_dual(qp, np.zeros(qp.p))
    return slater_dual_bound(qp, u_s, np.zeros(qp.p), d0)


def cmd_solve(args):
    qp = io.problem_from_json(io.read_json(args.problem))
    consts = constants(qp)
    method = _method(args.method)
    R_d = args.R_d if args.R_d is not None else _default_R_d(qp, consts)
    L = consts.L_d_exact
    if method == dual.IDFG:
        k_out, eps_in = dual.idfg_iterations(L, R_d, args.eps_out)
    else:
        k_out, eps_in = dual.idg_iterations(L, R_d, args.eps_out), args.eps_out
    if args.eps_in is not None:
        eps_in = args.eps_in
    if args.k_out is not None:
        k_out = args.k_out
    u, lam, trace = dual.solve(qp, dual.OuterParams(method, args.eps_out, eps_in, k_out), consts=consts)
    sol = dict(
        method=method, eps_out=args.eps_out, eps_in=eps_in, k_out=k_out, R_d=R_d, L_d=L,
        seed=args.seed, u=u, lam=lam, objective=objective(qp, u), violation=violation(qp, u),
        inner_uncertified=trace.uncertified, problem=qp.to_dict(),
    )
    if method != dual.SUBGRAD:
        cert = trace.certificates(trace.last_k, R_d)
        sol["certificates"] = dict(
            dual_subopt=cert.dual_subopt_bound, feas_violation=cert.feas_violation_bound,
            primal_upper=cert.primal_subopt_upper, primal_lower=-cert.primal_subopt_lower,
        )
    out = args.out
    if out is None:
        io.write_json(sol)
        return EXIT_OK
    if os.path.isdir(out) or out.endswith(os.sep):
        os.makedirs(out, exist_ok=True)
        sol_path = os.path.join(out, "solution.json")
    else:
        sol_path = out
    io.write_json(sol, sol_path)
    trace.to_csv(os.path.splitext(sol_path)[0] + "_trace.csv", R_d=None if method == dual.SUBGRAD else R_d)
    print(f"{method}: F = {sol['objective']:.6g}, violation = {sol['violation']:.3e}, k_out = {k_out}")
    return EXIT_OK


def cmd_mpc(args):
    sys_, x0, N, term = io.mpc_setup_from_json(io.read_json(args.system))
    if args.x0 is not None:
        x0 = np.array([float(v) for v in args.x0.split(",")])
    if args.horizon is not None:
        N = args.horizon
    if x0 is None or N is None:
        raise UsageError("the initial state and horizon must come from the file or --x0/--horizon")
    if x0.shape != (sys_.n_x,):
        raise UsageError(f"x0 has {x0.size} entries, the system has {sys_.n_x} states")
    method = _method(args.method)
    if method == dual.SUBGRAD:
        raise UsageError("closed-loop MPC needs a certified method (idg or idfg)")
    trace = mpc.closed_loop(sys_, int(N), x0, args.steps, method, args.eps_out, terminal=term,
                            rd_rule=args.rd_rule, warm_start=args.warm_start)
    path = args.out or "closed_loop.csv"
    if os.path.isdir(path):
        path = os.path.join(path, "closed_loop.csv")
    trace.to_csv(path)
    ok = all(r.lyapunov_ok for r in trace)
    print(f"{len(trace)} steps, final |x| = {np.linalg.norm(trace.states[-1]):.3e}, lyapunov_ok = {ok}")
    return EXIT_OK


def cmd_gen(args):
    if args.kind == "random-qp":
        obj = {"problem": gen_random_qp(args.n, args.seed, args.block_size).to_dict(),
               "generator": {"kind": "random-qp", "n": args.n, "seed": args.seed,
                             "block_size": args.block_size}}
    elif args.kind == "fixture-p1":
        obj = {"problem": fixture_p1().to_dict(), "generator": {"kind": "fixture-p1"}}
    elif args.kind == "fixture-mpc1":
        fx = fixture_mpc1()
        obj = io.mpc_setup_to_dict(fx.sys, fx.x0, fx.N, fx.terminal, {"generator": {"kind": "fixture-mpc1"}})
    else:
        inst = gen_ring_traffic(args.M, args.N, args.seed, n_initial=args.instances)
        obj = io.mpc_setup_to_dict(inst.sys, inst.x0[0], args.N, None, {
            "initial_states": [np.asarray(x).tolist() for x in inst.x0],
            "generator": {"kind": "traffic", "M": args.M, "N": args.N, "seed": args.seed,
                          "entries": list(inst.entries), "exits": list(inst.exits)},
        })
    io.write_json(obj, args.out)
    return EXIT_OK


def cmd_study(args):
    if args.experiment in EXPERIMENTS:
        cfg = ExperimentConfig.default(args.experiment, full=args.full)
    elif os.path.isfile(args.experiment):
        cfg = ExperimentConfig.load(args.experiment)
    else:
        raise UsageError(f"unknown experiment {args.experiment!r}; expected one of {EXPERIMENTS} or a file")
    cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "out": args.out or "results", "workers": args.workers})
    rows = run_experiment(cfg)
    print(f"{cfg.experiment}: {len(rows)} rows written to {cfg.out}")
    return EXIT_OK


def cmd_verify(args):
    sol = io.read_json(args.solution)
    if args.problem is not None:
        qp = io.problem_from_json(io.read_json(args.problem))
    elif "problem" in sol:
        qp = io.problem_from_json(sol)
    else:
        raise UsageError("the solution embeds no problem; pass --problem")
    u = np.asarray(sol["u"], dtype=float)
    lam = np.asarray(sol["lam"], dtype=float)
    if u.shape != (qp.n,) or lam.shape != (qp.p,):
        raise UsageError("solution dimensions do not match the problem")
    ref = oracle.reference_solve(qp)
    kkt = oracle.kkt_residual(qp, u, lam)
    report = dict(
        kkt=dict(stationarity=kkt.stationarity, primal_feas=kkt.primal_feas, dual_feas=kkt.dual_feas,
                 complementarity=kkt.complementarity, max=kkt.max),
        reference=dict(F_star=ref.F_star, lambda_star=ref.lambda_star, kkt_max=ref.kkt_residuals.max),
        primal_gap=objective(qp, u) - ref.F_star,
        dual_gap=ref.F_star - oracle.exact_dual(qp, np.maximum(lam, 0.0)),
        violation=violation(qp, u),
    )
    ok = True
    cert = sol.get("certificates")
    if cert:
        tol = 1e-9
        checks = dict(
            dual_gap=report["dual_gap"] <= cert["dual_subopt"] + tol,
            violation=report["violation"] <= cert["feas_violation"] + tol,
            primal_upper=report["primal_gap"] <= cert["primal_upper"] + tol,
            primal_lower=report["primal_gap"] >= cert["primal_lower"] - tol,
        )
        report["certificate_checks"] = checks
        ok = all(checks.values())
    report["ok"] = ok
    io.write_json(report, args.out)
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {"solve": cmd_solve, "mpc": cmd_mpc, "gen": cmd_gen, "study": cmd_study, "verify": cmd_verify}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.threads:
        _accel.set_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError, KeyError,
            DimensionError, InvalidProblemError) as exc:
        print(f"dualmpc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InfeasibleError, SlaterError) as exc:
        print(f"dualmpc: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConvergenceError, AdmissibilityError, FloatingPointError, np.linalg.LinAlgError,
            ValueError) as exc:
        print(f"dualmpc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
