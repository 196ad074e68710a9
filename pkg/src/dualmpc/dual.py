"""Outer dual solvers: inexact dual gradient (IDG), inexact dual fast
gradient (IDFG), and a dual subgradient baseline, with primal averaging
and the a-priori certificates that go with them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import pcd
from .errors import ConvergenceError, InvalidProblemError
from .model import box_project, validate_problem
from .model import constants as problem_constants

IDG = "IDG"
IDFG = "IDFG"
SUBGRAD = "SUBGRAD"
METHODS = (IDG, IDFG, SUBGRAD)


def normalize_method(method):
    m = str(method).upper()
    if m not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return m


@dataclass(frozen=True)
class OuterParams:
    """Settings for one outer run.

    ``k_out`` is the index of the last outer iteration, so a run performs
    ``k_out + 1`` inner solves (k = 0, ..., k_out).  ``L_used`` defaults to
    the exact dual Lipschitz constant.  ``alpha`` is the constant IDG step
    (default 1/(2 L_d)); ``gamma0`` scales the subgradient rule
    gamma_k = gamma0 / sqrt(k + 1) (default 1/L_d).
    """

    method: str
    eps_out: float
    eps_in: float
    k_out: int
    L_used: Optional[float] = None
    lambda0: Optional[np.ndarray] = None
    alpha: Optional[float] = None
    gamma0: Optional[float] = None
    inner_budget: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "method", normalize_method(self.method))
        if self.eps_out <= 0 or self.eps_in <= 0:
            raise ValueError("eps_out and eps_in must be positive")
        if int(self.k_out) < 0:
            raise ValueError("k_out must be nonnegative")
        object.__setattr__(self, "k_out", int(self.k_out))
        if self.lambda0 is not None:
            lam0 = np.array(self.lambda0, dtype=float)
            if np.any(lam0 < 0):
                raise ValueError("lambda0 must be nonnegative")
            lam0.setflags(write=False)
            object.__setattr__(self, "lambda0", lam0)


@dataclass(frozen=True)
class CertificateSet:
    dual_subopt_bound: float
    feas_violation_bound: float
    primal_subopt_upper: float
    primal_subopt_lower: float


@dataclass
class OuterTrace:
    """Per-iteration record of an outer run.

    Scalar columns are always kept.  Vector columns (``lambdas``,
    ``lambda_hats``, ``u_bars``, ``u_hats``) are kept when the run was
    started with ``record="full"``.
    """

    method: str
    L_d: float
    L_used: float
    eps_in: float
    lambda0: np.ndarray
    d_bar: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    inner_iterations: list = field(default_factory=list)
    inner_gap: list = field(default_factory=list)
    feas_violation: list = field(default_factory=list)
    primal_value: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    lambda_hats: list = field(default_factory=list)
    u_bars: list = field(default_factory=list)
    u_hats: list = field(default_factory=list)
    grads: list = field(default_factory=list)
    S: float = 0.0
    z: Optional[np.ndarray] = None
    uncertified: int = 0
    stopped_early: bool = False

    @property
    def iterations(self):
        """Number of outer iterations actually performed."""
        return len(self.d_bar)

    @property
    def last_k(self):
        return self.iterations - 1

    def certificates(self, k, R_d):
        if self.method == SUBGRAD:
            raise ValueError("no certificates exist for the subgradient baseline")
        L = self.L_used if self.method == IDG else self.L_d
        return certificates(self.method, k, self.eps_in, L, R_d, float(np.linalg.norm(self.lambda0)))

    def to_csv(self, path, R_d=None):
        """Write one row per outer iteration; bound columns need ``R_d``."""
        cols = ["k", "d_bar", "feas_violation", "primal_value", "dual_bound", "feas_bound",
                "primal_upper", "primal_lower", "inner_iters"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for k in range(self.iterations):
                if R_d is not None and self.method != SUBGRAD:
                    c = self.certificates(k, R_d)
                    bounds = [c.dual_subopt_bound, c.feas_violation_bound,
                              c.primal_subopt_upper, c.primal_subopt_lower]
                else:
                    bounds = ["", "", "", ""]
                w.writerow([k, repr(self.d_bar[k]), repr(self.feas_violation[k]),
                            repr(self.primal_value[k]), *bounds, self.inner_iterations[k]])


def idg_iterations(L_d, R_d, eps_out):
    """Outer iteration count for IDG at eps_in = eps_out."""
    return max(1, math.floor(4.0 * L_d * R_d**2 / eps_out))


def idfg_iterations(L_d, R_d, eps_out):
    """Outer iteration count and inner accuracy for IDFG."""
    k_out = max(1, math.floor(2.0 * R_d * math.sqrt(L_d / eps_out)))
    eps_in = eps_out * math.sqrt(eps_out) / (2.0 * R_d * math.sqrt(L_d))
    return k_out, eps_in


def certificates(method, k, eps_in, L_used, R_d, lambda0_norm):
    """Evaluate the a-priori bounds after outer iteration ``k``.

    For IDG ``L_used`` is the step-size constant L_bar >= L_d, for IDFG
    it is L_d.  Returns the dual suboptimality bound, the feasibility
    violation envelope v(k, eps_in), and the upper bound and lower
    magnitude of primal suboptimality.
    """
    method = normalize_method(method)
    if k < 0:
        raise ValueError("k must be nonnegative")
    k1 = k + 1.0
    L, R, l0 = float(L_used), float(R_d), float(lambda0_norm)
    if method == IDG:
        dual = L * R**2 / k1 + eps_in
        v = 4 * L * R / k1 + 6 * L * l0 / k1 + 2 * math.sqrt(L / k1 * eps_in)
        upper = L * l0**2 / k1 + eps_in
    elif method == IDFG:
        dual = 4 * L * R**2 / k1**2 + k1 * eps_in
        v = 16 * L * R / k1**2 + 8 * L * l0 / k1**2 + 4 * math.sqrt(L / k1 * eps_in)
        upper = 4 * L * l0**2 / k1**2 + k1 * eps_in
    else:
        raise ValueError("no certificates exist for the subgradient baseline")
    return CertificateSet(float(dual), float(v), float(upper), float((R + l0) * v))


def _default_inner(qp, lam, warm, eps_in, consts, budget):
    return pcd.solve_inner(qp, lam, warm, eps_in, budget=budget, consts=consts)


def idg_step(qp, lambda_k, alpha, eps_in, warm, consts=None, inner=None, budget=None):
    """One IDG iteration: inner solve at lambda_k, then a projected ascent step."""
    consts = consts or problem_constants(qp)
    inner = inner or _default_inner
    sol = inner(qp, lambda_k, warm, eps_in, consts, budget)
    grad = qp.G @ sol.u_bar + qp.g
    lam_next = np.maximum(lambda_k + alpha * grad, 0.0)
    return lam_next, sol


@dataclass(frozen=True)
class IdfgState:
    lam: np.ndarray
    z: np.ndarray
    k: int


def idfg_step(qp, state, eps_in, warm, L_d=None, consts=None, inner=None, budget=None):
    """One IDFG iteration; returns (lambda_hat_k, lambda_{k+1}, z_{k+1}, inner)."""
    consts = consts or problem_constants(qp)
    L_d = L_d if L_d is not None else consts.L_d_exact
    inner = inner or _default_inner
    sol = inner(qp, state.lam, warm, eps_in, consts, budget)
    grad = qp.G @ sol.u_bar + qp.g
    step = 1.0 / (2.0 * L_d)
    k = state.k
    lam_hat = np.maximum(state.lam + step * grad, 0.0)
    z_next = state.z + step * ((k + 1) / 2.0) * grad
    lam_next = ((k + 1) / (k + 3)) * lam_hat + (2.0 / (k + 3)) * np.maximum(z_next, 0.0)
    return lam_hat, lam_next, z_next, sol


def solve(qp, params, consts=None, record="summary", callback=None, inner=None, check=True):
    """Run Algorithm IDG, IDFG or the subgradient baseline.

    Returns ``(u_hat, lambda_hat, trace)``.  ``u_hat`` is the averaged
    primal point after the last iteration; ``lambda_hat`` is the averaged
    dual point for IDG/SUBGRAD and the gradient-step point for IDFG.

    ``callback(k, u_hat, lambda_hat)`` may return True to stop early.
    ``inner(qp, lam, warm, eps_in, consts, budget)`` replaces the PCD inner
    solver (for example with an exact oracle in tests).
    """
    if record not in ("summary", "full"):
        raise ValueError("record must be 'summary' or 'full'")
    if check:
        report = validate_problem(qp)
        if not report.ok:
            raise InvalidProblemError("; ".join(report.violations))
    consts = consts or problem_constants(qp)
    inner = inner or _default_inner
    method = params.method
    L_d = consts.L_d_exact
    L_used = params.L_used if params.L_used is not None else L_d
    if L_used < L_d * (1 - 1e-12):
        raise ValueError(f"L_used = {L_used} is below the dual Lipschitz constant {L_d}")
    lam0 = np.zeros(qp.p) if params.lambda0 is None else np.asarray(params.lambda0, dtype=float)
    if lam0.shape != (qp.p,):
        raise ValueError("lambda0 has the wrong length")
    eps_in = params.eps_in
    full = record == "full"

    alpha = params.alpha if params.alpha is not None else 1.0 / (2.0 * L_d)
    if method == IDG and not (1.0 / (2.0 * L_used) * (1 - 1e-12) <= alpha <= 1.0 / (2.0 * L_d) * (1 + 1e-12)):
        raise ValueError(f"IDG step {alpha} outside [1/(2 L_used), 1/(2 L_d)]")
    gamma0 = params.gamma0 if params.gamma0 is not None else 1.0 / L_d

    trace = OuterTrace(method, L_d, L_used, eps_in, lam0.copy())
    warm = box_project(qp.box, np.zeros(qp.n))
    lam = lam0.copy()
    z = lam0.copy()
    u_sum = np.zeros(qp.n)
    lam_sum = np.zeros(qp.p)
    u_plain = np.zeros(qp.n)
    lam_plain = np.zeros(qp.p)
    S = 0.0
    u_hat = warm
    lam_hat = lam0.copy()
    G, g = qp.G, qp.g

    for k in range(params.k_out + 1):
        sol = inner(qp, lam, warm, eps_in, consts, params.inner_budget)
        u_bar = sol.u_bar
        grad = G @ u_bar + g
        lam_k = lam
        if method == IDFG:
            step = 1.0 / (2.0 * L_d)
            lam_hat = np.maximum(lam + step * grad, 0.0)
            z = z + step * ((k + 1) / 2.0) * grad
            lam = ((k + 1) / (k + 3)) * lam_hat + (2.0 / (k + 3)) * np.maximum(z, 0.0)
            u_sum += (k + 1) * u_bar
            u_hat = u_sum * (2.0 / ((k + 1) * (k + 2)))
            w = k + 1.0
        else:
            w = alpha if method == IDG else gamma0 / math.sqrt(k + 1.0)
            lam = np.maximum(lam + w * grad, 0.0)
            S += w
            u_sum += w * u_bar
            lam_sum += w * lam
            u_plain += u_bar
            lam_plain += lam
            if S > 0:
                u_hat, lam_hat = u_sum / S, lam_sum / S
            else:
                # all steps zero so far: weights are undefined, fall back to plain means
                u_hat, lam_hat = u_plain / (k + 1), lam_plain / (k + 1)
        warm = u_bar

        trace.d_bar.append(sol.value)
        trace.grad_norm.append(float(np.linalg.norm(grad)))
        trace.inner_iterations.append(sol.iterations)
        trace.inner_gap.append(sol.gap_bound)
        trace.steps.append(w)
        trace.feas_violation.append(float(np.linalg.norm(np.maximum(G @ u_hat + g, 0.0))))
        trace.primal_value.append(float(0.5 * u_hat @ (qp.H @ u_hat) + qp.q @ u_hat))
        if not sol.certified:
            trace.uncertified += 1
        if full:
            trace.lambdas.append(lam_k)
            trace.lambda_hats.append(lam_hat)
            trace.u_bars.append(u_bar)
            trace.u_hats.append(u_hat)
            trace.grads.append(grad)
        if callback is not None and callback(k, u_hat, lam_hat):
            trace.stopped_early = k < params.k_out
            break

    trace.S = S
    trace.z = z if method == IDFG else None
    return u_hat, lam_hat, trace


def run(qp, method, eps_out, R_d, consts=None, eps_in=None, **kwargs):
    """Solve with the a-priori iteration count and inner accuracy for ``method``.

    ``R_d`` is an upper bound on the distance from lambda0 (zero) to an
    optimal multiplier.  Returns ``(u_hat, lambda_hat, trace, params)``.
    """
    consts = consts or problem_constants(qp)
    method = normalize_method(method)
    L_d = consts.L_d_exact
    if method == IDG:
        k_out = idg_iterations(L_d, R_d, eps_out)
        rule_eps_in = eps_out
    elif method == IDFG:
        k_out, rule_eps_in = idfg_iterations(L_d, R_d, eps_out)
    else:
        raise ValueError("the subgradient baseline has no a-priori iteration count")
    params = OuterParams(method, eps_out, eps_in if eps_in is not None else rule_eps_in, k_out)
    u_hat, lam_hat, trace = solve(qp, params, consts=consts, **kwargs)
    return u_hat, lam_hat, trace, params


def subgradient_solve(qp, params, consts=None, **kwargs):
    """Projected dual subgradient baseline with gamma_k = gamma0/sqrt(k+1)."""
    if params.method != SUBGRAD:
        from dataclasses import replace

        params = replace(params, method=SUBGRAD)
    return solve(qp, params, consts=consts, **kwargs)


__all__ = [
    "IDG", "IDFG", "SUBGRAD", "OuterParams", "OuterTrace", "CertificateSet", "IdfgState",
    "idg_iterations", "idfg_iterations", "certificates", "idg_step", "idfg_step", "solve",
    "run", "subgradient_solve", "ConvergenceError",
]
