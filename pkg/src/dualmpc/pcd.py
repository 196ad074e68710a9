"""Parallel coordinate descent for the inner problem min_{u in box} L(u, lambda)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .errors import DimensionError
from .model import constants as problem_constants

ITERATION_BUDGET = "iteration_budget"
GAP_CERTIFIED = "gap_certified"

# budget used when the box is unbounded and only the gap certificate can stop
GAP_ONLY_BUDGET = 10**7


@dataclass(frozen=True)
class InnerSolution:
    u_bar: np.ndarray
    value: float
    iterations: int
    gap_bound: float
    stop_reason: str
    values: Optional[np.ndarray] = None

    @property
    def certified(self):
        return self.stop_reason == GAP_CERTIFIED


def _check_in_box(qp, u, tol=1e-12):
    u = np.asarray(u, dtype=float)
    if u.shape != (qp.n,):
        raise DimensionError(f"u has shape {u.shape}, expected ({qp.n},)")
    if not qp.box.contains(u, tol=tol):
        raise ValueError("iterate lies outside the box")
    return u


def _shifted_cost(qp, lam):
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (qp.p,):
        raise DimensionError(f"lambda has shape {lam.shape}, expected ({qp.p},)")
    if np.any(lam < 0):
        raise ValueError("multipliers must be nonnegative")
    return qp.q + qp.G.T @ lam, float(lam @ qp.g)


def pcd_step(qp, lam, u, consts=None):
    """One synchronous PCD iteration from the snapshot ``u``."""
    u = _check_in_box(qp, u)
    consts = consts or problem_constants(qp)
    c, _ = _shifted_cost(qp, lam)
    Lc = consts.coordinate_lipschitz(qp.partition)
    grad = qp.H @ u + c
    v = np.clip(u - grad / Lc, qp.box.lb, qp.box.ub)
    return np.clip(u + (v - u) / qp.partition.M, qp.box.lb, qp.box.ub)


def inner_iteration_count(consts, eps_in):
    """A-priori PCD iteration count for inner accuracy ``eps_in``."""
    if eps_in <= 0:
        raise ValueError("eps_in must be positive")
    if not consts.diam_finite:
        raise ValueError("unbounded box: the a-priori count needs a finite diameter; use gap-certified stopping")
    M = consts.M
    log_term = math.log(3.0 * consts.L_max * consts.D_U**2 / eps_in)
    count = math.floor(M * consts.L_max / consts.sigma_F * log_term)
    return max(1, count)


def solve_inner(qp, lam, u0, eps_in, budget=None, consts=None, record=False, backend=None):
    """Approximately minimize L(., lam) over the box.

    Stops at the first iterate whose certified gap is at most eps_in / 3,
    or after ``budget`` steps (default: the a-priori count).
    """
    if eps_in <= 0:
        raise ValueError("eps_in must be positive")
    u0 = _check_in_box(qp, u0)
    consts = consts or problem_constants(qp)
    c, const = _shifted_cost(qp, lam)
    if budget is None:
        budget = inner_iteration_count(consts, eps_in) if consts.diam_finite else GAP_ONLY_BUDGET
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    target = eps_in / 3.0
    u, steps, gap, values = kernels.pcd_loop(
        qp.H,
        c,
        qp.box.lb,
        qp.box.ub,
        consts.coordinate_lipschitz(qp.partition),
        qp.partition.M,
        consts.sigma_F,
        target,
        budget,
        u0,
        record=record,
        backend=backend,
    )
    value = float(0.5 * u @ (qp.H @ u) + c @ u) + const
    if values is not None:
        values = values + const
    reason = GAP_CERTIFIED if gap <= target else ITERATION_BUDGET
    return InnerSolution(u, value, steps, gap, reason, values)
