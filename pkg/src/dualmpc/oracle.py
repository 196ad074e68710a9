"""Reference solver and KKT checks.

Nothing here reuses the iteration code of :mod:`dualmpc.pcd` or
:mod:`dualmpc.dual`; only the box projection and the box-QP gap
certificate are shared.  This keeps the bound-holds tests honest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import ConvergenceError, InfeasibleError
from .model import box_qp_gap_bound


@dataclass(frozen=True)
class KktResidual:
    stationarity: float
    primal_feas: float
    dual_feas: float
    complementarity: float

    @property
    def max(self):
        return max(self.stationarity, self.primal_feas, self.dual_feas, self.complementarity)


@dataclass(frozen=True)
class ReferenceSolution:
    u_star: np.ndarray
    lambda_star: np.ndarray
    F_star: float
    kkt_residuals: KktResidual
    outer_iterations: int = 0


def _spectrum(H):
    w = np.linalg.eigvalsh(H)
    return float(w[0]), float(w[-1])


def _box_newton(H, c, lb, ub, u):
    """Solve for the free coordinates of ``u`` with the rest pinned at bounds."""
    grad = H @ u + c
    at_lb = (u <= lb) & (grad > 0)
    at_ub = (u >= ub) & (grad < 0)
    free = ~(at_lb | at_ub)
    if not free.any():
        return u
    v = u.copy()
    fixed = ~free
    rhs = -c[free] - H[np.ix_(free, fixed)] @ u[fixed]
    v[free] = np.linalg.solve(H[np.ix_(free, free)], rhs)
    return np.clip(v, lb, ub)


def exact_inner(qp, lam, tol=1e-13, u0=None, spectrum=None, max_iter=200000):
    """Minimize the partial Lagrangian over the box to certified gap ``tol``.

    Accelerated projected gradient with restarts, interleaved with Newton
    solves on the current free set.  Returns ``(u(lambda), d(lambda))``.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("multipliers must be nonnegative")
    return _exact_inner(qp, lam, tol, u0, spectrum, max_iter)


def _exact_inner(qp, lam, tol=1e-13, u0=None, spectrum=None, max_iter=200000):
    # the extrapolated dual points of reference_solve may leave the orthant
    H, lb, ub = qp.H, qp.box.lb, qp.box.ub
    c = qp.q + qp.G.T @ lam
    sigma, L = spectrum if spectrum is not None else _spectrum(H)
    u = np.clip(np.zeros(qp.n) if u0 is None else np.asarray(u0, dtype=float), lb, ub)

    def f(v):
        return 0.5 * v @ (H @ v) + c @ v

    y, u_prev, t = u.copy(), u.copy(), 1.0
    fu = f(u)
    for it in range(max_iter):
        if it % 20 == 0:
            for _ in range(5):
                cand = _box_newton(H, c, lb, ub, u)
                fc = f(cand)
                if fc >= fu:
                    break
                u, fu = cand, fc
            y, u_prev, t = u.copy(), u.copy(), 1.0
            gap = box_qp_gap_bound(H @ u + c, u, lb, ub, sigma)
            if gap <= tol:
                return u, float(fu + lam @ qp.g)
        u_new = np.clip(y - (H @ y + c) / L, lb, ub)
        f_new = f(u_new)
        if f_new > fu:
            # restart momentum on objective increase
            y, t = u.copy(), 1.0
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = u_new + ((t - 1.0) / t_new) * (u_new - u_prev)
        u_prev, u, fu, t = u_new, u_new, f_new, t_new
    raise ConvergenceError(f"exact_inner did not reach gap {tol:g} in {max_iter} iterations")


def exact_dual(qp, lam, tol=1e-13, spectrum=None):
    """Dual function value d(lambda)."""
    return exact_inner(qp, lam, tol=tol, spectrum=spectrum)[1]


def kkt_residual(qp, u, lam, atol=1e-10):
    """Stationarity, primal, dual and complementarity residuals of (u, lambda)."""
    u = np.asarray(u, dtype=float)
    lam = np.asarray(lam, dtype=float)
    lb, ub = qp.box.lb, qp.box.ub
    r = qp.H @ u + qp.q + qp.G.T @ np.maximum(lam, 0.0)
    scale_lb = atol * np.maximum(1.0, np.abs(np.where(np.isfinite(lb), lb, 0.0)))
    scale_ub = atol * np.maximum(1.0, np.abs(np.where(np.isfinite(ub), ub, 0.0)))
    at_lb = u - lb <= scale_lb
    at_ub = ub - u <= scale_ub
    # -r must lie in the normal cone of the box at u
    dist = np.abs(r)
    dist = np.where(at_lb & ~at_ub, np.maximum(0.0, -r), dist)
    dist = np.where(at_ub & ~at_lb, np.maximum(0.0, r), dist)
    dist = np.where(at_lb & at_ub, 0.0, dist)
    h = qp.G @ u + qp.g
    box_comp = np.where(at_lb, np.maximum(0.0, r) * np.abs(u - np.where(np.isfinite(lb), lb, u)), 0.0)
    box_comp += np.where(at_ub, np.maximum(0.0, -r) * np.abs(np.where(np.isfinite(ub), ub, u) - u), 0.0)
    return KktResidual(
        stationarity=float(np.linalg.norm(dist)),
        primal_feas=float(np.linalg.norm(np.maximum(h, 0.0))),
        dual_feas=float(np.linalg.norm(np.maximum(-lam, 0.0))),
        complementarity=float(abs(np.maximum(lam, 0.0) @ h) + box_comp.sum()),
    )


def max_slack_point(qp):
    """Maximize the uniform slack s with Gu + g + s <= 0 over the box (an LP).

    Returns ``(u, s)``; s > 0 means u is a strict Slater point.  Raises
    :class:`InfeasibleError` when s < 0, i.e. the constraints cannot be met.
    """
    n, p = qp.n, qp.p
    cost = np.zeros(n + 1)
    cost[-1] = -1.0
    A = np.hstack([qp.G, np.ones((p, 1))])
    bounds = [(None if not np.isfinite(l) else l, None if not np.isfinite(h) else h)
              for l, h in zip(qp.box.lb, qp.box.ub)]
    bounds.append((None, 1.0))
    res = linprog(cost, A_ub=A, b_ub=-qp.g, bounds=bounds, method="highs")
    if res.status == 2:
        raise InfeasibleError("coupling constraints are infeasible over the box")
    if res.status != 0:
        raise ConvergenceError(f"feasibility LP failed: {res.message}")
    s = float(res.x[-1])
    if s < -1e-9:
        raise InfeasibleError(f"coupling constraints are infeasible over the box (best slack {s:.3e})")
    return np.clip(res.x[:n], qp.box.lb, qp.box.ub), s


def find_slater(qp, fraction=0.5, tol=1e-9):
    """Low-cost strict Slater point.

    Minimizes F subject to Gu + g <= -fraction * s_max, where s_max is the
    largest uniform slack attainable (capped at 1).  A cheap point keeps
    the multiplier bound F(u) - d(0) over slack small.  Returns ``(u, slack)``.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    u_lp, s_max = max_slack_point(qp)
    if s_max <= 0:
        raise InfeasibleError("no strict Slater point exists")
    shifted = qp.with_offset(qp.g + fraction * s_max)
    try:
        u = reference_solve(shifted, tol=tol).u_star
    except ConvergenceError:
        u = u_lp
    s = float(np.min(-(qp.G @ u + qp.g)))
    if s <= 0:
        u, s = u_lp, s_max
    return u, s


def _polish(qp, u, lam, tol, rounds=60):
    """Primal-dual active-set refinement starting from a near-optimal guess."""
    H, q, G, g = qp.H, qp.q, qp.G, qp.g
    lb, ub = qp.box.lb, qp.box.ub
    n = qp.n
    thr = max(1e-7, 1e2 * tol)
    h = G @ u + g
    rows = (lam > thr) | (h > -thr)
    r = H @ u + q + G.T @ lam
    lo = (u - lb <= thr) & (r >= 0)
    hi = (ub - u <= thr) & (r <= 0)
    best = None
    for _ in range(rounds):
        fixed = lo | hi
        free = ~fixed
        uf = np.where(lo, lb, np.where(hi, ub, 0.0))
        A = np.flatnonzero(rows)
        nf, na = int(free.sum()), len(A)
        K = np.zeros((nf + na, nf + na))
        K[:nf, :nf] = H[np.ix_(free, free)]
        GA = G[np.ix_(A, np.flatnonzero(free))]
        K[:nf, nf:] = GA.T
        K[nf:, :nf] = GA
        rhs = np.concatenate([
            -q[free] - H[np.ix_(free, fixed)] @ uf[fixed],
            -g[A] - G[np.ix_(A, np.flatnonzero(fixed))] @ uf[fixed],
        ])
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0] if nf + na else np.zeros(0)
        u_new = uf.copy()
        u_new[free] = sol[:nf]
        lam_new = np.zeros(qp.p)
        lam_new[A] = sol[nf:]
        res = kkt_residual(qp, np.clip(u_new, lb, ub), np.maximum(lam_new, 0.0))
        if best is None or res.max < best[2].max:
            best = (np.clip(u_new, lb, ub), np.maximum(lam_new, 0.0), res)
        if res.max <= tol and np.all(lam_new >= -tol) and np.all(u_new >= lb - tol) and np.all(u_new <= ub + tol):
            return best
        # update active sets from sign and bound violations
        changed = False
        neg = rows & (lam_new < -tol)
        h_new = G @ u_new + g
        viol = ~rows & (h_new > tol)
        if neg.any() or viol.any():
            rows = (rows & ~neg) | viol
            changed = True
        r_new = H @ u_new + q + G.T @ lam_new
        drop_lo = lo & (r_new < -tol)
        drop_hi = hi & (r_new > tol)
        add_lo = free & (u_new < lb - tol)
        add_hi = free & (u_new > ub + tol)
        if drop_lo.any() or drop_hi.any() or add_lo.any() or add_hi.any():
            lo = (lo & ~drop_lo) | add_lo
            hi = (hi & ~drop_hi) | add_hi
            changed = True
        if not changed:
            break
    return best


def reference_solve(qp, tol=1e-9, max_outer=20000, polish_every=25):
    """Solve the QP to KKT residual ``tol``.

    A dual fast gradient method with exact inner minimization supplies a
    near-optimal primal-dual pair; an active-set KKT solve then polishes it.
    Raises :class:`InfeasibleError` when no point of the box satisfies the
    coupling rows and :class:`ConvergenceError` when ``tol`` is not reached.
    """
    max_slack_point(qp)
    spectrum = _spectrum(qp.H)
    L = float(np.linalg.norm(qp.G, 2) ** 2) / spectrum[0]
    lam = np.zeros(qp.p)
    y = lam.copy()
    t = 1.0
    u = None
    best = None
    for k in range(max_outer):
        u, _ = _exact_inner(qp, y, 1e-14, u0=u, spectrum=spectrum)
        lam_new = np.maximum(y + (qp.G @ u + qp.g) / L, 0.0)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = lam_new + ((t - 1.0) / t_new) * (lam_new - lam)
        lam, t = lam_new, t_new
        if k % polish_every == polish_every - 1 or k == max_outer - 1:
            u_lam, _ = exact_inner(qp, lam, tol=1e-14, u0=u, spectrum=spectrum)
            cand = _polish(qp, u_lam, lam, tol)
            if cand is not None and (best is None or cand[2].max < best[2].max):
                best = cand
            if best is not None and best[2].max <= tol:
                u_s, lam_s, res = best
                F = float(0.5 * u_s @ (qp.H @ u_s) + qp.q @ u_s)
                return ReferenceSolution(u_s, lam_s, F, res, k + 1)
    raise ConvergenceError(
        f"reference_solve stopped at KKT residual {best[2].max if best else np.inf:.3e} > {tol:g}"
    )


__all__ = [
    "KktResidual", "ReferenceSolution", "exact_inner", "exact_dual", "kkt_residual",
    "max_slack_point", "find_slater", "reference_solve",
]
