"""Hot loop of the parallel coordinate descent inner solver.

Two interchangeable implementations of the same iteration:

* ``_pcd_loop_numba`` - scalar loops compiled with ``@njit``;
* ``_pcd_loop_numpy`` - vectorized numpy, one Python iteration per step.

Both solve ``min 0.5 u'Hu + c'u`` over a box with the Jacobi-snapshot
update: every block reads the same iterate, takes a projected step with
its own constant L_i, and keeps 1/M of the move.  Every step stops early
once the strong-convexity gap certificate drops below ``target``.
"""

import numpy as np

from ._accel import HAS_NUMBA, get_backend, njit


def _pcd_loop_numpy(H, c, lb, ub, Lc, M, sigma, target, budget, u, values):
    record = values.shape[0] > 0
    inv_m = 1.0 / M
    gap = np.inf
    for l in range(budget + 1):
        Hu = H @ u
        grad = Hu + c
        d = np.minimum(np.maximum(u - grad / sigma, lb), ub) - u
        gap = max(0.0, -(grad @ d) - 0.5 * sigma * (d @ d))
        if record:
            values[l] = 0.5 * (u @ Hu) + c @ u
        if gap <= target or l == budget:
            return u, l, gap
        v = np.minimum(np.maximum(u - grad / Lc, lb), ub)
        u = np.minimum(np.maximum(u + (v - u) * inv_m, lb), ub)
    return u, budget, gap


def _pcd_loop_body(H, c, lb, ub, Lc, M, sigma, target, budget, u, values):
    n = u.shape[0]
    record = values.shape[0] > 0
    inv_m = 1.0 / M
    grad = np.empty(n)
    gap = np.inf
    for l in range(budget + 1):
        # BLAS matvec; the scalar loops below are what numba speeds up
        Hu = np.dot(H, u)
        for i in range(n):
            grad[i] = Hu[i] + c[i]
        gap = 0.0
        val = 0.0
        for i in range(n):
            d = u[i] - grad[i] / sigma
            if d < lb[i]:
                d = lb[i]
            elif d > ub[i]:
                d = ub[i]
            d -= u[i]
            gap += -grad[i] * d - 0.5 * sigma * d * d
            val += 0.5 * u[i] * Hu[i] + c[i] * u[i]
        if gap < 0.0:
            gap = 0.0
        if record:
            values[l] = val
        if gap <= target or l == budget:
            return u, l, gap
        # grad holds the snapshot, so in-place block updates are Jacobi-style
        for i in range(n):
            v = u[i] - grad[i] / Lc[i]
            if v < lb[i]:
                v = lb[i]
            elif v > ub[i]:
                v = ub[i]
            w = u[i] + (v - u[i]) * inv_m
            if w < lb[i]:
                w = lb[i]
            elif w > ub[i]:
                w = ub[i]
            u[i] = w
    return u, budget, gap


if HAS_NUMBA:
    _pcd_loop_numba = njit(cache=True)(_pcd_loop_body)
else:  # pragma: no cover
    _pcd_loop_numba = None


def pcd_loop(H, c, lb, ub, Lc, M, sigma, target, budget, u0, record=False, backend=None):
    """Run PCD from ``u0`` for at most ``budget`` steps.

    Returns ``(u, steps, gap_bound, values)``; ``values`` holds the inner
    objective (without constant) at each visited iterate when ``record``.
    """
    backend = backend or get_backend()
    u = np.array(u0, dtype=np.float64, copy=True)
    budget = int(budget)
    values = np.empty(budget + 1 if record else 0)
    args = (
        np.ascontiguousarray(H, dtype=np.float64),
        np.ascontiguousarray(c, dtype=np.float64),
        np.ascontiguousarray(lb, dtype=np.float64),
        np.ascontiguousarray(ub, dtype=np.float64),
        np.ascontiguousarray(Lc, dtype=np.float64),
        float(M),
        float(sigma),
        float(target),
        budget,
        u,
        values,
    )
    if backend == "numba":
        u, steps, gap = _pcd_loop_numba(*args)
    else:
        u, steps, gap = _pcd_loop_numpy(*args)
    return u, int(steps), float(gap), (values[: steps + 1] if record else None)
