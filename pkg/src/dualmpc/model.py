"""Coupled quadratic programs with box local sets and affine coupling rows.

The problem class is

    min_u  0.5 u'Hu + q'u   s.t.  u in [lb, ub],  Gu + g <= 0,

with ``u`` split into ``M`` contiguous blocks.  Everything here is plain
immutable data plus pure functions on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .errors import DimensionError, InvalidProblemError, SlaterError

DENSE_EIG_LIMIT = 2000
EIG_TOL = 1e-10


def _frozen(a, ndim=None):
    arr = np.array(a, dtype=np.float64, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BlockPartition:
    sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 1 or any(s < 1 for s in sizes):
            raise InvalidProblemError(f"block sizes must be positive, got {sizes}")
        object.__setattr__(self, "sizes", sizes)

    @classmethod
    def uniform(cls, n, block_size=1):
        if n % block_size:
            raise InvalidProblemError(f"{n} coordinates do not split into blocks of {block_size}")
        return cls((block_size,) * (n // block_size))

    @property
    def M(self):
        return len(self.sizes)

    @property
    def n(self):
        return sum(self.sizes)

    @property
    def offsets(self):
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.sizes)[:-1]]))

    def block_slice(self, i):
        if not 0 <= i < self.M:
            raise IndexError(f"block index {i} out of range for {self.M} blocks")
        start = self.offsets[i]
        return slice(start, start + self.sizes[i])

    def coordinate_blocks(self):
        """Block index of every coordinate, as an int array of length n."""
        return np.repeat(np.arange(self.M), self.sizes)


@dataclass(frozen=True)
class Box:
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lb", _frozen(self.lb, 1))
        object.__setattr__(self, "ub", _frozen(self.ub, 1))
        if self.lb.shape != self.ub.shape:
            raise DimensionError("lb and ub lengths differ")

    @property
    def n(self):
        return self.lb.shape[0]

    @property
    def bounded(self):
        return bool(np.all(np.isfinite(self.lb)) and np.all(np.isfinite(self.ub)))

    def contains(self, v, tol=0.0):
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lb - tol) and np.all(v <= self.ub + tol))


@dataclass(frozen=True)
class BlockSparsity:
    """Which blocks of H and G may be nonzero.

    ``h_blocks`` holds block pairs (i, j) with H_ij possibly nonzero.
    ``g_blocks`` holds pairs (r, j) where r indexes a row block of G (row
    block sizes in ``row_sizes``) and j a column block.
    """

    h_blocks: frozenset
    g_blocks: frozenset
    row_sizes: tuple

    def __post_init__(self):
        object.__setattr__(self, "h_blocks", frozenset((int(i), int(j)) for i, j in self.h_blocks))
        object.__setattr__(self, "g_blocks", frozenset((int(r), int(j)) for r, j in self.g_blocks))
        object.__setattr__(self, "row_sizes", tuple(int(s) for s in self.row_sizes))

    @property
    def row_offsets(self):
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.row_sizes)[:-1]]))

    def row_slice(self, r):
        start = self.row_offsets[r]
        return slice(start, start + self.row_sizes[r])

    @classmethod
    def detect(cls, H, G, partition, row_sizes, tol=0.0):
        """Build a descriptor from the actual nonzero pattern of H and G."""
        H = np.asarray(H)
        G = np.asarray(G)
        cols = [partition.block_slice(i) for i in range(partition.M)]
        offs = np.concatenate([[0], np.cumsum(row_sizes)])
        rows = [slice(int(offs[r]), int(offs[r + 1])) for r in range(len(row_sizes))]
        h_blocks = {
            (i, j)
            for i in range(partition.M)
            for j in range(partition.M)
            if np.any(np.abs(H[cols[i], cols[j]]) > tol)
        }
        g_blocks = {
            (r, j)
            for r in range(len(row_sizes))
            for j in range(partition.M)
            if np.any(np.abs(G[rows[r], cols[j]]) > tol)
        }
        return cls(frozenset(h_blocks), frozenset(g_blocks), tuple(row_sizes))

    def to_dict(self):
        return {
            "h_blocks": sorted([list(p) for p in self.h_blocks]),
            "g_blocks": sorted([list(p) for p in self.g_blocks]),
            "row_sizes": list(self.row_sizes),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            frozenset(tuple(p) for p in d["h_blocks"]),
            frozenset(tuple(p) for p in d["g_blocks"]),
            tuple(d["row_sizes"]),
        )


@dataclass(frozen=True)
class CoupledQP:
    """Strongly convex QP with a box local set and coupling rows ``Gu + g <= 0``."""

    H: np.ndarray
    q: np.ndarray
    G: np.ndarray
    g: np.ndarray
    box: Box
    partition: BlockPartition
    sparsity: Optional[BlockSparsity] = None

    def __post_init__(self):
        object.__setattr__(self, "H", _frozen(self.H, 2))
        object.__setattr__(self, "q", _frozen(self.q, 1))
        object.__setattr__(self, "G", _frozen(self.G, 2))
        object.__setattr__(self, "g", _frozen(self.g, 1))
        n = self.q.shape[0]
        if self.H.shape != (n, n):
            raise DimensionError(f"H has shape {self.H.shape}, expected ({n}, {n})")
        if self.G.shape[1] != n or self.G.shape[0] != self.g.shape[0]:
            raise DimensionError(f"G has shape {self.G.shape}, g has length {self.g.shape[0]}, n = {n}")
        if self.box.n != n:
            raise DimensionError(f"box has dimension {self.box.n}, expected {n}")
        if self.partition.n != n:
            raise DimensionError(f"partition covers {self.partition.n} coordinates, expected {n}")

    @property
    def n(self):
        return self.q.shape[0]

    @property
    def p(self):
        return self.g.shape[0]

    def with_offset(self, g):
        """Copy with a different coupling offset vector."""
        return replace(self, g=g)

    def to_dict(self):
        d = {
            "n": self.n,
            "p": self.p,
            "blocks": list(self.partition.sizes),
            "H": self.H.tolist(),
            "q": self.q.tolist(),
            "G": self.G.tolist(),
            "g": self.g.tolist(),
            "lb": [_json_float(x) for x in self.box.lb],
            "ub": [_json_float(x) for x in self.box.ub],
        }
        if self.sparsity is not None:
            d["sparsity"] = self.sparsity.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        n = int(d["n"])
        G = np.asarray(d["G"], dtype=float).reshape(int(d["p"]), n)
        qp = cls(
            H=np.asarray(d["H"], dtype=float),
            q=np.asarray(d["q"], dtype=float),
            G=G,
            g=np.asarray(d["g"], dtype=float),
            box=Box(np.array([_parse_float(x) for x in d["lb"]]), np.array([_parse_float(x) for x in d["ub"]])),
            partition=BlockPartition(tuple(d.get("blocks", [1] * n))),
            sparsity=BlockSparsity.from_dict(d["sparsity"]) if d.get("sparsity") else None,
        )
        return qp


def _json_float(x):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return float(x)


def _parse_float(x):
    return float(x)


@dataclass(frozen=True)
class ProblemConstants:
    sigma_F: float
    L_d_exact: float
    L_d_frobenius: float
    L_blocks: np.ndarray
    L_max: float
    sigma_1: float
    D_U: float
    diam_finite: bool
    L_glob: float = field(default=float("nan"))

    @property
    def M(self):
        return len(self.L_blocks)

    def coordinate_lipschitz(self, partition):
        """Per-coordinate copy of the block constants, for vectorized steps."""
        return np.repeat(np.asarray(self.L_blocks, dtype=float), partition.sizes)


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok

    def raise_if_invalid(self):
        if self.violations:
            raise InvalidProblemError("; ".join(self.violations))


def _check_dim(v, n, name="u"):
    v = np.asarray(v, dtype=float)
    if v.shape != (n,):
        raise DimensionError(f"{name} has shape {v.shape}, expected ({n},)")
    return v


def _extreme_eigs(S):
    n = S.shape[0]
    if n <= DENSE_EIG_LIMIT:
        w = scipy.linalg.eigvalsh(S)
        return float(w[0]), float(w[-1])
    hi = scipy.sparse.linalg.eigsh(S, k=1, which="LA", tol=EIG_TOL, return_eigenvectors=False)[0]
    lo = scipy.sparse.linalg.eigsh(S, k=1, sigma=0.0, which="LM", tol=EIG_TOL, return_eigenvectors=False)[0]
    return float(lo), float(hi)


def _spectral_norm_sq(G):
    if min(G.shape) <= DENSE_EIG_LIMIT:
        return float(np.linalg.norm(G, 2) ** 2)
    s = scipy.sparse.linalg.svds(G, k=1, tol=EIG_TOL, return_singular_vectors=False)[0]
    return float(s**2)


def validate_problem(qp, tol=1e-12):
    """Collect violated structural assumptions; an empty report means valid."""
    report = ValidationReport()
    H = qp.H
    scale = max(1.0, float(np.max(np.abs(H))) if H.size else 1.0)
    if not np.allclose(H, H.T, atol=1e-12 * scale, rtol=0):
        report.violations.append("H not symmetric")
    else:
        lo, _ = _extreme_eigs(0.5 * (H + H.T))
        if lo <= tol * scale:
            report.violations.append(f"H not positive definite (smallest eigenvalue {lo:.3e})")
    bad = np.flatnonzero(qp.box.lb > qp.box.ub)
    if bad.size:
        report.violations.append(f"lb > ub at coordinates {bad.tolist()}")
    if qp.p < 1:
        report.violations.append("no coupling rows (p = 0)")
    zero_rows = np.flatnonzero(~np.any(qp.G != 0.0, axis=1))
    for j in zero_rows:
        if qp.g[j] > 0:
            report.violations.append(f"infeasible zero row {int(j)} (g = {qp.g[j]:.3g} > 0)")
        else:
            report.violations.append(f"redundant zero row {int(j)}")
    if qp.sparsity is not None:
        if sum(qp.sparsity.row_sizes) != qp.p:
            report.violations.append("sparsity row_sizes do not cover all coupling rows")
    return report


def objective(qp, u):
    u = _check_dim(u, qp.n)
    return float(0.5 * u @ (qp.H @ u) + qp.q @ u)


def constraints(qp, u):
    """Coupling residual h(u) = Gu + g."""
    u = _check_dim(u, qp.n)
    return qp.G @ u + qp.g


def violation(qp, u):
    """Euclidean norm of the positive part of h(u)."""
    return float(np.linalg.norm(np.maximum(constraints(qp, u), 0.0)))


def _check_multiplier(qp, lam):
    lam = _check_dim(lam, qp.p, "lambda")
    if np.any(lam < 0):
        raise ValueError("multipliers must be nonnegative")
    return lam


def lagrangian(qp, u, lam):
    lam = _check_multiplier(qp, lam)
    return objective(qp, u) + float(lam @ constraints(qp, u))


def lagrangian_gradient(qp, u, lam):
    u = _check_dim(u, qp.n)
    lam = _check_dim(lam, qp.p, "lambda")
    return qp.H @ u + qp.q + qp.G.T @ lam


def lagrangian_block_gradient(qp, u, lam, i, access_log=None):
    """Block ``i`` of Hu + q + G'lambda.

    With a sparsity descriptor only the neighbouring blocks of H and the
    row blocks of G that touch column block ``i`` are read.  Touched blocks
    are appended to ``access_log`` as ("H", i, j) / ("G", r, i) tuples.
    """
    u = _check_dim(u, qp.n)
    lam = _check_multiplier(qp, lam)
    part = qp.partition
    si = part.block_slice(i)
    sp = qp.sparsity
    if sp is None:
        return qp.H[si, :] @ u + qp.q[si] + qp.G[:, si].T @ lam
    out = qp.q[si].copy()
    for j in range(part.M):
        if (i, j) in sp.h_blocks:
            sj = part.block_slice(j)
            out += qp.H[si, sj] @ u[sj]
            if access_log is not None:
                access_log.append(("H", i, j))
    for r in range(len(sp.row_sizes)):
        if (r, i) in sp.g_blocks:
            sr = sp.row_slice(r)
            out += qp.G[sr, si].T @ lam[sr]
            if access_log is not None:
                access_log.append(("G", r, i))
    return out


def constants(qp):
    """Problem constants used by the solvers and their certificates."""
    H = qp.H
    sigma_F, L_glob = _extreme_eigs(H)
    if sigma_F <= 0:
        raise InvalidProblemError(f"H not positive definite (smallest eigenvalue {sigma_F:.3e})")
    part = qp.partition
    L_blocks = np.empty(part.M)
    for i in range(part.M):
        s = part.block_slice(i)
        L_blocks[i] = _extreme_eigs(H[s, s])[1]
    L_blocks.setflags(write=False)
    L_max = float(L_blocks.max())
    diam_finite = qp.box.bounded
    D_U = float(np.linalg.norm(qp.box.ub - qp.box.lb)) if diam_finite else math.inf
    return ProblemConstants(
        sigma_F=sigma_F,
        L_d_exact=_spectral_norm_sq(qp.G) / sigma_F,
        L_d_frobenius=float(np.sum(qp.G**2)) / sigma_F,
        L_blocks=L_blocks,
        L_max=L_max,
        sigma_1=min(1.0, sigma_F / L_max),
        D_U=D_U,
        diam_finite=diam_finite,
        L_glob=L_glob,
    )


def box_project(box, v):
    return np.clip(np.asarray(v, dtype=float), box.lb, box.ub)


def box_qp_gap_bound(grad, u, lb, ub, sigma):
    """Certified bound on f(u) - min_box f for a sigma-strongly convex f.

    Minimizes the strong-convexity lower model
    f(u) + <grad, v - u> + sigma/2 |v - u|^2 over the box in closed form;
    the negated minimum bounds the optimality gap.  Infinite bounds are fine.
    """
    step = np.clip(u - grad / sigma, lb, ub) - u
    return float(max(0.0, -(grad @ step) - 0.5 * sigma * (step @ step)))


def slater_dual_bound(qp, u_tilde, lambda_tilde, d_at_lambda_tilde):
    """Upper bound on the optimal multiplier norm from a strict Slater point."""
    u_tilde = _check_dim(u_tilde, qp.n)
    _check_multiplier(qp, lambda_tilde)
    if not qp.box.contains(u_tilde, tol=1e-12):
        raise SlaterError("Slater point lies outside the box")
    h = constraints(qp, u_tilde)
    slack = float(np.min(-h))
    if slack <= 0:
        raise SlaterError(f"Slater point is not strictly feasible (min slack {slack:.3e})")
    return (objective(qp, u_tilde) - float(d_at_lambda_tilde)) / slack


def min_slack(qp, u):
    return float(np.min(-constraints(qp, u)))
