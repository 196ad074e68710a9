"""Distributed MPC on top of the dual solvers.

Linear network systems are condensed into a :class:`CoupledQP` family
parameterized by the initial state, tightened so that approximate
solutions stay strictly feasible, and run in closed loop with shifted
Slater vectors and the accuracy and multiplier-bound updates.

Stacked inputs are ordered subsystem-major: block i of the QP is
``[u_i(0); u_i(1); ...; u_i(N-1)]``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.linalg

from . import dual, pcd
from .errors import AdmissibilityError, DimensionError, InvalidProblemError, SlaterError
from .model import BlockPartition, BlockSparsity, Box, CoupledQP, constants, min_slack

GENERAL = "general"
INPUT_COUPLED = "input_coupled"

EPS_MIN = 1e-8
R_MIN = 1e-3


def _arr(a, ndim):
    a = np.array(a, dtype=float)
    if ndim == 2 and a.ndim == 0:
        a = a.reshape(1, 1)
    if ndim == 1 and a.ndim == 0:
        a = a.reshape(1)
    return a


def _is_spd(S, tol=0.0):
    S = np.asarray(S, dtype=float)
    return bool(np.allclose(S, S.T, atol=1e-12) and np.linalg.eigvalsh(S).min() > tol)


@dataclass(frozen=True)
class NetworkSystem:
    """M interconnected linear subsystems.

    ``A`` and ``B`` map pairs ``(i, j)`` with ``j`` in ``neighbors[i]`` to
    the blocks A_ij (n_x_i x n_x_j) and B_ij (n_x_i x n_u_j).  Missing
    pairs are zero.  Boxes and weights are per subsystem.
    """

    nx: tuple
    nu: tuple
    neighbors: tuple
    A: dict
    B: dict
    Q: tuple
    R: tuple
    P: tuple
    x_lb: tuple
    x_ub: tuple
    u_lb: tuple
    u_ub: tuple
    xf_lb: tuple
    xf_ub: tuple
    coupling_mode: str = INPUT_COUPLED

    def __post_init__(self):
        object.__setattr__(self, "nx", tuple(int(v) for v in self.nx))
        object.__setattr__(self, "nu", tuple(int(v) for v in self.nu))
        object.__setattr__(self, "neighbors", tuple(tuple(sorted(int(j) for j in nb)) for nb in self.neighbors))
        object.__setattr__(self, "A", {(int(i), int(j)): _arr(v, 2) for (i, j), v in self.A.items()})
        object.__setattr__(self, "B", {(int(i), int(j)): _arr(v, 2) for (i, j), v in self.B.items()})
        for name in ("Q", "R", "P"):
            object.__setattr__(self, name, tuple(_arr(v, 2) for v in getattr(self, name)))
        for name in ("x_lb", "x_ub", "u_lb", "u_ub", "xf_lb", "xf_ub"):
            object.__setattr__(self, name, tuple(_arr(v, 1) for v in getattr(self, name)))
        if self.coupling_mode not in (GENERAL, INPUT_COUPLED):
            raise ValueError(f"unknown coupling mode {self.coupling_mode!r}")
        problems = self.validate()
        if problems:
            raise InvalidProblemError("; ".join(problems))

    @property
    def M(self):
        return len(self.nx)

    @property
    def n_x(self):
        return sum(self.nx)

    @property
    def n_u(self):
        return sum(self.nu)

    @property
    def x_offsets(self):
        return np.concatenate([[0], np.cumsum(self.nx)]).astype(int)

    @property
    def u_offsets(self):
        return np.concatenate([[0], np.cumsum(self.nu)]).astype(int)

    def validate(self):
        out = []
        M = self.M
        if len(self.nu) != M or len(self.neighbors) != M:
            out.append("subsystem counts differ")
            return out
        for i in range(M):
            if i not in self.neighbors[i]:
                out.append(f"subsystem {i} is missing from its own neighbor set")
        for (i, j), a in self.A.items():
            if a.shape != (self.nx[i], self.nx[j]):
                out.append(f"A[{i},{j}] has shape {a.shape}")
            if j not in self.neighbors[i] and np.any(a):
                out.append(f"A[{i},{j}] nonzero outside the neighbor set")
            if self.coupling_mode == INPUT_COUPLED and i != j and np.any(a):
                out.append(f"A[{i},{j}] nonzero in input-coupled mode")
        for (i, j), b in self.B.items():
            if b.shape != (self.nx[i], self.nu[j]):
                out.append(f"B[{i},{j}] has shape {b.shape}")
            if j not in self.neighbors[i] and np.any(b):
                out.append(f"B[{i},{j}] nonzero outside the neighbor set")
        for i in range(M):
            for name, dim in (("Q", self.nx[i]), ("R", self.nu[i]), ("P", self.nx[i])):
                S = getattr(self, name)[i]
                if S.shape != (dim, dim):
                    out.append(f"{name}[{i}] has shape {S.shape}")
                elif not _is_spd(S):
                    out.append(f"{name}[{i}] not symmetric positive definite")
            for lo, hi, dim, name in (
                (self.x_lb[i], self.x_ub[i], self.nx[i], "state box"),
                (self.u_lb[i], self.u_ub[i], self.nu[i], "input box"),
                (self.xf_lb[i], self.xf_ub[i], self.nx[i], "terminal box"),
            ):
                if lo.shape != (dim,) or hi.shape != (dim,):
                    out.append(f"{name} of subsystem {i} has the wrong length")
                elif np.any(lo > hi):
                    out.append(f"{name} of subsystem {i} has lb > ub")
        return out

    def global_matrices(self):
        """Return A, B, Q, R, P, state box, input box, terminal box for the whole network."""
        xo, uo = self.x_offsets, self.u_offsets
        A = np.zeros((self.n_x, self.n_x))
        B = np.zeros((self.n_x, self.n_u))
        for (i, j), a in self.A.items():
            A[xo[i]:xo[i + 1], xo[j]:xo[j + 1]] = a
        for (i, j), b in self.B.items():
            B[xo[i]:xo[i + 1], uo[j]:uo[j + 1]] = b
        cat = np.concatenate
        return dict(
            A=A,
            B=B,
            Q=scipy.linalg.block_diag(*self.Q),
            R=scipy.linalg.block_diag(*self.R),
            P=scipy.linalg.block_diag(*self.P),
            x_lb=cat(self.x_lb), x_ub=cat(self.x_ub),
            u_lb=cat(self.u_lb), u_ub=cat(self.u_ub),
            xf_lb=cat(self.xf_lb), xf_ub=cat(self.xf_ub),
        )

    def step(self, x, u0):
        """Propagate the network one step: x+ = A x + B u."""
        g = self.global_matrices()
        return g["A"] @ np.asarray(x, dtype=float) + g["B"] @ np.asarray(u0, dtype=float)

    def to_dict(self):
        def enc(v):
            return [[_jf(x) for x in row] for row in v] if v.ndim == 2 else [_jf(x) for x in v]

        return {
            "nx": list(self.nx),
            "nu": list(self.nu),
            "neighbors": [list(nb) for nb in self.neighbors],
            "A": [{"i": i, "j": j, "value": enc(v)} for (i, j), v in sorted(self.A.items())],
            "B": [{"i": i, "j": j, "value": enc(v)} for (i, j), v in sorted(self.B.items())],
            **{k: [enc(v) for v in getattr(self, k)] for k in
               ("Q", "R", "P", "x_lb", "x_ub", "u_lb", "u_ub", "xf_lb", "xf_ub")},
            "coupling_mode": self.coupling_mode,
        }

    @classmethod
    def from_dict(cls, d):
        def dec(v):
            return np.array(v, dtype=float) if not isinstance(v, str) else float(v)

        def dec_vec(v):
            return np.array([float(x) for x in v])

        return cls(
            nx=d["nx"],
            nu=d["nu"],
            neighbors=d["neighbors"],
            A={(e["i"], e["j"]): dec(e["value"]) for e in d["A"]},
            B={(e["i"], e["j"]): dec(e["value"]) for e in d["B"]},
            Q=[dec(v) for v in d["Q"]],
            R=[dec(v) for v in d["R"]],
            P=[dec(v) for v in d["P"]],
            **{k: [dec_vec(v) for v in d[k]] for k in ("x_lb", "x_ub", "u_lb", "u_ub", "xf_lb", "xf_ub")},
            coupling_mode=d.get("coupling_mode", INPUT_COUPLED),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _jf(x):
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


@dataclass(frozen=True)
class Terminal:
    """Terminal ingredients for the whole network: u = K x, cost x'Px, box X_f."""

    K: np.ndarray
    P: np.ndarray
    xf_lb: np.ndarray
    xf_ub: np.ndarray


@dataclass(frozen=True, eq=False)
class CondensedMpc:
    """Condensed MPC problem F(x, u) = 0.5 u'Hu + (Wx + w)'u + x'Cx.

    Constraint rows ``G u + E x + g <= 0`` encode the predicted state and
    terminal boxes; the input boxes live in ``box``.
    """

    sys: NetworkSystem
    N: int
    H: np.ndarray
    W: np.ndarray
    w: np.ndarray
    G: np.ndarray
    E: np.ndarray
    g: np.ndarray
    C: np.ndarray
    Phi: np.ndarray
    Gamma: np.ndarray
    box: Box
    partition: BlockPartition
    sparsity: BlockSparsity
    K: Optional[np.ndarray] = None

    @property
    def p(self):
        return self.G.shape[0]

    @property
    def n(self):
        return self.H.shape[0]

    @cached_property
    def constants(self):
        # H and G do not depend on x, so neither do L_d, L_i, sigma_F
        return constants(self.instantiate(np.zeros(self.sys.n_x)))

    @cached_property
    def _perm(self):
        """Time-major position -> subsystem-major position."""
        sys, N = self.sys, self.N
        uo = sys.u_offsets
        perm = np.empty(N * sys.n_u, dtype=int)
        for i in range(sys.M):
            for t in range(N):
                for c in range(sys.nu[i]):
                    perm[t * sys.n_u + uo[i] + c] = uo[i] * N + t * sys.nu[i] + c
        return perm

    def instantiate(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.sys.n_x,):
            raise DimensionError(f"state has shape {x.shape}, expected ({self.sys.n_x},)")
        return CoupledQP(self.H, self.W @ x + self.w, self.G, self.E @ x + self.g, self.box,
                         self.partition, self.sparsity)

    def cost(self, x, u):
        """Full MPC cost including the state-only offset x'Cx."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ (self.H @ u) + (self.W @ x + self.w) @ u + x @ (self.C @ x))

    def to_time_major(self, u):
        """Reshape a stacked input vector to an (N, n_u) array of stage inputs."""
        return np.asarray(u, dtype=float)[self._perm].reshape(self.N, self.sys.n_u)

    def from_time_major(self, seq):
        seq = np.asarray(seq, dtype=float).reshape(-1)
        out = np.empty_like(seq)
        out[self._perm] = seq
        return out

    def first_input(self, u):
        return self.to_time_major(u)[0]

    def predict(self, x, u):
        """Predicted states x(0..N) as an (N + 1, n_x) array."""
        x = np.asarray(x, dtype=float)
        X = (self.Phi @ x + self.Gamma @ u).reshape(self.N, self.sys.n_x)
        return np.vstack([x, X])


def condense(sys, N, terminal=None):
    """Eliminate the states of the MPC problem over horizon ``N``.

    ``terminal`` overrides the terminal cost and box stored in ``sys``.
    """
    if N < 1:
        raise ValueError("horizon must be at least 1")
    gm = sys.global_matrices()
    A, B, Q, R = gm["A"], gm["B"], gm["Q"], gm["R"]
    P = gm["P"] if terminal is None else np.asarray(terminal.P, dtype=float)
    xf_lb = gm["xf_lb"] if terminal is None else np.asarray(terminal.xf_lb, dtype=float)
    xf_ub = gm["xf_ub"] if terminal is None else np.asarray(terminal.xf_ub, dtype=float)
    nx, nu = sys.n_x, sys.n_u
    if P.shape != (nx, nx):
        raise DimensionError("terminal cost has the wrong shape")

    # time-major prediction X = Phi x + Gamma_t U with X = [x(1); ...; x(N)]
    Phi = np.zeros((N * nx, nx))
    Gt = np.zeros((N * nx, N * nu))
    Ak = np.eye(nx)
    powers = [np.eye(nx)]
    for t in range(N):
        Ak = A @ Ak
        powers.append(Ak)
        Phi[t * nx:(t + 1) * nx] = Ak
    for t in range(N):
        for s in range(t + 1):
            Gt[t * nx:(t + 1) * nx, s * nu:(s + 1) * nu] = powers[t - s] @ B

    partition = BlockPartition(tuple(N * k for k in sys.nu))
    c = CondensedMpc.__new__(CondensedMpc)
    object.__setattr__(c, "sys", sys)
    object.__setattr__(c, "N", N)
    perm = c._perm
    Gamma = np.zeros_like(Gt)
    Gamma[:, perm] = Gt

    Qbar = scipy.linalg.block_diag(*([Q] * (N - 1) + [P]))
    Rbar = scipy.linalg.block_diag(*([R] * N))
    Rbar_p = np.zeros_like(Rbar)
    Rbar_p[np.ix_(perm, perm)] = Rbar
    H = 2.0 * (Gamma.T @ Qbar @ Gamma + Rbar_p)
    H = 0.5 * (H + H.T)
    W = 2.0 * Gamma.T @ Qbar @ Phi
    Cst = Q + Phi.T @ Qbar @ Phi

    # state rows, grouped by subsystem so row blocks match subsystems
    xo = sys.x_offsets
    rows_G, rows_E, rows_g, row_sizes = [], [], [], []
    for i in range(sys.M):
        count = 0
        for t in range(1, N + 1):
            for k in range(xo[i], xo[i + 1]):
                lo, hi = gm["x_lb"][k], gm["x_ub"][k]
                if t == N:
                    lo, hi = max(lo, xf_lb[k]), min(hi, xf_ub[k])
                r = (t - 1) * nx + k
                if np.isfinite(hi):
                    rows_G.append(Gamma[r]); rows_E.append(Phi[r]); rows_g.append(-hi)
                    count += 1
                if np.isfinite(lo):
                    rows_G.append(-Gamma[r]); rows_E.append(-Phi[r]); rows_g.append(lo)
                    count += 1
        row_sizes.append(count)
    if not rows_G:
        raise InvalidProblemError("no finite state bounds: the condensed problem has no coupling rows")
    G = np.array(rows_G)
    E = np.array(rows_E)
    g = np.array(rows_g)

    u_lb = np.concatenate([np.tile(sys.u_lb[i], N) for i in range(sys.M)])
    u_ub = np.concatenate([np.tile(sys.u_ub[i], N) for i in range(sys.M)])
    sparsity = BlockSparsity.detect(H, G, partition, tuple(row_sizes), tol=1e-14)
    fields = dict(H=H, W=W, w=np.zeros(H.shape[0]), G=G, E=E, g=g, C=Cst, Phi=Phi, Gamma=Gamma,
                  box=Box(u_lb, u_ub), partition=partition, sparsity=sparsity,
                  K=None if terminal is None else np.asarray(terminal.K, dtype=float))
    for k, v in fields.items():
        if isinstance(v, np.ndarray):
            v.setflags(write=False)
        object.__setattr__(c, k, v)
    return c


def tighten(qp, eps_c):
    """Shift every coupling row by eps_c: g <- g + eps_c."""
    if not eps_c > 0:
        raise ValueError("eps_c must be positive")
    return qp.with_offset(qp.g + eps_c)


def eps_c_max(qp, u_tilde):
    """Largest admissible tightening: half the minimum Slater slack."""
    s = _slack(qp, u_tilde)
    return 0.5 * s


def _slack(qp, u_tilde):
    u_tilde = np.asarray(u_tilde, dtype=float)
    if not qp.box.contains(u_tilde, tol=1e-12):
        raise SlaterError("Slater vector lies outside the input box")
    s = min_slack(qp, u_tilde)
    if s <= 0:
        raise SlaterError(f"Slater vector is not strictly feasible (min slack {s:.3e})")
    return s


def c_of_p(method, p):
    method = dual.normalize_method(method)
    if method == dual.IDG:
        return math.sqrt(p) + 0.05
    if method == dual.IDFG:
        return math.sqrt(p) + 0.5
    raise ValueError("MPC parameters exist only for IDG and IDFG")


def admissible_bound(eps_out, R_d_bar, p, slack, method=dual.IDG):
    """Smallest multiplier bound >= ``R_d_bar`` for which ``eps_out`` is admissible.

    Any upper bound on the multiplier norm stays valid when enlarged, so a
    too-small cap c(p) R_d slack can be cured by raising R_d (at the price
    of more outer iterations).  The IDG constant is the smaller one, so its
    default makes the result admissible for both methods.
    """
    if slack <= 0:
        raise SlaterError("slack must be positive")
    return max(R_d_bar, eps_out / (c_of_p(method, p) * slack))


@dataclass(frozen=True)
class MpcParams:
    k_out: int
    eps_in: float
    eps_c: float
    eps_out_cap: Optional[float] = None


def mpc_params(method, eps_out, L_d, R_d_bar, p, slack=None):
    """Outer iterations, inner accuracy and tightening for one MPC solve.

    When ``slack`` (minimum slack of the current Slater vector) is given,
    ``eps_out`` is checked against the admissibility cap c(p) R_d slack.
    """
    method = dual.normalize_method(method)
    if eps_out <= 0 or L_d <= 0 or R_d_bar <= 0:
        raise ValueError("eps_out, L_d and R_d_bar must be positive")
    sp = math.sqrt(p)
    cap = None
    if slack is not None:
        cap = c_of_p(method, p) * R_d_bar * slack
        if eps_out > cap:
            raise AdmissibilityError(f"eps_out = {eps_out:.3e} exceeds the admissible cap {cap:.3e}")
    if method == dual.IDG:
        a = 2 * sp + 0.1
        k_out = math.floor(10 * a * L_d * R_d_bar**2 / eps_out)
        eps_in = eps_out / (20 * a)
        eps_c = eps_out / (a * R_d_bar)
    elif method == dual.IDFG:
        a = 2 * sp + 1.0
        k_out = math.floor(8 * math.sqrt(a * L_d * R_d_bar**2 / eps_out))
        eps_in = eps_out * math.sqrt(eps_out) / (8 * math.sqrt(2) * math.sqrt(L_d) * R_d_bar * a**1.5)
        eps_c = eps_out / (a * R_d_bar)
    else:
        raise ValueError("MPC parameters exist only for IDG and IDFG")
    return MpcParams(max(1, k_out), eps_in, eps_c, cap)


@dataclass
class MpcStepRecord:
    """Outcome of one MPC solve at state ``x``."""

    x: np.ndarray
    eps_out: float
    eps_in: float
    eps_c: float
    k_out: int
    R_d_bar: float
    u_hat: np.ndarray
    lambda_hat: np.ndarray
    applied: np.ndarray
    slack_min: float
    F_value: float
    slater_slack: float
    inner_iterations: int
    uncertified: int
    lyapunov_ok: Optional[bool] = None
    lyapunov_margin: Optional[float] = None

    @property
    def strictly_feasible(self):
        return self.slack_min > 0


def box_minimum_lower_bound(qp, consts=None, eps=1e-10):
    """Certified lower bound on min over the box of F (the dual value at zero)."""
    consts = consts or constants(qp)
    sol = pcd.solve_inner(qp, np.zeros(qp.p), np.clip(np.zeros(qp.n), qp.box.lb, qp.box.ub), eps,
                          budget=pcd.GAP_ONLY_BUDGET, consts=consts)
    return sol.value - sol.gap_bound


def slater_bound(c, x, slater, consts=None):
    """Multiplier bound from a Slater vector with lambda_tilde = 0."""
    qp = c.instantiate(x)
    s = _slack(qp, slater)
    d0 = box_minimum_lower_bound(qp, consts or c.constants)
    F_tilde = float(0.5 * slater @ (qp.H @ slater) + qp.q @ slater)
    return max((F_tilde - d0) / s, 0.0)


def solve_mpc_step(c, x, method, eps_out, slater, R_d_bar, lambda0=None, inner=None, record="summary"):
    """Solve the tightened MPC problem at ``x`` with the a-priori parameters."""
    x = np.asarray(x, dtype=float)
    qp = c.instantiate(x)
    consts = c.constants
    s = _slack(qp, slater)
    params = mpc_params(method, eps_out, consts.L_d_exact, R_d_bar, qp.p, slack=s)
    qp_t = tighten(qp, params.eps_c)
    outer = dual.OuterParams(method, eps_out, params.eps_in, params.k_out, lambda0=lambda0)
    u_hat, lam_hat, trace = dual.solve(qp_t, outer, consts=consts, record=record, inner=inner, check=False)
    h = qp.G @ u_hat + qp.g
    return MpcStepRecord(
        x=x,
        eps_out=eps_out,
        eps_in=params.eps_in,
        eps_c=params.eps_c,
        k_out=params.k_out,
        R_d_bar=R_d_bar,
        u_hat=u_hat,
        lambda_hat=lam_hat,
        applied=c.first_input(u_hat),
        slack_min=float(np.min(-h)),
        F_value=c.cost(x, u_hat),
        slater_slack=s,
        inner_iterations=int(np.sum(trace.inner_iterations)),
        uncertified=trace.uncertified,
    )


def shift_slater(c, u_hat, x, K):
    """Drop the first stage of ``u_hat`` and append K x(N)."""
    seq = c.to_time_major(u_hat)
    xN = c.predict(x, u_hat)[-1]
    shifted = np.vstack([seq[1:], (np.asarray(K, dtype=float) @ xN)[None, :]])
    return c.from_time_major(shifted)


def next_accuracy(x, Q, c_p, slack_plus, R_d_bar=1.0, eps_min=EPS_MIN):
    """Outer accuracy for the next MPC step.

    min(0.5 |x|_Q^2, c(p) R_d slack+), floored at ``eps_min``.  Pass
    ``R_d_bar=1`` to get the literal rule without the multiplier factor.
    """
    if slack_plus <= 0:
        raise SlaterError("the shifted Slater vector is not strictly feasible")
    x = np.asarray(x, dtype=float)
    xq = float(x @ (np.asarray(Q, dtype=float) @ x))
    return max(min(0.5 * xq, c_p * R_d_bar * slack_plus), eps_min)


def update_Rd(lambda_hat, eps_c, eps_out, x_Q_sq, slack_plus, R_min=R_MIN):
    """Cheap multiplier bound for the next step, floored at ``R_min``."""
    if slack_plus <= 0:
        raise SlaterError("the shifted Slater vector is not strictly feasible")
    value = (eps_c * float(np.sum(lambda_hat)) + 4.0 * eps_out - x_Q_sq) / slack_plus
    return max(value, R_min)


@dataclass(frozen=True)
class TerminalReport:
    violations: list
    lmi_max_eig: float
    spectral_radius: float

    @property
    def ok(self):
        return not self.violations


def check_terminal(A, B, Q, R, K, P, xf_lb, xf_ub, x_lb=None, x_ub=None, u_lb=None, u_ub=None,
                   sample_count=1000, seed=0, tol=1e-12):
    """Check invariance of X_f under A + BK and the terminal-cost decrease condition.

    Invariance of the box is checked exactly with interval arithmetic and
    on random interior and boundary samples.  The cost condition is the
    matrix inequality (A+BK)'P(A+BK) - P <= -(Q + K'RK).  When the state
    and input boxes are given, X_f within X and K X_f within U are checked too.
    """
    A, B, Q, R, K, P = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (A, B, Q, R, K, P))
    lb, ub = np.atleast_1d(np.asarray(xf_lb, dtype=float)), np.atleast_1d(np.asarray(xf_ub, dtype=float))
    out = []
    Acl = A + B @ K
    rho = float(np.max(np.abs(np.linalg.eigvals(Acl))))
    if not (np.all(lb < 0) and np.all(ub > 0)):
        out.append("origin not in the interior of X_f")
    lo_img = np.where(Acl > 0, Acl * lb, Acl * ub).sum(axis=1)
    hi_img = np.where(Acl > 0, Acl * ub, Acl * lb).sum(axis=1)
    if np.any(hi_img > ub + tol) or np.any(lo_img < lb - tol):
        out.append("X_f not invariant under A + BK")
    if np.all(np.isfinite(lb)) and np.all(np.isfinite(ub)) and sample_count > 0:
        rng = np.random.default_rng(seed)
        S = rng.uniform(lb, ub, size=(sample_count, lb.size))
        # push half the samples onto random faces
        half = sample_count // 2
        face = rng.integers(0, lb.size, size=half)
        side = rng.integers(0, 2, size=half)
        S[np.arange(half), face] = np.where(side == 0, lb[face], ub[face])
        img = S @ Acl.T
        inside = np.all((img > lb) & (img < ub), axis=1)
        interior = np.all((S > lb) & (S < ub), axis=1)
        if np.any(interior & ~inside):
            out.append("sampled interior point of X_f leaves the interior")
    lmi = Acl.T @ P @ Acl - P + Q + K.T @ R @ K
    lmi_max = float(np.linalg.eigvalsh(0.5 * (lmi + lmi.T)).max())
    if lmi_max > tol * max(1.0, np.abs(P).max()):
        out.append(f"terminal cost decrease fails (max eigenvalue {lmi_max:.3e})")
    if x_lb is not None and (np.any(lb < np.asarray(x_lb) - tol) or np.any(ub > np.asarray(x_ub) + tol)):
        out.append("X_f not contained in X")
    if u_lb is not None:
        klo = np.where(K > 0, K * lb, K * ub).sum(axis=1)
        khi = np.where(K > 0, K * ub, K * lb).sum(axis=1)
        if np.any(klo < np.asarray(u_lb) - tol) or np.any(khi > np.asarray(u_ub) + tol):
            out.append("K X_f not contained in U")
    return TerminalReport(out, lmi_max, rho)


def check_terminal_for(sys, terminal, **kwargs):
    gm = sys.global_matrices()
    return check_terminal(gm["A"], gm["B"], gm["Q"], gm["R"], terminal.K, terminal.P, terminal.xf_lb,
                          terminal.xf_ub, gm["x_lb"], gm["x_ub"], gm["u_lb"], gm["u_ub"], **kwargs)


def default_terminal(sys, shrink=0.5, max_tries=40):
    """Per-subsystem Riccati controllers with cross terms neglected.

    X_f starts as the intersection of the state and terminal boxes and is
    shrunk by ``shrink`` until :func:`check_terminal` passes.  Returns
    ``(terminal, report)``; the report lists what still fails if it never does.
    """
    K_blocks, P_blocks = [], []
    for i in range(sys.M):
        A = sys.A.get((i, i), np.zeros((sys.nx[i], sys.nx[i])))
        B = sys.B.get((i, i), np.zeros((sys.nx[i], sys.nu[i])))
        P = scipy.linalg.solve_discrete_are(A, B, sys.Q[i], sys.R[i])
        K = -np.linalg.solve(sys.R[i] + B.T @ P @ B, B.T @ P @ A)
        K_blocks.append(K)
        P_blocks.append(P)
    K = scipy.linalg.block_diag(*K_blocks)
    gm = sys.global_matrices()
    Acl = gm["A"] + gm["B"] @ K
    # the decoupled P may not certify the coupled loop; fall back to a Lyapunov solve
    P = scipy.linalg.block_diag(*P_blocks)
    if np.linalg.eigvalsh(Acl.T @ P @ Acl - P + gm["Q"] + K.T @ gm["R"] @ K).max() > 1e-12:
        if np.max(np.abs(np.linalg.eigvals(Acl))) < 1:
            P = scipy.linalg.solve_discrete_lyapunov(Acl.T, gm["Q"] + K.T @ gm["R"] @ K)
            P = 0.5 * (P + P.T)
    lb = np.maximum(gm["x_lb"], gm["xf_lb"])
    ub = np.minimum(gm["x_ub"], gm["xf_ub"])
    report = None
    for _ in range(max_tries):
        term = Terminal(K, P, lb.copy(), ub.copy())
        report = check_terminal_for(sys, term)
        if report.ok:
            return term, report
        lb, ub = lb * shrink, ub * shrink
    return term, report


@dataclass
class ClosedLoopTrace:
    records: list = field(default_factory=list)
    states: list = field(default_factory=list)
    Q: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, t):
        return self.records[t]

    def x_norms_Q(self):
        return np.array([math.sqrt(float(r.x @ (self.Q @ r.x))) for r in self.records])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x_norm", "F", "eps_out", "eps_c", "k_out", "slack_min", "lyapunov_ok"])
            for t, r in enumerate(self.records):
                w.writerow([t, repr(float(np.linalg.norm(r.x))), repr(r.F_value), repr(r.eps_out),
                            repr(r.eps_c), r.k_out, repr(r.slack_min),
                            "" if r.lyapunov_ok is None else int(r.lyapunov_ok)])


RD_RULES = ("paper", "slater")


def closed_loop(sys, N, x0, steps, method, eps_out0, slater0=None, terminal=None, R_d0=None,
                rd_rule="paper", warm_start=False, eps_min=EPS_MIN, R_min=R_MIN, inner=None,
                callback=None):
    """Receding-horizon simulation.

    Each step solves the tightened problem, applies the first input, shifts
    the Slater vector with the terminal controller, and sets the next
    accuracy and multiplier bound.  ``rd_rule="paper"`` uses the cheap
    update (floored at ``R_min``); ``"slater"`` recomputes the Slater-based
    bound at the new state.  The Lyapunov decrease of step t is checked once
    step t + 1 has been solved, so ``steps + 1`` problems are solved.
    """
    if rd_rule not in RD_RULES:
        raise ValueError(f"rd_rule must be one of {RD_RULES}")
    if terminal is None:
        terminal, report = default_terminal(sys)
        if not report.ok:
            raise InvalidProblemError("no terminal set found: " + "; ".join(report.violations))
    c = condense(sys, N, terminal)
    gm = sys.global_matrices()
    Q = gm["Q"]
    x = np.asarray(x0, dtype=float)
    if slater0 is None:
        from .oracle import max_slack_point

        slater0, s0 = max_slack_point(c.instantiate(x))
        if s0 <= 0:
            raise SlaterError("the initial state admits no strict Slater vector")
    slater = np.asarray(slater0, dtype=float)
    if R_d0 is not None:
        R_d = R_d0
    else:
        # an enlarged bound stays valid, so lift it until eps_out0 is admissible
        R_d = max(slater_bound(c, x, slater), R_min)
        R_d = admissible_bound(eps_out0, R_d, c.p, min_slack(c.instantiate(x), slater), method)
    eps_out = eps_out0
    trace = ClosedLoopTrace(Q=Q)
    lam0 = None
    prev = None
    for t in range(steps + 1):
        try:
            rec = solve_mpc_step(c, x, method, eps_out, slater, R_d, lambda0=lam0, inner=inner)
        except SlaterError as exc:
            raise SlaterError(f"step {t}: {exc}") from exc
        if prev is not None:
            xq = float(prev.x @ (Q @ prev.x))
            margin = prev.F_value - xq + rec.eps_out - rec.F_value
            prev.lyapunov_margin = margin
            prev.lyapunov_ok = bool(margin >= -1e-12 * max(1.0, abs(prev.F_value)))
        if t == steps:
            break
        trace.records.append(rec)
        trace.states.append(x)
        if callback is not None:
            callback(t, rec)
        x_next = gm["A"] @ x + gm["B"] @ rec.applied
        slater_next = shift_slater(c, rec.u_hat, x, terminal.K)
        qp_next = c.instantiate(x_next)
        try:
            slack_next = _slack(qp_next, slater_next)
        except SlaterError as exc:
            raise SlaterError(f"step {t + 1}: shifted Slater vector infeasible ({exc})") from exc
        xq = float(x @ (Q @ x))
        if rd_rule == "paper":
            R_next = update_Rd(rec.lambda_hat, rec.eps_c, rec.eps_out, xq, slack_next, R_min)
        else:
            R_next = max(slater_bound(c, x_next, slater_next), R_min)
        eps_next = next_accuracy(x, Q, c_of_p(method, c.p), slack_next, R_next, eps_min)
        lam0 = rec.lambda_hat if warm_start else None
        prev = rec
        x, slater, R_d, eps_out = x_next, slater_next, R_next, eps_next
    trace.states.append(x)
    return trace


__all__ = [
    "NetworkSystem", "Terminal", "CondensedMpc", "MpcParams", "MpcStepRecord", "ClosedLoopTrace",
    "TerminalReport", "condense", "tighten", "eps_c_max", "mpc_params", "c_of_p", "admissible_bound", "solve_mpc_step",
    "shift_slater", "next_accuracy", "update_Rd", "check_terminal", "check_terminal_for",
    "default_terminal", "closed_loop", "slater_bound", "box_minimum_lower_bound",
]
