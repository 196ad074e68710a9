"""Instance generators: random coupled QPs, ring traffic networks, fixtures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ..model import BlockPartition, Box, CoupledQP
from ..mpc import INPUT_COUPLED, NetworkSystem, Terminal, condense, default_terminal
from ..errors import InfeasibleError
from ..oracle import exact_inner, max_slack_point

TRAFFIC_NORMALIZATION = 1e3


@dataclass(frozen=True)
class TrafficParams:
    """Flow constants of the ring traffic model, in vehicles and sample periods.

    Bounds are deviations from the nominal operating point before the
    1e3 normalization.
    """

    T: float = 1.0
    x_bound: float = 100.0
    u_bound: float = 80.0
    stay_range: tuple = (0.6, 0.8)
    init_range: tuple = (0.5, 0.9)
    q: float = 0.05
    r: float = 0.05
    terminal_fraction: float = 0.3
    min_slack: float = 5e-3

    def scaled(self):
        return self.x_bound / TRAFFIC_NORMALIZATION, self.u_bound / TRAFFIC_NORMALIZATION


def gen_random_qp(n, seed, block_size=1):
    """Random strongly convex QP with 2n coupling rows and box [-1, 1]^n.

    H = A'A + I with A standard normal, G standard normal, w and g uniform
    on [-1, 1]; g is then shifted to -|g| - 0.1 so that u = 0 is a strict
    Slater point.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    H = A.T @ A + np.eye(n)
    G = rng.standard_normal((2 * n, n))
    w = rng.uniform(-1.0, 1.0, n)
    g = -np.abs(rng.uniform(-1.0, 1.0, 2 * n)) - 0.1
    return CoupledQP(H, w, G, g, Box(-np.ones(n), np.ones(n)), BlockPartition.uniform(n, block_size))


def fixture_p1():
    """Two scalar blocks, H = I, one coupling row 1 - u1 - u2 <= 0, box [-10, 10]^2."""
    return CoupledQP(
        np.eye(2), np.zeros(2), np.array([[-1.0, -1.0]]), np.array([1.0]),
        Box(np.full(2, -10.0), np.full(2, 10.0)), BlockPartition((1, 1)),
    )


@dataclass(frozen=True)
class MpcFixture:
    sys: NetworkSystem
    terminal: Terminal
    x0: np.ndarray
    N: int


def fixture_mpc1():
    """Scalar integrator x+ = x + u, N = 2, Q = R = 1, unit boxes, x0 = 0.5.

    P and K come from the discrete Riccati equation, which makes the
    terminal cost decrease hold with equality.
    """
    P = scipy.linalg.solve_discrete_are(np.eye(1), np.eye(1), np.eye(1), np.eye(1))
    K = -np.linalg.solve(np.eye(1) + P, P)
    one = [np.array([1.0])]
    sys = NetworkSystem(
        nx=[1], nu=[1], neighbors=[[0]], A={(0, 0): 1.0}, B={(0, 0): 1.0},
        Q=[1.0], R=[1.0], P=[P], x_lb=[-one[0]], x_ub=one, u_lb=[-one[0]], u_ub=one,
        xf_lb=[-one[0]], xf_ub=one,
    )
    return MpcFixture(sys, Terminal(K, P, -np.ones(1), np.ones(1)), np.array([0.5]), 2)


@dataclass(frozen=True)
class TrafficInstance:
    sys: NetworkSystem
    x0: tuple
    entries: tuple
    exits: tuple
    stay: np.ndarray


def gen_ring_traffic(M, N, seed, n_initial=10, params=None, max_draws=1000):
    """Input-coupled ring of M junctions with M/2 entry and M/2 exit links.

    Junction i owns the queue on the ring link feeding it and, at M/2
    random junctions, an entry-link queue; its inputs are the outflows of
    its queues.  A fraction ``stay`` of junction i's outflow continues to
    junction i + 1 (one at junctions without an exit link):

        ring_i+  = ring_i - T u_ring_i + T stay_{i-1} (u_ring_{i-1} + u_entry_{i-1})
        entry_i+ = entry_i - T u_entry_i

    States and inputs are deviations from a nominal flow, normalized by 1e3.
    Initial states are drawn until the condensed problem over horizon N has a
    Slater point with slack at least ``params.min_slack`` (normalized units)
    and the box-only minimizer violates some coupling row, so that the
    coupling constraints matter.
    """
    params = params or TrafficParams()
    x_bar, u_bar = params.scaled()
    if M < 4 or M % 2:
        raise ValueError("M must be even and at least 4")
    rng = np.random.default_rng(seed)
    entries = tuple(sorted(int(i) for i in rng.choice(M, M // 2, replace=False)))
    exits = tuple(sorted(int(i) for i in rng.choice(M, M // 2, replace=False)))
    stay = np.ones(M)
    for i in exits:
        stay[i] = rng.uniform(*params.stay_range)
    T = params.T
    nx = [2 if i in entries else 1 for i in range(M)]
    A, B = {}, {}
    for i in range(M):
        A[(i, i)] = np.eye(nx[i])
        own = np.zeros((nx[i], nx[i]))
        own[np.arange(nx[i]), np.arange(nx[i])] = -T
        B[(i, i)] = own
        up = (i - 1) % M
        feed = np.zeros((nx[i], nx[up]))
        feed[0, :] = T * stay[up]
        B[(i, up)] = feed
    neighbors = [sorted({(i - 1) % M, i, (i + 1) % M}) for i in range(M)]
    Q = [params.q * np.eye(k) for k in nx]
    R = [params.r * np.eye(k) for k in nx]
    P = [scipy.linalg.solve_discrete_are(np.eye(k), -T * np.eye(k), Q[i], R[i]) for i, k in enumerate(nx)]
    xb = [x_bar * np.ones(k) for k in nx]
    ub = [u_bar * np.ones(k) for k in nx]
    sys = NetworkSystem(
        nx=nx, nu=nx, neighbors=neighbors, A=A, B=B, Q=Q, R=R, P=P,
        x_lb=[-v for v in xb], x_ub=xb, u_lb=[-v for v in ub], u_ub=ub,
        xf_lb=[-params.terminal_fraction * v for v in xb],
        xf_ub=[params.terminal_fraction * v for v in xb], coupling_mode=INPUT_COUPLED,
    )
    c = condense(sys, N)
    states = []
    for _ in range(max_draws):
        if len(states) == n_initial:
            break
        x = x_bar * rng.uniform(*params.init_range, size=sys.n_x)
        qp = c.instantiate(x)
        try:
            _, s = max_slack_point(qp)
        except InfeasibleError:
            continue
        if s < params.min_slack:
            continue
        # skip states where the coupling rows are slack at lambda = 0: every method stops at k = 0
        u0, _ = exact_inner(qp, np.zeros(qp.p))
        if np.all(qp.G @ u0 + qp.g < 0):
            continue
        states.append(x)
    if len(states) < n_initial:
        raise RuntimeError(f"only {len(states)} feasible initial states found in {max_draws} draws")
    return TrafficInstance(sys, tuple(states), entries, exits, stay)


def gen_random_network(M, seed, N=3, nx_max=2, coupling=0.3, x_bound=2.0, u_bound=1.0, r=10.0,
                       multiplier_range=(0.05, 2.0), max_draws=200):
    """Small input-coupled chain for tests: x_i+ = A_ii x_i + sum_j B_ij u_j.

    A_ii has spectral radius in [0.8, 1.2], B_ii is the identity plus noise,
    and neighbor blocks B_i,i+-1 are scaled by ``coupling``.  Q = I, R = r I
    and the terminal box is half the state box.  Systems are redrawn until
    :func:`default_terminal` certifies terminal ingredients.  The initial
    state walks outward along random directions and is accepted at the first
    point where horizon N has a strict Slater point and the optimal
    multiplier norm lies in ``multiplier_range``, so coupling rows are
    active without the multipliers blowing up.
    """
    from ..oracle import reference_solve

    if M < 1:
        raise ValueError("M must be positive")
    rng = np.random.default_rng(seed)
    for _ in range(max_draws):
        sys = _random_chain(M, rng, nx_max, coupling, x_bound, u_bound, r)
        term, report = default_terminal(sys)
        if report.ok:
            break
    else:
        raise RuntimeError(f"no system with a terminal set in {max_draws} draws")
    c = condense(sys, N, term)
    lo, hi = multiplier_range
    for _ in range(max_draws):
        direction = rng.uniform(-1.0, 1.0, sys.n_x) * x_bound
        # only x(1..N) is constrained, so x0 itself may leave the state box
        for scale in np.linspace(0.1, 3.0, 30):
            qp = c.instantiate(direction * scale)
            try:
                _, s = max_slack_point(qp)
            except InfeasibleError:
                break
            if s <= 1e-3:
                break
            lam = float(np.linalg.norm(reference_solve(qp).lambda_star))
            if lo <= lam <= hi:
                return MpcFixture(sys, term, direction * scale, N)
            if lam > hi:
                break
    raise RuntimeError(f"no initial state with active coupling in {max_draws} directions")


def _random_chain(M, rng, nx_max, coupling, x_bound, u_bound, r):
    nx = [int(v) for v in rng.integers(1, nx_max + 1, size=M)]
    A, B = {}, {}
    for i in range(M):
        Ai = rng.standard_normal((nx[i], nx[i]))
        Ai *= rng.uniform(0.8, 1.2) / max(np.max(np.abs(np.linalg.eigvals(Ai))), 1e-9)
        A[(i, i)] = Ai
        B[(i, i)] = np.eye(nx[i]) + 0.2 * rng.standard_normal((nx[i], nx[i]))
        for j in (i - 1, i + 1):
            if 0 <= j < M:
                B[(i, j)] = coupling * rng.standard_normal((nx[i], nx[j]))
    neighbors = [sorted({j for j in (i - 1, i, i + 1) if 0 <= j < M}) for i in range(M)]
    eye = [np.eye(k) for k in nx]
    return NetworkSystem(
        nx=nx, nu=nx, neighbors=neighbors, A=A, B=B, Q=eye, R=[r * e for e in eye],
        P=[e.copy() for e in eye],
        x_lb=[-x_bound * np.ones(k) for k in nx], x_ub=[x_bound * np.ones(k) for k in nx],
        u_lb=[-u_bound * np.ones(k) for k in nx], u_ub=[u_bound * np.ones(k) for k in nx],
        xf_lb=[-0.5 * x_bound * np.ones(k) for k in nx], xf_ub=[0.5 * x_bound * np.ones(k) for k in nx],
        coupling_mode=INPUT_COUPLED,
    )
