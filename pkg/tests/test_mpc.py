import math

import numpy as np
import pytest
import scipy.linalg

from dualmpc import mpc, oracle
from dualmpc.errors import AdmissibilityError, SlaterError
from dualmpc.harness.generators import gen_random_network
from dualmpc.model import lagrangian_block_gradient, lagrangian_gradient, min_slack
from dualmpc.mpc import NetworkSystem

cvxopt = pytest.importorskip("cvxopt")


def _scalar(A=1.0, B=1.0, P=1.0, box=1.0):
    one = np.ones(1)
    return NetworkSystem(
        nx=[1], nu=[1], neighbors=[[0]], A={(0, 0): A}, B={(0, 0): B}, Q=[1.0], R=[1.0], P=[P],
        x_lb=[-box * one], x_ub=[box * one], u_lb=[-box * one], u_ub=[box * one],
        xf_lb=[-box * one], xf_ub=[box * one],
    )


def _chain(M, nx=1, coupling=0.3):
    A, B = {}, {}
    for i in range(M):
        A[(i, i)] = 0.9 * np.eye(nx)
        B[(i, i)] = np.eye(nx)
        for j in (i - 1, i + 1):
            if 0 <= j < M:
                B[(i, j)] = coupling * np.eye(nx)
    nb = [[j for j in (i - 1, i, i + 1) if 0 <= j < M] for i in range(M)]
    e = [np.eye(nx)] * M
    v = [np.ones(nx)] * M
    return NetworkSystem(nx=[nx] * M, nu=[nx] * M, neighbors=nb, A=A, B=B, Q=e, R=e, P=e,
                         x_lb=[-x for x in v], x_ub=v, u_lb=[-x for x in v], u_ub=v,
                         xf_lb=[-x for x in v], xf_ub=v)


def _sparse_solve(sys, N, x0, terminal):
    """Oracle optimum of the uncondensed problem with explicit states."""
    gm = sys.global_matrices()
    A, B, Q, R = gm["A"], gm["B"], gm["Q"], gm["R"]
    nx, nu = sys.n_x, sys.n_u
    nz = N * nu + N * nx

    def xs(t):  # position of x(t), t >= 1
        return N * nu + (t - 1) * nx

    P2 = scipy.linalg.block_diag(*([2 * R] * N + [2 * Q] * (N - 1) + [2 * terminal.P]))
    Aeq = np.zeros((N * nx, nz))
    beq = np.zeros(N * nx)
    for t in range(N):
        rows = slice(t * nx, (t + 1) * nx)
        Aeq[rows, xs(t + 1):xs(t + 1) + nx] = np.eye(nx)
        Aeq[rows, t * nu:(t + 1) * nu] = -B
        if t == 0:
            beq[rows] = A @ x0
        else:
            Aeq[rows, xs(t):xs(t) + nx] = -A
    lb = np.concatenate([np.tile(gm["u_lb"], N)] + [gm["x_lb"]] * (N - 1)
                        + [np.maximum(gm["x_lb"], terminal.xf_lb)])
    ub = np.concatenate([np.tile(gm["u_ub"], N)] + [gm["x_ub"]] * (N - 1)
                        + [np.minimum(gm["x_ub"], terminal.xf_ub)])
    Gi = np.vstack([np.eye(nz), -np.eye(nz)])
    hi = np.concatenate([ub, -lb])
    cvxopt.solvers.options.update(show_progress=False, abstol=1e-13, reltol=1e-13, feastol=1e-12)
    sol = cvxopt.solvers.qp(cvxopt.matrix(P2), cvxopt.matrix(np.zeros(nz)), cvxopt.matrix(Gi),
                            cvxopt.matrix(hi), cvxopt.matrix(Aeq), cvxopt.matrix(beq))
    return float(sol["primal objective"]) + float(x0 @ Q @ x0)


class TestCondense:
    def test_scalar_example(self):
        c = mpc.condense(_scalar(), 2)
        np.testing.assert_allclose(c.H, [[6.0, 2.0], [2.0, 4.0]], atol=1e-14)
        np.testing.assert_allclose(c.W.ravel(), [4.0, 2.0], atol=1e-14)
        np.testing.assert_array_equal(c.w, 0.0)
        np.testing.assert_allclose(c.instantiate(np.ones(1)).q, [4.0, 2.0])

    def test_origin_instance(self):
        c = mpc.condense(_scalar(), 2)
        qp = c.instantiate(np.zeros(1))
        np.testing.assert_array_equal(qp.q, c.w)
        np.testing.assert_array_equal(qp.g, c.g)

    def test_instantiate_linear(self, rng):
        c = mpc.condense(_chain(3), 3)
        x, y = rng.standard_normal((2, 3))
        np.testing.assert_allclose(c.instantiate(x).q - c.instantiate(y).q, c.W @ (x - y), atol=1e-12)

    def test_zero_input_matrix(self):
        c = mpc.condense(_scalar(A=0.5, B=0.0), 1)
        np.testing.assert_allclose(c.H, [[2.0]])
        np.testing.assert_array_equal(c.W, 0.0)

    def test_rejects_zero_horizon(self):
        with pytest.raises(ValueError):
            mpc.condense(_scalar(), 0)

    def test_row_count(self):
        # two-sided state boxes, the terminal box folded into the last stage
        c = mpc.condense(_chain(3, nx=2), 4)
        assert c.p == 2 * 4 * 6

    def test_cost_matches_rollout(self, rng):
        sys = _chain(2, nx=2)
        c = mpc.condense(sys, 3)
        gm = sys.global_matrices()
        x0 = rng.standard_normal(4)
        u = rng.standard_normal(c.n)
        X = c.predict(x0, u)
        U = c.to_time_major(u)
        total = sum(X[t] @ gm["Q"] @ X[t] + U[t] @ gm["R"] @ U[t] for t in range(3)) + X[3] @ gm["P"] @ X[3]
        assert c.cost(x0, u) == pytest.approx(total, rel=1e-12)
        x = x0
        for t in range(3):
            x = sys.step(x, U[t])
            np.testing.assert_allclose(X[t + 1], x, atol=1e-12)

    def test_input_coupled_sparsity(self):
        M = 4
        c = mpc.condense(_chain(M), 3)
        sp = c.sparsity
        for r, j in sp.g_blocks:
            assert abs(r - j) <= 1
        assert (0, 2) not in sp.g_blocks and (0, 1) in sp.g_blocks
        for i, j in sp.h_blocks:
            assert abs(i - j) <= 2
        # E couples row block i only to the states of subsystem i
        for r in range(M):
            E_r = c.E[sp.row_slice(r)]
            assert np.all(np.delete(E_r, r, axis=1) == 0)

    def test_block_gradient_reads_only_neighbors(self, rng):
        M = 5
        c = mpc.condense(_chain(M), 2)
        qp = c.instantiate(rng.uniform(-0.3, 0.3, M))
        u = rng.uniform(-1, 1, qp.n)
        lam = rng.uniform(0, 1, qp.p)
        full = lagrangian_gradient(qp, u, lam)
        for i in range(M):
            log = []
            g = lagrangian_block_gradient(qp, u, lam, i, access_log=log)
            np.testing.assert_allclose(g, full[qp.partition.block_slice(i)], atol=1e-12)
            assert {e[2] for e in log if e[0] == "H"} <= {j for j in range(M) if abs(i - j) <= 2}
            assert {e[1] for e in log if e[0] == "G"} <= {j for j in range(M) if abs(i - j) <= 1}

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_matches_explicit_state_formulation(self, seed):
        fx = gen_random_network(1 + seed % 3, seed, N=2 + seed % 2)
        c = mpc.condense(fx.sys, fx.N, fx.terminal)
        ref = oracle.reference_solve(c.instantiate(fx.x0))
        condensed = c.cost(fx.x0, ref.u_star)
        assert condensed == pytest.approx(_sparse_solve(fx.sys, fx.N, fx.x0, fx.terminal), abs=1e-8)


class TestTighten:
    def test_fixture(self, p1):
        qp = mpc.tighten(p1, 0.1)
        assert qp.g[0] == pytest.approx(1.1)
        ref = oracle.reference_solve(qp)
        np.testing.assert_allclose(ref.u_star, [0.55, 0.55], atol=1e-10)
        assert ref.F_star == pytest.approx(0.3025, abs=1e-10)

    def test_rejects_nonpositive(self, p1):
        with pytest.raises(ValueError):
            mpc.tighten(p1, 0.0)

    def test_tightened_point_strict_for_original(self, p1):
        qp = mpc.tighten(p1, 0.1)
        u = oracle.reference_solve(qp).u_star
        assert min_slack(p1, u) >= 0.1 - 1e-10

    def test_eps_c_max(self, p1):
        assert mpc.eps_c_max(p1, np.ones(2)) == pytest.approx(0.5)
        doubled = p1.__class__(p1.H, p1.q, 2 * p1.G, 2 * p1.g, p1.box, p1.partition)
        assert mpc.eps_c_max(doubled, np.ones(2)) == pytest.approx(1.0)
        with pytest.raises(SlaterError):
            mpc.eps_c_max(p1, np.array([0.5, 0.5]))

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 5])
    def test_sandwich_and_multiplier_bound(self, seed):
        fx = gen_random_network(1 + seed % 3, seed, N=3 + seed % 3)
        c = mpc.condense(fx.sys, fx.N, fx.terminal)
        qp = c.instantiate(fx.x0)
        slater, s = oracle.max_slack_point(qp)
        R = mpc.slater_bound(c, fx.x0, slater)
        ref = oracle.reference_solve(qp)
        assert np.linalg.norm(ref.lambda_star) <= R + 1e-9
        for frac in (0.1, 0.5, 1.0):
            eps_c = frac * mpc.eps_c_max(qp, slater)
            tight = oracle.reference_solve(mpc.tighten(qp, eps_c))
            assert ref.F_star - 1e-10 <= tight.F_star <= ref.F_star + 2 * math.sqrt(qp.p) * R * eps_c + 1e-10
            assert np.linalg.norm(tight.lambda_star) <= 2 * R + 1e-9


class TestParameters:
    def test_idg_example(self):
        prm = mpc.mpc_params("idg", 0.01, 2.0, 1.0, 4)
        assert prm.k_out == 8200
        assert prm.eps_in == pytest.approx(1.2195e-4, rel=1e-4)
        assert prm.eps_c == pytest.approx(2.4390e-3, rel=1e-4)

    def test_idfg_example(self):
        prm = mpc.mpc_params("idfg", 0.01, 2.0, 1.0, 4)
        assert prm.k_out == 252
        assert prm.eps_in == pytest.approx(5.590e-6, rel=1e-3)
        assert prm.eps_c == pytest.approx(2e-3)

    def test_idfg_far_fewer_iterations(self):
        for eps in (1e-1, 1e-2, 1e-3):
            assert mpc.mpc_params("idfg", eps, 2.0, 1.0, 4).k_out < mpc.mpc_params("idg", eps, 2.0, 1.0, 4).k_out

    def test_c_of_p(self):
        assert mpc.c_of_p("idg", 4) == pytest.approx(2.05)
        assert mpc.c_of_p("idfg", 4) == pytest.approx(2.5)
        with pytest.raises(ValueError):
            mpc.c_of_p("subgrad", 4)

    def test_admissibility_cap(self):
        mpc.mpc_params("idg", 0.01, 2.0, 1.0, 4, slack=0.01 / 2.05)
        with pytest.raises(AdmissibilityError):
            mpc.mpc_params("idg", 0.01, 2.0, 1.0, 4, slack=0.009 / 2.05)
        with pytest.raises(AdmissibilityError):
            mpc.mpc_params("idfg", 0.01, 2.0, 1.0, 4, slack=0.009 / 2.5)

    def test_admissible_bound(self):
        R = mpc.admissible_bound(0.01, 1.0, 4, 1e-3)
        assert R == pytest.approx(0.01 / (2.05 * 1e-3))
        mpc.mpc_params("idg", 0.01, 2.0, R, 4, slack=1e-3)
        mpc.mpc_params("idfg", 0.01, 2.0, R, 4, slack=1e-3)
        assert mpc.admissible_bound(0.01, 50.0, 4, 1e-3) == 50.0
        with pytest.raises(SlaterError):
            mpc.admissible_bound(0.01, 1.0, 4, 0.0)

    def test_rejects_nonpositive_inputs(self):
        with pytest.raises(ValueError):
            mpc.mpc_params("idg", 0.0, 2.0, 1.0, 4)


class TestStep:
    def test_fixture_step(self, mpc1):
        c = mpc.condense(mpc1.sys, mpc1.N, mpc1.terminal)
        qp = c.instantiate(mpc1.x0)
        slater, _ = oracle.max_slack_point(qp)
        R = mpc.slater_bound(c, mpc1.x0, slater)
        rec = mpc.solve_mpc_step(c, mpc1.x0, "idfg", 0.01, slater, R)
        assert rec.strictly_feasible
        assert qp.box.contains(rec.u_hat)
        opt = oracle.reference_solve(qp).F_star + float(mpc1.x0 @ c.C @ mpc1.x0)
        assert -1e-12 <= rec.F_value - opt <= 0.01
        np.testing.assert_allclose(rec.applied, c.first_input(rec.u_hat))

    def test_inactive_constraints_give_lqr(self):
        sys = _scalar(box=1e3)
        c = mpc.condense(sys, 3)
        x = np.array([0.5])
        qp = c.instantiate(x)
        slater = np.zeros(c.n)
        R = max(mpc.slater_bound(c, x, slater), mpc.R_MIN)
        rec = mpc.solve_mpc_step(c, x, "idfg", 1e-3, slater, R)
        free = -np.linalg.solve(c.H, qp.q)
        np.testing.assert_allclose(rec.u_hat, free, atol=1e-2)

    def test_boundary_slater_rejected(self, mpc1):
        c = mpc.condense(mpc1.sys, mpc1.N, mpc1.terminal)
        with pytest.raises(SlaterError):
            mpc.solve_mpc_step(c, np.array([1.0]), "idg", 0.01, np.zeros(2), 1.0)


class TestShiftAndUpdates:
    def test_single_stage_shift(self):
        sys = _scalar(A=0.5)
        c = mpc.condense(sys, 1)
        x = np.array([0.4])
        u = np.array([0.2])
        np.testing.assert_allclose(mpc.shift_slater(c, u, x, [[-0.3]]), [-0.3 * (0.5 * 0.4 + 0.2)])

    def test_zero_gain_appends_zero(self):
        c = mpc.condense(_chain(2), 3)
        u = np.linspace(-0.5, 0.5, c.n)
        shifted = c.to_time_major(mpc.shift_slater(c, u, np.full(2, 0.2), np.zeros((2, 2))))
        np.testing.assert_array_equal(shifted[-1], 0.0)
        np.testing.assert_array_equal(shifted[:-1], c.to_time_major(u)[1:])

    def test_next_accuracy(self):
        Q = np.eye(2)
        assert mpc.next_accuracy(np.zeros(2), Q, 2.05, 1.0) == mpc.EPS_MIN
        assert mpc.next_accuracy(np.full(2, 10.0), Q, 2.05, 1e-4) == pytest.approx(2.05e-4)
        assert mpc.next_accuracy(np.full(2, 0.1), Q, 2.05, 1.0) == pytest.approx(0.01)
        with pytest.raises(SlaterError):
            mpc.next_accuracy(np.ones(2), Q, 2.05, 0.0)

    def test_update_Rd(self):
        assert mpc.update_Rd(np.zeros(3), 0.0, 0.0, 0.0, 1.0) == mpc.R_MIN
        a = mpc.update_Rd(np.ones(3), 0.1, 0.5, 0.2, 1.0)
        assert a == pytest.approx((0.3 + 2.0 - 0.2) / 1.0)
        assert mpc.update_Rd(np.ones(3), 0.1, 0.5, 0.2, 2.0) == pytest.approx(a / 2)
        with pytest.raises(SlaterError):
            mpc.update_Rd(np.ones(3), 0.1, 0.5, 0.2, -1.0)


class TestTerminal:
    def test_contractive_scalar(self):
        P = scipy.linalg.solve_discrete_lyapunov(np.array([[0.5]]), np.eye(1))
        rep = mpc.check_terminal(0.5, 0.0, 1.0, 1.0, 0.0, P, [-1.0], [1.0])
        assert rep.ok, rep.violations

    def test_unstable_loop_fails(self):
        rep = mpc.check_terminal(1.5, 0.0, 1.0, 1.0, 0.0, 1.0, [-1.0], [1.0])
        assert not rep.ok
        assert rep.spectral_radius > 1
        assert any("decrease" in v for v in rep.violations)

    def test_fixture_terminal(self, mpc1):
        assert mpc.check_terminal_for(mpc1.sys, mpc1.terminal).ok

    def test_default_terminal(self):
        term, rep = mpc.default_terminal(_chain(3))
        assert rep.ok, rep.violations


class TestClosedLoop:
    def test_origin_stays_put(self, mpc1):
        tr = mpc.closed_loop(mpc1.sys, mpc1.N, np.zeros(1), 5, "idfg", 0.01, terminal=mpc1.terminal)
        for r in tr:
            assert np.all(np.abs(r.applied) <= 1e-6)
        assert np.all(np.abs(np.array(tr.states)) <= 1e-6)

    @pytest.mark.parametrize("method", ["idg", "idfg"])
    def test_fixture_guarantees(self, mpc1, method):
        c = mpc.condense(mpc1.sys, mpc1.N, mpc1.terminal)
        tr = mpc.closed_loop(mpc1.sys, mpc1.N, mpc1.x0, 10, method, 0.01, terminal=mpc1.terminal)
        assert len(tr) == 10
        for r in tr:
            qp = c.instantiate(r.x)
            assert r.strictly_feasible and qp.box.contains(r.u_hat)
            assert r.lyapunov_ok
            opt = oracle.reference_solve(qp).F_star + float(r.x @ c.C @ r.x)
            assert -1e-9 <= r.F_value - opt <= r.eps_out + 1e-12
            tight = oracle.reference_solve(mpc.tighten(qp, r.eps_c))
            assert np.linalg.norm(tight.lambda_star) <= r.R_d_bar * 2 + 1e-9

    def test_paper_rule_bounds_next_multiplier(self, mpc1):
        c = mpc.condense(mpc1.sys, mpc1.N, mpc1.terminal)
        tr = mpc.closed_loop(mpc1.sys, mpc1.N, mpc1.x0, 10, "idfg", 0.01, terminal=mpc1.terminal)
        for r in tr.records[1:]:
            lam = oracle.reference_solve(mpc.tighten(c.instantiate(r.x), r.eps_c)).lambda_star
            assert np.linalg.norm(lam) <= r.R_d_bar + 1e-9

    def test_csv(self, mpc1, tmp_path):
        tr = mpc.closed_loop(mpc1.sys, mpc1.N, mpc1.x0, 3, "idfg", 0.01, terminal=mpc1.terminal)
        path = tmp_path / "cl.csv"
        tr.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,x_norm,F,eps_out,eps_c,k_out,slack_min,lyapunov_ok"
        assert len(lines) == 4

    def test_rejects_unknown_rule(self, mpc1):
        with pytest.raises(ValueError):
            mpc.closed_loop(mpc1.sys, mpc1.N, mpc1.x0, 2, "idfg", 0.01, terminal=mpc1.terminal, rd_rule="x")


def test_system_json_round_trip(tmp_path):
    sys = _chain(3, nx=2)
    path = tmp_path / "sys.json"
    sys.save(path)
    back = NetworkSystem.load(path)
    assert back.neighbors == sys.neighbors and back.nx == sys.nx
    for k in sys.B:
        np.testing.assert_array_equal(back.B[k], sys.B[k])
    c1, c2 = mpc.condense(sys, 2), mpc.condense(back, 2)
    np.testing.assert_array_equal(c1.H, c2.H)
    np.testing.assert_array_equal(c1.G, c2.G)
