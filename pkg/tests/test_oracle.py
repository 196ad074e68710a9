import numpy as np
import pytest

from dualmpc import oracle
from dualmpc.errors import InfeasibleError
from dualmpc.harness.generators import gen_random_qp
from dualmpc.model import BlockPartition, Box, CoupledQP, constants, objective

cvxopt = pytest.importorskip("cvxopt")


def _cvxopt_solve(qp):
    """Independent interior-point solve with the box written as inequality rows."""
    n = qp.n
    A = np.vstack([qp.G, np.eye(n), -np.eye(n)])
    b = np.concatenate([-qp.g, qp.box.ub, -qp.box.lb])
    cvxopt.solvers.options.update(show_progress=False, abstol=1e-12, reltol=1e-12, feastol=1e-12)
    sol = cvxopt.solvers.qp(cvxopt.matrix(qp.H), cvxopt.matrix(qp.q), cvxopt.matrix(A), cvxopt.matrix(b))
    return np.array(sol["x"]).ravel(), np.array(sol["z"]).ravel()[: qp.p]


class TestReferenceSolve:
    def test_fixture(self, p1_reference):
        np.testing.assert_allclose(p1_reference.u_star, [0.5, 0.5], atol=1e-10)
        np.testing.assert_allclose(p1_reference.lambda_star, [0.5], atol=1e-10)
        assert p1_reference.F_star == pytest.approx(0.25, abs=1e-10)
        assert p1_reference.kkt_residuals.max <= 1e-10

    def test_inactive_coupling(self):
        qp = gen_random_qp(8, 2)
        qp = qp.with_offset(qp.g - 100.0)
        ref = oracle.reference_solve(qp)
        np.testing.assert_array_equal(ref.lambda_star, np.zeros(qp.p))
        u_box, _ = oracle.exact_inner(qp, np.zeros(qp.p))
        np.testing.assert_allclose(ref.u_star, u_box, atol=1e-9)

    def test_origin_optimum(self):
        qp = CoupledQP(np.eye(3), np.zeros(3), np.ones((2, 3)), -np.ones(2), Box(-np.ones(3), np.ones(3)),
                       BlockPartition((1, 1, 1)))
        ref = oracle.reference_solve(qp)
        np.testing.assert_allclose(ref.u_star, 0, atol=1e-12)
        assert ref.F_star == pytest.approx(0.0, abs=1e-14)

    @pytest.mark.parametrize("seed", range(4))
    def test_matches_interior_point(self, seed):
        qp = gen_random_qp(12, seed)
        ref = oracle.reference_solve(qp)
        u, lam = _cvxopt_solve(qp)
        assert ref.F_star == pytest.approx(objective(qp, u), abs=1e-7)
        np.testing.assert_allclose(ref.u_star, u, atol=1e-5)
        np.testing.assert_allclose(ref.lambda_star, lam, atol=1e-5)
        assert ref.kkt_residuals.max <= 1e-8
        assert np.all(ref.lambda_star >= 0)

    def test_infeasible(self):
        qp = CoupledQP(np.eye(2), np.zeros(2), np.array([[-1.0, -1.0]]), np.array([5.0]),
                       Box(-np.ones(2), np.ones(2)), BlockPartition((1, 1)))
        with pytest.raises(InfeasibleError):
            oracle.reference_solve(qp)


class TestExactInner:
    def test_fixture(self, p1):
        u, d = oracle.exact_inner(p1, np.array([0.5]))
        np.testing.assert_allclose(u, [0.5, 0.5], atol=1e-12)
        assert d == pytest.approx(0.25, abs=1e-12)

    def test_dual_formula_on_fixture(self, p1):
        for lam in np.linspace(0, 10, 11):
            assert oracle.exact_dual(p1, np.array([lam])) == pytest.approx(lam - lam**2, abs=1e-10)

    def test_zero_multiplier_is_box_minimum(self):
        qp = gen_random_qp(6, 1)
        u, _ = oracle.exact_inner(qp, np.zeros(qp.p))
        u_cvx, _ = _cvxopt_solve(qp.with_offset(qp.g - 1e3))
        np.testing.assert_allclose(u, u_cvx, atol=1e-6)

    def test_rejects_negative_multiplier(self, p1):
        with pytest.raises(ValueError):
            oracle.exact_inner(p1, np.array([-0.1]))

    def test_dual_concave(self, rng):
        qp = gen_random_qp(10, 4)
        tol = 1e-13
        for _ in range(20):
            a, b = rng.uniform(0, 2, (2, qp.p))
            t = rng.uniform()
            lhs = oracle.exact_dual(qp, t * a + (1 - t) * b, tol=tol)
            rhs = t * oracle.exact_dual(qp, a, tol=tol) + (1 - t) * oracle.exact_dual(qp, b, tol=tol)
            assert lhs >= rhs - 2 * tol

    def test_gradient_is_constraint_value(self, rng):
        qp = gen_random_qp(8, 6)
        h = 1e-6
        for _ in range(5):
            lam = rng.uniform(0.1, 1.0, qp.p)
            u, _ = oracle.exact_inner(qp, lam)
            grad = qp.G @ u + qp.g
            fd = np.array([(oracle.exact_dual(qp, lam + h * e) - oracle.exact_dual(qp, lam - h * e)) / (2 * h)
                           for e in np.eye(qp.p)])
            np.testing.assert_allclose(fd, grad, rtol=1e-5, atol=1e-7)

    def test_gradient_lipschitz(self, rng):
        qp = gen_random_qp(10, 8)
        L = constants(qp).L_d_exact
        for _ in range(20):
            a, b = rng.uniform(0, 2, (2, qp.p))
            ha = qp.G @ oracle.exact_inner(qp, a)[0] + qp.g
            hb = qp.G @ oracle.exact_inner(qp, b)[0] + qp.g
            assert np.linalg.norm(ha - hb) <= L * np.linalg.norm(a - b) * (1 + 1e-6)


class TestKkt:
    def test_fixture_optimum(self, p1):
        r = oracle.kkt_residual(p1, np.array([0.5, 0.5]), np.array([0.5]))
        assert r.max <= 1e-10

    def test_inactive_coupling(self):
        qp = gen_random_qp(6, 3)
        qp = qp.with_offset(qp.g - 100.0)
        u, _ = oracle.exact_inner(qp, np.zeros(qp.p), tol=1e-15)
        assert oracle.kkt_residual(qp, u, np.zeros(qp.p)).max <= 1e-7

    def test_perturbation_grows_stationarity(self, p1):
        base = np.array([0.5, 0.5])
        lam = np.array([0.5])
        r = [oracle.kkt_residual(p1, base + np.array([d, 0.0]), lam).stationarity for d in (1e-3, 1e-2)]
        assert r[0] == pytest.approx(1e-3, rel=1e-6)
        assert r[1] == pytest.approx(1e-2, rel=1e-6)


class TestSlaterPoints:
    def test_max_slack(self, p1):
        u, s = oracle.max_slack_point(p1)
        assert s == pytest.approx(1.0)
        assert p1.box.contains(u)
        assert np.min(-(p1.G @ u + p1.g)) >= s - 1e-9

    def test_find_slater_is_strict(self):
        qp = gen_random_qp(10, 0)
        u, s = oracle.find_slater(qp)
        assert s > 0 and qp.box.contains(u, tol=1e-12)
        assert np.min(-(qp.G @ u + qp.g)) == pytest.approx(s)

    def test_infeasible(self):
        qp = CoupledQP(np.eye(2), np.zeros(2), np.array([[-1.0, -1.0]]), np.array([5.0]),
                       Box(-np.ones(2), np.ones(2)), BlockPartition((1, 1)))
        with pytest.raises(InfeasibleError):
            oracle.max_slack_point(qp)
