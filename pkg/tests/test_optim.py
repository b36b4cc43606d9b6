import numpy as np
import pytest

from npvdeepc.optim import (
    IndefiniteHessianError,
    QpProblem,
    check_jacobian,
    pinv,
    solve_qp,
    solve_sqp,
)


class TestPinv:
    def test_identity(self):
        assert np.allclose(pinv(np.eye(4)), np.eye(4), atol=1e-14)

    def test_singular_diagonal(self):
        assert np.allclose(pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]), atol=1e-14)

    def test_penrose_identities_random(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            a = rng.standard_normal((8, 5))
            x = pinv(a)
            assert np.allclose(a @ x @ a, a, atol=1e-10)
            assert np.allclose(x @ a @ x, x, atol=1e-10)
            assert np.allclose((a @ x).T, a @ x, atol=1e-10)
            assert np.allclose((x @ a).T, x @ a, atol=1e-10)

    def test_rank_deficient_penrose(self):
        rng = np.random.default_rng(1)
        base = rng.standard_normal((8, 3))
        a = base @ rng.standard_normal((3, 5))  # rank 3
        x = pinv(a)
        assert np.allclose(a @ x @ a, a, atol=1e-10)


def _projected_gradient_oracle(h, g, lb, ub, iters=200000, tol=1e-10):
    """Slow but independent solver for bound-constrained convex QPs."""
    n = g.size
    x = np.clip(np.zeros(n), lb, ub)
    step = 1.0 / np.linalg.eigvalsh(h).max()
    for _ in range(iters):
        x_new = np.clip(x - step * (h @ x + g), lb, ub)
        if np.linalg.norm(x_new - x, np.inf) < tol:
            x = x_new
            break
        x = x_new
    return x


class TestSolveQp:
    def test_unconstrained_closed_form(self):
        c = np.array([1.0, -2.0, 0.5])
        prob = QpProblem(h=np.eye(3), g=-c)
        x, diag = solve_qp(prob)
        assert diag.status == "optimal"
        assert np.allclose(x, c, atol=1e-10)

    def test_active_lower_bound(self):
        # min x^2 s.t. x >= 1
        prob = QpProblem(h=np.array([[2.0]]), g=np.array([0.0]), lb=np.array([1.0]), ub=np.array([np.inf]))
        x, diag = solve_qp(prob)
        assert x[0] == 1.0
        assert diag.status == "optimal"

    def test_matches_projected_gradient_oracle(self):
        rng = np.random.default_rng(3)
        m = rng.standard_normal((10, 10))
        h = m.T @ m + 0.5 * np.eye(10)
        g = rng.standard_normal(10)
        lb = np.full(10, -0.5)
        ub = np.full(10, 0.5)
        x_oracle = _projected_gradient_oracle(h, g, lb, ub)
        x, diag = solve_qp(QpProblem(h=h, g=g, lb=lb, ub=ub), tol=1e-10)
        assert diag.status == "optimal"
        assert np.allclose(x, x_oracle, atol=1e-7)

    def test_equality_constrained(self):
        # min ||x||^2 s.t. x0 + x1 = 1 -> x = (0.5, 0.5)
        prob = QpProblem(
            h=2 * np.eye(2), g=np.zeros(2), a_eq=np.array([[1.0, 1.0]]), b_eq=np.array([1.0])
        )
        x, diag = solve_qp(prob)
        assert np.allclose(x, [0.5, 0.5], atol=1e-9)
        assert diag.kkt_residual < 1e-7

    def test_equality_with_binding_bound(self):
        # min ||x||^2 s.t. x0 + x1 = 1, x0 <= 0.2 -> x = (0.2, 0.8)
        prob = QpProblem(
            h=2 * np.eye(2),
            g=np.zeros(2),
            a_eq=np.array([[1.0, 1.0]]),
            b_eq=np.array([1.0]),
            lb=np.array([-np.inf, -np.inf]),
            ub=np.array([0.2, np.inf]),
        )
        x, diag = solve_qp(prob)
        assert np.allclose(x, [0.2, 0.8], atol=1e-9)

    def test_infeasible_equalities(self):
        # x = 0 and x = 1 cannot both hold
        prob = QpProblem(
            h=np.eye(1),
            g=np.zeros(1),
            a_eq=np.array([[1.0], [1.0]]),
            b_eq=np.array([0.0, 1.0]),
        )
        x, diag = solve_qp(prob)
        assert diag.status == "infeasible"

    def test_bounds_honored_exactly(self):
        rng = np.random.default_rng(4)
        for trial in range(10):
            m = rng.standard_normal((6, 6))
            h = m.T @ m + 0.1 * np.eye(6)
            g = 3 * rng.standard_normal(6)
            lb, ub = np.full(6, -0.3), np.full(6, 0.3)
            x, _ = solve_qp(QpProblem(h=h, g=g, lb=lb, ub=ub))
            assert np.all(x >= lb) and np.all(x <= ub)

    def test_redundant_equality_rows(self):
        # duplicated rows must not break the solve
        a = np.array([[1.0, 1.0], [2.0, 2.0]])
        b = np.array([1.0, 2.0])
        x, diag = solve_qp(QpProblem(h=2 * np.eye(2), g=np.zeros(2), a_eq=a, b_eq=b))
        assert np.allclose(x, [0.5, 0.5], atol=1e-8)

    def test_indefinite_rejected(self):
        with pytest.raises(IndefiniteHessianError):
            QpProblem(h=np.diag([1.0, -1.0]), g=np.zeros(2))

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            QpProblem(h=np.array([[1.0, 0.5], [0.0, 1.0]]), g=np.zeros(2))


class TestSolveSqp:
    def test_quadratic_with_linear_constraints_single_iteration(self):
        rng = np.random.default_rng(5)
        m = rng.standard_normal((4, 4))
        h = m.T @ m + np.eye(4)
        g = rng.standard_normal(4)
        a = rng.standard_normal((2, 4))
        b = rng.standard_normal(2)
        lb = np.full(4, -5.0)
        ub = np.full(4, 5.0)

        def cost(x):
            return 0.5 * x @ h @ x + g @ x, h @ x + g, h

        def eq(x):
            return a @ x - b, a

        x_qp, _ = solve_qp(QpProblem(h=h, g=g, a_eq=a, b_eq=b, lb=lb, ub=ub), tol=1e-10)
        x, diag = solve_sqp(cost, eq, lb, ub, x0=np.zeros(4), tol=1e-8)
        assert diag.status == "optimal"
        assert diag.iterations == 1
        assert np.allclose(x, x_qp, atol=1e-7)

    def test_rosenbrock_on_box(self):
        # Gauss-Newton on the residual form of Rosenbrock
        def cost(x):
            r = np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])
            jac = np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])
            f = float(r @ r)
            grad = 2.0 * jac.T @ r
            hess = 2.0 * jac.T @ jac
            return f, grad, hess

        lb = np.array([-2.0, -2.0])
        ub = np.array([2.0, 2.0])
        x, diag = solve_sqp(cost, None, lb, ub, x0=np.array([-1.2, 1.0]), tol=1e-10, max_iter=200)
        assert np.allclose(x, [1.0, 1.0], atol=1e-6)
        grad = cost(x)[1]
        assert np.linalg.norm(grad) < 1e-6

    def test_nonlinear_equality(self):
        # min ||x||^2 s.t. x0^2 + x1 = 1; optimum satisfies the constraint
        def cost(x):
            return float(x @ x), 2 * x, 2 * np.eye(2)

        def eq(x):
            return np.array([x[0] ** 2 + x[1] - 1.0]), np.array([[2 * x[0], 1.0]])

        x, diag = solve_sqp(cost, eq, np.full(2, -10.0), np.full(2, 10.0), x0=np.array([1.0, 1.0]))
        assert abs(x[0] ** 2 + x[1] - 1.0) < 1e-8
        assert diag.status == "optimal"

    def test_jacobian_check_helper(self):
        a = np.array([[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]])

        def fn(x):
            return np.array([np.sin(x[0]) + a[0] @ x, a[1] @ x ** 2]), np.vstack(
                [a[0] + np.array([np.cos(x[0]), 0, 0]), 2 * a[1] * x]
            )

        assert check_jacobian(fn, np.array([0.3, -0.7, 1.1])) < 1e-6

    def test_jacobian_check_catches_errors(self):
        def fn(x):
            return np.array([x[0] ** 2]), np.array([[3.0 * x[0]]])  # wrong by 1.5x

        assert check_jacobian(fn, np.array([1.0])) > 1e-2
