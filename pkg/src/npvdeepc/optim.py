"""Dense solvers sized for small receding-horizon problems.

Provides an SVD pseudo-inverse, a primal active-set solver for convex QPs
with equality constraints and variable bounds, and a Gauss-Newton SQP with
an l1 merit line search for the nonlinear programs the neural controllers
generate.  Everything is dense numpy; problem sizes stay in the hundreds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SolverError",
    "IndefiniteHessianError",
    "SolveDiagnostics",
    "QpProblem",
    "pinv",
    "solve_qp",
    "solve_sqp",
    "check_jacobian",
]

KKT_DAMPING = 1e-10  # diagonal damping for marginally rank-deficient KKT systems


class SolverError(RuntimeError):
    """A solve failed in a way the caller cannot ignore."""


class IndefiniteHessianError(SolverError):
    """The quadratic cost matrix is indefinite beyond tolerance."""


def pinv(a: np.ndarray, rcond: float | None = None) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via SVD.

    Singular values below ``rcond * sigma_max`` are treated as zero; the
    default cutoff is ``max(m, n) * eps``.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    if rcond is None:
        rcond = max(a.shape) * np.finfo(float).eps
    cutoff = rcond * (s[0] if s.size else 0.0)
    s_inv = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    return (vt.T * s_inv) @ u.T


@dataclass
class SolveDiagnostics:
    """Outcome of a QP/SQP solve; feeds the per-step CPU-time metric."""

    status: str                      # optimal | max_iter | infeasible
    iterations: int
    kkt_residual: float
    wall_time_s: float
    eq_multipliers: np.ndarray | None = None

    def __post_init__(self):
        if self.kkt_residual < 0:
            raise ValueError("kkt_residual must be nonnegative")


@dataclass
class QpProblem:
    """min 0.5 x'Hx + g'x  s.t.  A_eq x = b_eq,  lb <= x <= ub.

    H must be symmetric positive semidefinite; bounds may be +-inf.
    """

    h: np.ndarray
    g: np.ndarray
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    validate: bool = True

    def __post_init__(self):
        self.h = np.atleast_2d(np.asarray(self.h, dtype=float))
        self.g = np.asarray(self.g, dtype=float).ravel()
        n = self.g.size
        if self.h.shape != (n, n):
            raise ValueError(f"H shape {self.h.shape} does not match g length {n}")
        if (self.a_eq is None) != (self.b_eq is None):
            raise ValueError("a_eq and b_eq must be given together")
        if self.a_eq is not None:
            self.a_eq = np.atleast_2d(np.asarray(self.a_eq, dtype=float))
            self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
            if self.a_eq.shape != (self.b_eq.size, n):
                raise ValueError(
                    f"A_eq shape {self.a_eq.shape} incompatible with n={n}, m={self.b_eq.size}"
                )
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, dtype=float).ravel()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, dtype=float).ravel()
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("bound lengths do not match the variable count")
        if np.any(self.lb > self.ub):
            raise ValueError("bounds must satisfy lb <= ub")
        if self.validate:
            scale = max(1.0, float(np.max(np.abs(self.h))) if self.h.size else 1.0)
            if float(np.max(np.abs(self.h - self.h.T))) > 1e-12 * scale:
                raise ValueError("H is not symmetric within tolerance")
            try:
                np.linalg.cholesky(self.h + 1e-8 * scale * np.eye(n))
            except np.linalg.LinAlgError:
                raise IndefiniteHessianError("H is indefinite beyond tolerance")
        self.h = 0.5 * (self.h + self.h.T)

    @property
    def n(self) -> int:
        return self.g.size

    @property
    def m_eq(self) -> int:
        return 0 if self.a_eq is None else self.a_eq.shape[0]


def _kkt_solve(h_ff, grad_f, a_f, r_eq):
    """Solve the equality-constrained step on the free variables.

    Falls back to a minimum-norm least-squares solve when the KKT matrix is
    singular (redundant equality rows from pseudo-inverse-based data).
    """
    nf = grad_f.size
    m = 0 if a_f is None else a_f.shape[0]
    kkt = np.zeros((nf + m, nf + m))
    kkt[:nf, :nf] = h_ff + KKT_DAMPING * np.eye(nf)
    rhs = np.concatenate([-grad_f, r_eq]) if m else -grad_f
    if m:
        kkt[:nf, nf:] = a_f.T
        kkt[nf:, :nf] = a_f
    try:
        sol = np.linalg.solve(kkt, rhs)
        if not np.all(np.isfinite(sol)) or (
            np.linalg.norm(kkt @ sol - rhs, np.inf) > 1e-8 * (1.0 + np.linalg.norm(rhs, np.inf))
        ):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol[:nf], sol[nf:]


def _active_set(h, g, a_eq, b_eq, lb, ub, x, tol, max_iter):
    """Primal active-set iteration from a bound-feasible point.

    The equality residual enters the KKT right-hand side each iteration, so
    mild initial equality infeasibility is repaired along the way.
    """
    n = x.size
    m = 0 if a_eq is None else a_eq.shape[0]
    # seed the working set with the bounds active at the start point
    working = {}
    for i in range(n):
        if lb[i] == ub[i]:
            working[i] = "fixed"
            x[i] = lb[i]
        elif x[i] == lb[i] and np.isfinite(lb[i]):
            working[i] = "lower"
        elif x[i] == ub[i] and np.isfinite(ub[i]):
            working[i] = "upper"
    lam = np.zeros(m)
    feas_tol = tol * (1.0 + (np.linalg.norm(b_eq, np.inf) if m else 0.0))

    for it in range(1, max_iter + 1):
        free = np.array([i for i in range(n) if i not in working], dtype=int)
        grad = h @ x + g
        r_eq = b_eq - a_eq @ x if m else np.zeros(0)
        a_f = a_eq[:, free] if m else None
        p = np.zeros(n)
        if free.size:
            p_f, lam = _kkt_solve(h[np.ix_(free, free)], grad[free], a_f, r_eq)
            p[free] = p_f
        elif m:
            lam, *_ = np.linalg.lstsq(a_eq.T, -grad, rcond=None)

        step_small = np.linalg.norm(p, np.inf) <= tol * (1.0 + np.linalg.norm(x, np.inf))
        if step_small and (not m or np.linalg.norm(r_eq, np.inf) <= feas_tol):
            # candidate optimum: check bound multipliers
            r = grad + (a_eq.T @ lam if m else 0.0)
            worst, worst_val = None, -tol
            for i, side in working.items():
                if side == "fixed":
                    continue
                mult = r[i] if side == "lower" else -r[i]
                if mult < worst_val:
                    worst, worst_val = i, mult
            if worst is None:
                return x, lam, it, "optimal"
            del working[worst]
            continue

        # ratio test against the bounds on free variables
        alpha, blocker, block_side = 1.0, None, None
        for i in free:
            if p[i] > 1e-14 and np.isfinite(ub[i]):
                a_i = (ub[i] - x[i]) / p[i]
                if a_i < alpha:
                    alpha, blocker, block_side = a_i, i, "upper"
            elif p[i] < -1e-14 and np.isfinite(lb[i]):
                a_i = (lb[i] - x[i]) / p[i]
                if a_i < alpha:
                    alpha, blocker, block_side = a_i, i, "lower"
        alpha = max(alpha, 0.0)
        x = np.clip(x + alpha * p, lb, ub)
        if blocker is not None:
            working[blocker] = block_side
            x[blocker] = ub[blocker] if block_side == "upper" else lb[blocker]

    return x, lam, max_iter, "max_iter"


def _restore_equalities(prob: QpProblem, x: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    """Bound-feasible point minimizing the equality residual (phase 1)."""
    a, b = prob.a_eq, prob.b_eq
    # quick path: minimum-norm correction, valid if it stays inside the bounds
    corr = pinv(a) @ (b - a @ x)
    quick = x + corr
    if np.all(quick >= prob.lb - 1e-12) and np.all(quick <= prob.ub + 1e-12):
        return np.clip(quick, prob.lb, prob.ub)
    h1 = a.T @ a
    g1 = -a.T @ b
    x1, _, _, _ = _active_set(h1, g1, None, None, prob.lb, prob.ub, x.copy(), tol, max_iter)
    return x1


def _qp_kkt_residual(prob: QpProblem, x, lam, working_sides=None) -> float:
    grad = prob.h @ x + prob.g
    r = grad + (prob.a_eq.T @ lam if prob.m_eq else 0.0)
    res = 0.0
    if prob.m_eq:
        res = float(np.linalg.norm(prob.a_eq @ x - prob.b_eq, np.inf))
    tol_bnd = 1e-10 * (1.0 + np.linalg.norm(x, np.inf))
    for i in range(prob.n):
        if x[i] <= prob.lb[i] + tol_bnd:
            res = max(res, max(0.0, -r[i]))
        elif x[i] >= prob.ub[i] - tol_bnd:
            res = max(res, max(0.0, r[i]))
        else:
            res = max(res, abs(r[i]))
    return res


def solve_qp(
    prob: QpProblem,
    x0: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> tuple[np.ndarray, SolveDiagnostics]:
    """Active-set solve of a convex box/equality QP.

    Returns the minimizer and diagnostics; equality multipliers ride along on
    the diagnostics for SQP consumption.  Bounds are honored exactly at the
    returned point.
    """
    t0 = time.perf_counter()
    n = prob.n
    if x0 is None:
        finite_lo = np.where(np.isfinite(prob.lb), prob.lb, 0.0)
        finite_hi = np.where(np.isfinite(prob.ub), prob.ub, 0.0)
        both = np.isfinite(prob.lb) & np.isfinite(prob.ub)
        x0 = np.where(
            both,
            0.5 * (finite_lo + finite_hi),
            np.where(np.isfinite(prob.lb), finite_lo, np.where(np.isfinite(prob.ub), finite_hi, 0.0)),
        )
    x = np.clip(np.asarray(x0, dtype=float).ravel().copy(), prob.lb, prob.ub)

    feas_tol = max(tol, 1e-8) * (1.0 + (np.linalg.norm(prob.b_eq, np.inf) if prob.m_eq else 0.0))
    if prob.m_eq and np.linalg.norm(prob.a_eq @ x - prob.b_eq, np.inf) > feas_tol:
        x = _restore_equalities(prob, x, tol, max_iter)
        if np.linalg.norm(prob.a_eq @ x - prob.b_eq, np.inf) > max(1e-6, 1e3 * feas_tol):
            diag = SolveDiagnostics(
                status="infeasible",
                iterations=0,
                kkt_residual=float(np.linalg.norm(prob.a_eq @ x - prob.b_eq, np.inf)),
                wall_time_s=time.perf_counter() - t0,
            )
            return x, diag

    x, lam, its, status = _active_set(
        prob.h, prob.g, prob.a_eq, prob.b_eq, prob.lb, prob.ub, x, tol, max_iter
    )
    lam = np.asarray(lam, dtype=float)
    diag = SolveDiagnostics(
        status=status,
        iterations=its,
        kkt_residual=_qp_kkt_residual(prob, x, lam),
        wall_time_s=time.perf_counter() - t0,
        eq_multipliers=lam if prob.m_eq else None,
    )
    return x, diag


def solve_sqp(
    cost_fn,
    eq_fn,
    lb,
    ub,
    x0,
    tol: float = 1e-6,
    max_iter: int = 50,
    qp_max_iter: int = 200,
    lag_hess_fn=None,
) -> tuple[np.ndarray, SolveDiagnostics]:
    """SQP with an l1 merit, ratio-managed box trust region and SOC steps.

    Args:
        cost_fn: x -> (f, grad, hess); hess must be symmetric PSD (exact for
            quadratic costs, Gauss-Newton otherwise).
        eq_fn: x -> (c, jac) equality constraints c(x) = 0 with analytic
            Jacobian; pass None when unconstrained.
        lb, ub: variable bounds (+-inf allowed).
        x0: start point, clipped into the bounds.
        lag_hess_fn: optional (x, lam) -> PSD constraint-curvature term added
            to the QP Hessian; restores fast local convergence when the
            equality constraints are meaningfully nonlinear.

    Every trial step gets a second-order correction (minimum-norm constraint
    restoration over the coordinates the step left strictly inside their
    bounds), so the merit compares costs on the constraint manifold.
    Returns the best iterate; exhaustion yields status ``max_iter``.
    """
    t0 = time.perf_counter()
    lb = np.asarray(lb, dtype=float).ravel()
    ub = np.asarray(ub, dtype=float).ravel()
    x = np.clip(np.asarray(x0, dtype=float).ravel().copy(), lb, ub)
    mu = 1.0
    radius = 1e3
    steps = 0
    kkt = np.inf
    status = "max_iter"

    def _eval_c(xv):
        if eq_fn is None:
            return np.zeros(0), np.zeros((0, xv.size))
        c, jac = eq_fn(xv)
        return np.asarray(c, dtype=float).ravel(), np.atleast_2d(np.asarray(jac, dtype=float))

    f, grad, hess = cost_fn(x)
    c, jac = _eval_c(x)
    m = c.size
    best_x, best_merit = x.copy(), np.inf
    lam = np.zeros(m)

    for _ in range(max_iter):
        h_qp = hess
        if lag_hess_fn is not None and m:
            extra = lag_hess_fn(x, lam)
            if extra is not None:
                h_qp = hess + extra
        qp = QpProblem(
            h=h_qp,
            g=grad,
            a_eq=jac if m else None,
            b_eq=-c if m else None,
            lb=np.maximum(lb - x, -radius),
            ub=np.minimum(ub - x, radius),
            validate=False,
        )
        d, qdiag = solve_qp(qp, x0=np.zeros(x.size), tol=min(tol, 1e-8), max_iter=qp_max_iter)
        if qdiag.status == "infeasible":
            # linearized constraints may not fit inside the trust box; widen once
            radius *= 16.0
            qp = QpProblem(
                h=h_qp, g=grad, a_eq=jac if m else None, b_eq=-c if m else None,
                lb=np.maximum(lb - x, -radius), ub=np.minimum(ub - x, radius), validate=False,
            )
            d, qdiag = solve_qp(qp, x0=np.zeros(x.size), tol=min(tol, 1e-8), max_iter=qp_max_iter)
            if qdiag.status == "infeasible":
                status = "infeasible"
                break
        lam = qdiag.eq_multipliers if qdiag.eq_multipliers is not None else np.zeros(m)

        # KKT residual at the current iterate using the QP multipliers
        r = grad + (jac.T @ lam if m else 0.0)
        stat = 0.0
        tol_bnd = 1e-10 * (1.0 + np.linalg.norm(x, np.inf))
        for i in range(x.size):
            if x[i] <= lb[i] + tol_bnd:
                stat = max(stat, max(0.0, -r[i]))
            elif x[i] >= ub[i] - tol_bnd:
                stat = max(stat, max(0.0, r[i]))
            else:
                stat = max(stat, abs(r[i]))
        kkt = max(stat, float(np.linalg.norm(c, np.inf)) if m else 0.0)
        step_norm = float(np.linalg.norm(d, np.inf))
        if kkt <= tol and step_norm <= tol * (1.0 + np.linalg.norm(x, np.inf)):
            status = "optimal"
            break

        if m:
            mu = max(mu, 1.05 * float(np.linalg.norm(lam, np.inf)) + 1.0)
        c_l1 = float(np.sum(np.abs(c)))
        merit0 = f + mu * c_l1
        if merit0 < best_merit:
            best_x, best_merit = x.copy(), merit0
        # model reduction of the l1 merit; the QP drives c + J d to zero
        model_cost_change = float(grad @ d) + 0.5 * float(d @ (h_qp @ d))
        resid_after = float(np.sum(np.abs(c + jac @ d))) if m else 0.0
        pred_red = -model_cost_change + mu * (c_l1 - resid_after)
        if pred_red <= 1e-14 * (1.0 + abs(merit0)):
            if m and c_l1 > tol:
                # penalty too small to pay for the restoration step
                mu = 2.0 * max(model_cost_change, 0.0) / max(c_l1 - resid_after, 1e-12) + 2.0 * mu
                continue
            status = "optimal" if kkt <= 10 * tol else "max_iter"
            break

        def _merit_at(xv):
            f_t, _, _ = cost_fn(xv)
            c_t, _ = _eval_c(xv)
            return f_t + mu * float(np.sum(np.abs(c_t))), f_t

        trial = np.clip(x + d, lb, ub)
        if m:
            # second-order correction: land each trial back on the constraint
            # manifold, so the merit sees the cost change and not the
            # quadratic violation the linearized step leaves behind; bound-
            # active coordinates stay pinned so activity detection survives
            c_trial, _ = _eval_c(trial)
            lo_gap = np.where(np.isfinite(lb), trial - lb, np.inf)
            hi_gap = np.where(np.isfinite(ub), ub - trial, np.inf)
            margin = 1e-9 * (1.0 + np.abs(trial))
            interior = (lo_gap > margin) & (hi_gap > margin)
            if np.all(np.isfinite(c_trial)) and np.any(interior):
                d_soc_f, *_ = np.linalg.lstsq(jac[:, interior], -c_trial, rcond=None)
                d_soc = np.zeros_like(trial)
                d_soc[interior] = d_soc_f
                trial_soc = np.clip(trial + d_soc, lb, ub)
                merit_plain, _ = _merit_at(trial)
                merit_soc, _ = _merit_at(trial_soc)
                if np.isfinite(merit_soc) and merit_soc <= merit_plain:
                    trial = trial_soc
        merit_t, _ = _merit_at(trial)
        accepted = np.isfinite(merit_t) and (merit0 - merit_t) >= 0.1 * pred_red
        if accepted:
            good = (merit0 - merit_t) >= 0.75 * pred_red
            at_boundary = step_norm >= 0.9 * radius
            if good and at_boundary:
                radius = min(radius * 2.0, 1e6)
            x = trial
            steps += 1
            f, grad, hess = cost_fn(x)
            c, jac = _eval_c(x)
        else:
            radius = max(0.25 * step_norm, 1e-12)
            if radius <= 1e-11 * (1.0 + np.linalg.norm(x, np.inf)):
                break

    if status != "optimal":
        f_cur, _, _ = cost_fn(x)
        c_cur, _ = _eval_c(x)
        if f_cur + mu * float(np.sum(np.abs(c_cur))) > best_merit:
            x = best_x
    diag = SolveDiagnostics(
        status=status,
        iterations=steps,
        kkt_residual=float(kkt) if np.isfinite(kkt) else 0.0,
        wall_time_s=time.perf_counter() - t0,
    )
    return x, diag


def check_jacobian(fn, x0, step: float = 1e-6) -> float:
    """Max relative error between an analytic Jacobian and central differences.

    ``fn(x) -> (values, jacobian)``; useful for validating constraint
    callbacks before handing them to the SQP.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    _, jac = fn(x0)
    jac = np.atleast_2d(np.asarray(jac, dtype=float))
    fd = np.zeros_like(jac)
    for j in range(x0.size):
        e = np.zeros_like(x0)
        e[j] = step
        f_plus, _ = fn(x0 + e)
        f_minus, _ = fn(x0 - e)
        fd[:, j] = (np.asarray(f_plus).ravel() - np.asarray(f_minus).ravel()) / (2 * step)
    scale = max(float(np.max(np.abs(jac))), 1e-8)
    return float(np.max(np.abs(fd - jac)) / scale)
