"""Neural and parameter-varying DeePC built on the trained predictor.

Each data Hankel column is pushed through the hidden-layer feature map to
give a neural-space basis; stacking a ones row makes predictions affine in
the features.  The controller then solves a small nonlinear program over
(u, y, g_tilde): the predicted outputs must match the data-driven affine map
of the features of the candidate input, g_tilde absorbs the residual freedom
and is pinned to the kernel of the feature stack (hard, or softly via a
penalized slack).  Only the feature map is nonlinear in u, so a Gauss-Newton
SQP with the analytic feature Jacobian converges in a handful of iterations.

The fixed-basis variant freezes the hypernet at the training-set mean
parameter, removing the parameter-varying adaptation but keeping everything
else identical.  The thermal-dose variant swaps the tracking cost for a
terminal dose miss with a smoothed activation switch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .control import ControllerConfig, StepResult, TrackingCost
from .hankel import DimensionError, HankelSet, Trajectory, build_hankel, partition
from .hypernet import HyperDnnModel, NnInput, refit_output_ls
from .optim import SolverError, pinv, solve_sqp
from .plant import CEM_KAPPA, CEM_REFERENCE_TEMP, CEM_SWITCH_TEMP

__all__ = [
    "NeuralHankel",
    "RankDeficientError",
    "hankel_with_params",
    "transform_hankel",
    "lemma2_residual",
    "npv_prediction",
    "problem_size",
    "NpvController",
    "NeuralController",
    "CemController",
    "smoothed_kappa",
    "predicted_cem",
]


class RankDeficientError(ValueError):
    pass


@dataclass
class NeuralHankel:
    """Feature-space data matrices and their precomputed pseudo-inverse operators."""

    phi_hl: np.ndarray        # (nu_L, n_cols)
    yf: np.ndarray            # (n_y*N, n_cols)
    m: np.ndarray             # pinv of col(phi_hl, 1'):  (n_cols, nu_L+1)
    kmat: np.ndarray          # col(phi_hl, 1') @ pinv(yf):  (nu_L+1, n_y*N)
    theta_ls: np.ndarray      # yf @ m:  (n_y*N, nu_L+1)
    kernel_rows: np.ndarray   # orthonormal basis of row(kmat): same null space,
    stack_rank: int           # unit-scaled rows keep the multipliers modest
    yf_full_row_rank: bool

    @property
    def n_cols(self) -> int:
        return self.phi_hl.shape[1]

    def stack(self) -> np.ndarray:
        return np.vstack([self.phi_hl, np.ones((1, self.n_cols))])


def hankel_with_params(
    traj: Trajectory, t_ini: int, horizon: int, n_cols: int | None = None
) -> tuple[HankelSet, np.ndarray]:
    """Partitioned Hankel plus the aligned parameter-history columns.

    Column j of the returned (n_p*t_ini, n_cols) matrix is the parameter
    history of the window that forms Hankel column j.
    """
    hs = partition(traj, t_ini, horizon, n_cols)
    p_hank = build_hankel(traj.p[:hs.k_source], t_ini)
    return hs, p_hank[:, :hs.n_cols]


def transform_hankel(
    model: HyperDnnModel,
    hs: HankelSet,
    p_hist_cols: np.ndarray,
    p_override: np.ndarray | None = None,
    rank_rtol: float = 1e-8,
    refit_model: bool = True,
) -> NeuralHankel:
    """Push every Hankel column through the feature map and precompute operators.

    ``p_override`` replaces the per-column parameter history with one fixed
    raw history (the fixed-basis controller variant); pass
    ``refit_model=False`` there so the model's refit output layer keeps
    tracking the parameter-varying transform.  Construction fails if the
    stacked feature matrix loses full row rank, since the affine combination
    then no longer spans the neural space.
    """
    d = model.dims
    if hs.t_ini != d.t_ini or hs.horizon != d.horizon:
        raise DimensionError("Hankel horizons do not match the model dims")
    p_hist_cols = np.atleast_2d(np.asarray(p_hist_cols, dtype=float))
    if p_hist_cols.shape != (d.n_p * d.t_ini, hs.n_cols):
        raise DimensionError(
            f"parameter history block {p_hist_cols.shape} does not align with "
            f"{hs.n_cols} Hankel columns"
        )

    n_cols = hs.n_cols
    u_nn = np.empty((n_cols, d.nu_u))
    p_in = np.empty((n_cols, d.nu_p))
    for j in range(n_cols):
        nn_in = model.nn_input(
            hs.up[:, j], hs.yp[:, j], hs.uf[:, j],
            p_hist_cols[:, j] if p_override is None else p_override,
        )
        u_nn[j] = nn_in.u_nn
        p_in[j] = nn_in.p_vec
    phi = model.phi_hl_batch(u_nn, p_in).T

    stack = np.vstack([phi, np.ones((1, n_cols))])
    svals = np.linalg.svd(stack, compute_uv=False)
    rank = int(np.sum(svals > rank_rtol * svals[0]))
    if rank < stack.shape[0]:
        raise RankDeficientError(
            f"neural Hankel rank deficient ({rank} < {stack.shape[0]}): "
            "enrich data or reduce the feature width"
        )
    m = pinv(stack)
    yf_svals = np.linalg.svd(hs.yf, compute_uv=False)
    yf_rank = int(np.sum(yf_svals > max(hs.yf.shape) * np.finfo(float).eps * yf_svals[0]))
    kmat = stack @ pinv(hs.yf)
    _, k_svals, k_vt = np.linalg.svd(kmat)
    k_rank = int(np.sum(k_svals > max(kmat.shape) * np.finfo(float).eps * k_svals[0]))
    nh = NeuralHankel(
        phi_hl=phi,
        yf=hs.yf.copy(),
        m=m,
        kmat=kmat,
        theta_ls=hs.yf @ m,
        kernel_rows=k_vt[:k_rank],
        stack_rank=rank,
        yf_full_row_rank=yf_rank == hs.yf.shape[0],
    )
    if refit_model:
        refit_output_ls(model, phi, hs.yf)
    return nh


def lemma2_residual(model: HyperDnnModel, nh: NeuralHankel) -> tuple[np.ndarray, float]:
    """Least-squares residual matrix and its worst action on the feature kernel.

    The data-driven and refit-model predictions agree exactly when the
    residual annihilates the null space of the feature stack; the returned
    violation is sup ||E g|| over unit-norm null vectors (the spectral norm
    of E restricted to the kernel), a data-quality diagnostic.
    """
    if model.theta_ls is None:
        raise ValueError("refit output layer before computing the residual")
    stack = nh.stack()
    e = nh.yf - model.theta_ls @ stack
    _, svals, vt = np.linalg.svd(stack)
    rank = int(np.sum(svals > max(stack.shape) * np.finfo(float).eps * svals[0]))
    null_basis = vt[rank:].T
    if null_basis.shape[1] == 0:
        return e, 0.0
    violation = float(np.linalg.norm(e @ null_basis, 2))
    return e, violation


def npv_prediction(nh: NeuralHankel, phi_k: np.ndarray, g_tilde: np.ndarray | None = None) -> np.ndarray:
    """Data-driven prediction yf @ g* for the minimum-norm g* matching phi_k."""
    rhs = np.concatenate([np.asarray(phi_k, dtype=float).ravel(), [1.0]])
    g_star = nh.m @ rhs
    y = nh.yf @ g_star
    if g_tilde is not None:
        y = y + np.asarray(g_tilde, dtype=float).ravel()
    return y


def problem_size(cfg: ControllerConfig, nu_l: int) -> dict[str, int]:
    """Structural size of the nonlinear program before any elimination.

    Decision variables count u, y, the output-space combination vector and
    the kernel slack; equalities count the kernel rows plus the prediction
    match; inequalities are both sides of the input and output boxes.
    """
    n, n_u, n_y = cfg.horizon, cfg.n_u, cfg.n_y
    return {
        "decision_variables": (n_u + 2 * n_y) * n + nu_l + 1,
        "equality_constraints": n_y * n + nu_l + 1,
        "inequality_constraints": 2 * (n_u + n_y) * n,
    }


class NpvController:
    """Parameter-varying neural DeePC with receding-horizon warm starts."""

    def __init__(
        self,
        model: HyperDnnModel,
        nh: NeuralHankel,
        cfg: ControllerConfig,
        p_override: np.ndarray | None = None,
    ):
        d = model.dims
        if (cfg.t_ini, cfg.horizon, cfg.n_u, cfg.n_y) != (d.t_ini, d.horizon, d.n_u, d.n_y):
            raise DimensionError("controller config does not match the model dims")
        self.model = model
        self.nh = nh
        self.cfg = cfg
        self.cost = TrackingCost(cfg)
        self.p_override = None if p_override is None else np.asarray(p_override, dtype=float)
        self.nu_l = model.nu_l
        self.nu, self.ny = self.cost.nu, self.cost.ny
        self.n_slack = self.nu_l + 1 if cfg.kernel_slack else 0
        self.n_var = self.nu + 2 * self.ny + self.n_slack
        self.off_y = self.nu
        self.off_g = self.nu + self.ny
        self.off_s = self.off_g + self.ny
        self._warm_u = None
        self._assemble_static()

    def _assemble_static(self) -> None:
        cfg = self.cfg
        n = self.n_var
        h = np.zeros((n, n))
        h[:self.nu, :self.nu] = self.cost.h_u
        h[self.off_y:self.off_g, self.off_y:self.off_g] = self.cost.h_y
        h[self.off_g:self.off_s, self.off_g:self.off_s] = 2.0 * cfg.lambda_g * np.eye(self.ny)
        if self.n_slack:
            h[self.off_s:, self.off_s:] = 2.0 * cfg.lambda_sigma * np.eye(self.n_slack)
        self.h_static = h

        u_lo, u_hi = self.cost.u_bounds()
        y_lo, y_hi = self.cost.y_bounds()
        lb = np.full(n, -np.inf)
        ub = np.full(n, np.inf)
        lb[:self.nu], ub[:self.nu] = u_lo, u_hi
        lb[self.off_y:self.off_g], ub[self.off_y:self.off_g] = y_lo, y_hi
        self.lb, self.ub = lb, ub

    def reset(self) -> None:
        self._warm_u = None

    def problem_size(self) -> dict[str, int]:
        return problem_size(self.cfg, self.nu_l)

    def _p_norm_for_step(self, p_hist) -> np.ndarray:
        src = self.p_override if self.p_override is not None else p_hist
        return self.model.normalize_p(src)

    def _phi_and_jac(self, u_ini_n, y_ini_n, u_seq_raw, p_norm):
        """Feature vector and its raw-u Jacobian at the candidate input."""
        d = self.model.dims
        u_f_n = self.model.scalers.u.normalize(
            np.asarray(u_seq_raw, dtype=float).reshape(d.horizon, d.n_u)
        ).ravel()
        nn_in = NnInput(u_nn=np.concatenate([u_ini_n, y_ini_n, u_f_n]), p_vec=p_norm)
        phi = self.model.phi_hl(nn_in)
        jac = self.model.jacobian_phi_hl_future_u_raw(nn_in)
        return phi, jac

    def _constraint_fn(self, u_ini_n, y_ini_n, p_norm):
        # the slack formulation keeps the raw kernel map (the slack lives on
        # its rows); the hard constraint uses the orthonormalized row basis,
        # which pins the same subspace without ill-scaled multipliers
        kernel = self.nh.kmat if self.n_slack else self.nh.kernel_rows
        theta = self.nh.theta_ls
        nu, ny, off_y, off_g, off_s = self.nu, self.ny, self.off_y, self.off_g, self.off_s
        n_kernel = kernel.shape[0]

        def eq_fn(x):
            u = x[:nu]
            y = x[off_y:off_g]
            g_t = x[off_g:off_s]
            phi, jac_phi = self._phi_and_jac(u_ini_n, y_ini_n, u, p_norm)
            y_map = theta @ np.concatenate([phi, [1.0]])
            c_pred = y - y_map - g_t
            c_kernel = kernel @ g_t
            if self.n_slack:
                c_kernel = c_kernel - x[off_s:]
            c = np.concatenate([c_kernel, c_pred])
            jac = np.zeros((n_kernel + ny, self.n_var))
            jac[:n_kernel, off_g:off_s] = kernel
            if self.n_slack:
                jac[:n_kernel, off_s:] = -np.eye(self.n_slack)
            jac[n_kernel:, :nu] = -(theta[:, :-1] @ jac_phi)
            jac[n_kernel:, off_y:off_g] = np.eye(ny)
            jac[n_kernel:, off_g:off_s] = -np.eye(ny)
            return c, jac

        return eq_fn

    def _lag_hess_fn(self, u_ini_n, y_ini_n, p_norm):
        """Constraint-curvature term for the QP Hessian (single hidden layer).

        The prediction rows are -theta[:, :-1] phi(u) in u; their weighted
        curvature is PSD-clipped on the input block before entering the QP.
        """
        theta_feat = self.nh.theta_ls[:, :-1]
        d = self.model.dims
        nu = self.nu
        n_kernel = (self.nh.kmat if self.n_slack else self.nh.kernel_rows).shape[0]

        def lag_hess(x, lam):
            lam_pred = lam[n_kernel:] if lam.size else np.zeros(self.ny)
            a = theta_feat.T @ lam_pred
            u_f_n = self.model.scalers.u.normalize(
                x[:nu].reshape(d.horizon, d.n_u)
            ).ravel()
            nn_in = NnInput(u_nn=np.concatenate([u_ini_n, y_ini_n, u_f_n]), p_vec=p_norm)
            block = self.model.phi_curvature_future_u_raw(nn_in, -a)
            if block is None:
                return None
            vals, vecs = np.linalg.eigh(0.5 * (block + block.T))
            block_psd = (vecs * np.maximum(vals, 0.0)) @ vecs.T
            out = np.zeros((self.n_var, self.n_var))
            out[:nu, :nu] = block_psd
            return out

        return lag_hess

    def _initial_point(self, u_ini_n, y_ini_n, p_norm, u_prev) -> np.ndarray:
        cfg = self.cfg
        if cfg.warm_start and self._warm_u is not None:
            u0 = np.vstack([self._warm_u[1:], self._warm_u[-1:]])
        else:
            u0 = np.tile(np.clip(u_prev, cfg.u_lo, cfg.u_hi), (cfg.horizon, 1))
        u0_flat = u0.ravel()
        phi, _ = self._phi_and_jac(u_ini_n, y_ini_n, u0_flat, p_norm)
        y0 = self.nh.theta_ls @ np.concatenate([phi, [1.0]])
        x0 = np.zeros(self.n_var)
        x0[:self.nu] = u0_flat
        x0[self.off_y:self.off_g] = y0
        return x0

    def _cost_fn(self, r_vec, u_prev):
        g_lin = np.zeros(self.n_var)
        g_u, g_y = self.cost.linear_terms(r_vec, u_prev)
        g_lin[:self.nu] = g_u
        g_lin[self.off_y:self.off_g] = g_y
        h = self.h_static

        def cost_fn(x):
            return 0.5 * float(x @ (h @ x)) + float(g_lin @ x), h @ x + g_lin, h

        return cost_fn

    def solve_step(self, u_ini, y_ini, p_hist, r_vec, u_prev) -> tuple[np.ndarray, StepResult]:
        cfg = self.cfg
        d = self.model.dims
        u_ini_n = self.model.scalers.u.normalize(
            np.asarray(u_ini, dtype=float).reshape(d.t_ini, d.n_u)
        ).ravel()
        y_ini_n = self.model.scalers.y.normalize(
            np.asarray(y_ini, dtype=float).reshape(d.t_ini, d.n_y)
        ).ravel()
        p_norm = self._p_norm_for_step(p_hist)
        u_prev = np.asarray(u_prev, dtype=float)

        eq_fn = self._constraint_fn(u_ini_n, y_ini_n, p_norm)
        cost_fn = self._cost_fn(r_vec, u_prev)
        x0 = self._initial_point(u_ini_n, y_ini_n, p_norm, u_prev)
        x, diag = solve_sqp(
            cost_fn, eq_fn, self.lb, self.ub, x0,
            tol=cfg.kkt_tol, max_iter=cfg.max_iter, qp_max_iter=cfg.qp_max_iter,
            lag_hess_fn=self._lag_hess_fn(u_ini_n, y_ini_n, p_norm),
        )
        # non-convergence (including a locally infeasible subproblem) returns
        # the best iterate with its status; the inputs are always box-feasible
        u_seq = x[:self.nu].reshape(cfg.horizon, cfg.n_u)
        y_seq = x[self.off_y:self.off_g].reshape(cfg.horizon, cfg.n_y)
        g_t = x[self.off_g:self.off_s]
        cost_val = self.cost.value(u_seq, y_seq, r_vec, u_prev)
        c_final, _ = eq_fn(x)
        result = StepResult(
            u_apply=u_seq[0].copy(),
            u_seq=u_seq,
            y_pred=y_seq,
            cost=cost_val,
            status=diag.status,
            iterations=diag.iterations,
            kkt_residual=diag.kkt_residual,
            wall_time_s=diag.wall_time_s,
            extras={
                "g_tilde_norm": float(np.linalg.norm(g_t)),
                "kernel_residual": float(np.linalg.norm(self.nh.kmat @ g_t, np.inf)),
                "constraint_residual": float(np.linalg.norm(c_final, np.inf)),
            },
        )
        if cfg.warm_start:
            self._warm_u = u_seq.copy()
        return result.u_apply, result


class NeuralController(NpvController):
    """Fixed-basis neural DeePC: hypernet frozen at the training-set mean parameter.

    The frozen history must be applied consistently, online and to the data:
    build the NeuralHankel with ``p_override=frozen_parameter_history(model)``
    and ``refit_model=False``.
    """

    def __init__(self, model: HyperDnnModel, nh: NeuralHankel, cfg: ControllerConfig):
        super().__init__(model, nh, cfg, p_override=frozen_parameter_history(model))


def frozen_parameter_history(model: HyperDnnModel) -> np.ndarray:
    """Raw parameter history pinned at the training-set mean."""
    if model.p_train_mean is None:
        raise ValueError("model carries no training-set mean parameter")
    p = model.p_train_mean
    if model.dims.hyper_input == "current":
        p = np.tile(p, model.dims.t_ini)
    return p


def smoothed_kappa(ts) -> np.ndarray:
    """Smoothed dose-activation base: 0.5 * logistic((Ts - 35) / 0.5).

    Used inside the optimizer only; the plant keeps the exact on/off switch.
    Equals 0.25 at the 35 degC switching point by construction.
    """
    return CEM_KAPPA / (1.0 + np.exp(-(np.asarray(ts, dtype=float) - CEM_SWITCH_TEMP) / 0.5))


def predicted_cem(ts_seq, cem_now: float, dt_minutes: float) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed dose trajectory along a predicted temperature sequence.

    Returns (cem_path, d_increment/d_ts): cem_path[i] is the dose after step
    i and the increment sensitivities feed the Gauss-Newton terminal cost.
    """
    ts = np.asarray(ts_seq, dtype=float)
    kap = smoothed_kappa(ts)
    log_k = np.log(kap)
    expo = CEM_REFERENCE_TEMP - ts
    inc = np.exp(expo * log_k) * dt_minutes
    sig = kap / CEM_KAPPA  # logistic factor; kappa' = kappa * (1 - sig) / width
    dkap_dts = CEM_KAPPA * sig * (1.0 - sig) / 0.5
    dinc = inc * (-log_k + expo * dkap_dts / kap)
    cem_path = cem_now + np.cumsum(inc)
    return cem_path, dinc


class CemController(NpvController):
    """Thermal-dose delivery: terminal cost on the predicted dose miss.

    Minimizes (target - predicted final dose)^2 with a small move penalty,
    subject to the same neural behavior constraint and boxes.  The dose
    recursion is smoothed so the program stays differentiable; the plant-side
    accumulator keeps the exact switch.
    """

    def __init__(
        self,
        model: HyperDnnModel,
        nh: NeuralHankel,
        cfg: ControllerConfig,
        cem_target: float,
        dt: float,
        r_du: float = 1e-3,
    ):
        super().__init__(model, nh, cfg)
        self.cem_target = float(cem_target)
        self.dt_minutes = dt / 60.0
        self.r_du = float(r_du)
        self._ts_index = np.arange(cfg.horizon) * cfg.n_y  # Ts is output channel 0

    def _dose_cost_fn(self, u_prev):
        cfg = self.cfg
        nu, ny, off_y, off_g = self.nu, self.ny, self.off_y, self.off_g
        diff, e_prev = self.cost.diff, self.cost.e_prev
        h_u = 2.0 * self.r_du * diff.T @ diff
        g_u = -2.0 * self.r_du * diff.T @ (e_prev @ np.asarray(u_prev, dtype=float))
        lam_g = cfg.lambda_g
        target = self.cem_target
        cem_now = self._cem_now
        dt_min = self.dt_minutes
        ts_idx = self._ts_index

        def cost_fn(x):
            g_t = x[off_g:self.off_s]
            ts = x[off_y:off_g][ts_idx]
            cem_path, dinc = predicted_cem(ts, cem_now, dt_min)
            rho = target - cem_path[-1]
            grad = np.zeros(self.n_var)
            hess = np.zeros((self.n_var, self.n_var))
            # Gauss-Newton on the scalar dose-miss residual
            jrho = np.zeros(self.n_var)
            jrho[off_y:off_g][ts_idx] = -dinc
            f = rho ** 2
            grad += 2.0 * rho * jrho
            hess += 2.0 * np.outer(jrho, jrho)
            # small input-move penalty keeps the flat directions conditioned
            f += 0.5 * float(x[:nu] @ (h_u @ x[:nu])) + float(g_u @ x[:nu])
            grad[:nu] += h_u @ x[:nu] + g_u
            hess[:nu, :nu] += h_u
            f += lam_g * float(g_t @ g_t)
            grad[off_g:self.off_s] += 2.0 * lam_g * g_t
            hess[off_g:self.off_s, off_g:self.off_s] += 2.0 * lam_g * np.eye(ny)
            if self.n_slack:
                s = x[self.off_s:]
                f += cfg.lambda_sigma * float(s @ s)
                grad[self.off_s:] += 2.0 * cfg.lambda_sigma * s
                hess[self.off_s:, self.off_s:] += 2.0 * cfg.lambda_sigma * np.eye(self.n_slack)
            return f, grad, hess

        return cost_fn

    def solve_step(self, u_ini, y_ini, p_hist, cem_now: float, u_prev) -> tuple[np.ndarray, StepResult]:
        cfg = self.cfg
        d = self.model.dims
        u_ini_n = self.model.scalers.u.normalize(
            np.asarray(u_ini, dtype=float).reshape(d.t_ini, d.n_u)
        ).ravel()
        y_ini_n = self.model.scalers.y.normalize(
            np.asarray(y_ini, dtype=float).reshape(d.t_ini, d.n_y)
        ).ravel()
        p_norm = self._p_norm_for_step(p_hist)
        u_prev = np.asarray(u_prev, dtype=float)
        self._cem_now = float(cem_now)

        eq_fn = self._constraint_fn(u_ini_n, y_ini_n, p_norm)
        cost_fn = self._dose_cost_fn(u_prev)
        x0 = self._initial_point(u_ini_n, y_ini_n, p_norm, u_prev)
        x, diag = solve_sqp(
            cost_fn, eq_fn, self.lb, self.ub, x0,
            tol=cfg.kkt_tol, max_iter=cfg.max_iter, qp_max_iter=cfg.qp_max_iter,
            lag_hess_fn=self._lag_hess_fn(u_ini_n, y_ini_n, p_norm),
        )
        u_seq = x[:self.nu].reshape(cfg.horizon, cfg.n_u)
        y_seq = x[self.off_y:self.off_g].reshape(cfg.horizon, cfg.n_y)
        cem_path, _ = predicted_cem(y_seq[:, 0], cem_now, self.dt_minutes)
        result = StepResult(
            u_apply=u_seq[0].copy(),
            u_seq=u_seq,
            y_pred=y_seq,
            cost=float((self.cem_target - cem_path[-1]) ** 2),
            status=diag.status,
            iterations=diag.iterations,
            kkt_residual=diag.kkt_residual,
            wall_time_s=diag.wall_time_s,
            extras={
                "cem_pred_final": float(cem_path[-1]),
                "cem_pred_delta": float(cem_path[-1] - cem_now),
                "cem_path": cem_path.tolist(),
            },
        )
        if cfg.warm_start:
            self._warm_u = u_seq.copy()
        return result.u_apply, result
