"""Receding-horizon SQP refinement of policy actions through a dynamics model.

The trajectory optimization is multiple shooting: the predicted states
over the horizon are decision variables tied to the actions by linearized
dynamics equality constraints, with box bounds on both. Each SQP iteration
linearizes the model, solves a box QP for the step, and globalizes with an
l1 merit line search. The objective is the smoothed summed agent speed
plus an optional quadratic anchor pulling the first action toward the
policy's proposal.

Decision vector layout (documented once, used everywhere): the first
T * state_dim entries are the state steps for predicted states 1..T, the
remaining T * action_dim entries are the action steps for stages 0..T-1.
Bound multipliers on the state block are (mu, nu); on the action block
they are reported as (xi, zeta).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import env as env_mod
from . import qp as qp_mod
from .env import EnvConfig
from .neural_core import ShapeMismatch, mlp_input_jacobian
from .numerics import finite_diff_jacobian
from .predictor import DynamicsModel, _normalize_inputs
from .qp import QPProblem, solve_box_qp

HINGE_WEIGHT = 1e3
QP_DAMPING = 1e-6


class LineSearchFailed(Exception):
    """Backtracking exhausted without satisfying the acceptance condition."""


class QPFailed(Exception):
    """The QP subproblem could not be solved; diagnostics attached."""

    def __init__(self, message: str, diagnostics: "SQPDiagnostics"):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class MPCOptions:
    horizon: int = 5
    max_sqp_iter: int = 20
    kkt_tol: float = 1e-6
    merit_penalty_init: float = 10.0
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    anchor_weight: float = 0.1
    smooth_eps: float = 1e-8
    hessian_mode: str = "gauss_newton"  # identity | gauss_newton | bfgs
    cost_scale: float = 1.0
    max_backtracks: int = 30
    qp_max_iter: int = 200
    # learned models carry curvature the convex step model cannot represent;
    # the floor keeps action steps bounded, the stall exit stops zig-zagging
    action_curvature_floor: float = 1e-2
    merit_stall_tol: float = 1e-7
    merit_stall_window: int = 4

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.kkt_tol <= 0:
            raise ValueError("kkt_tol must be positive")
        if not 0.0 < self.backtrack_factor < 1.0:
            raise ValueError("backtrack_factor must be in (0, 1)")
        if self.hessian_mode not in ("identity", "gauss_newton", "bfgs"):
            raise ValueError(f"unknown hessian_mode {self.hessian_mode!r}")


@dataclass(frozen=True)
class Bounds:
    state_low: np.ndarray
    state_high: np.ndarray
    action_low: np.ndarray
    action_high: np.ndarray

    @classmethod
    def from_env(cls, config: EnvConfig) -> "Bounds":
        slo, shi = config.state_bounds()
        alo, ahi = config.action_bounds()
        return cls(slo, shi, alo, ahi)


@dataclass
class SQPIterate:
    """Nominal trajectory, multipliers, and merit bookkeeping."""

    states: np.ndarray  # (T, state_dim), predicted states 1..T
    actions: np.ndarray  # (T, action_dim), stages 0..T-1
    lam: np.ndarray  # (T, state_dim), one per dynamics row
    mu_s: np.ndarray
    nu_s: np.ndarray
    xi_a: np.ndarray
    zeta_a: np.ndarray
    merit_penalty: float
    hessian_approx: Optional[np.ndarray] = None


@dataclass
class SQPIterationRecord:
    kkt_residual: float
    merit_value: float
    step_length: float
    qp_status: str


@dataclass
class SQPDiagnostics:
    iterations: list[SQPIterationRecord] = field(default_factory=list)
    status: str = "max_iter"  # converged | max_iter | qp_failed
    final_kkt: float = np.inf
    fallback: bool = False

    @property
    def sqp_iters(self) -> int:
        return len(self.iterations)

    @property
    def final_merit(self) -> float:
        return self.iterations[-1].merit_value if self.iterations else np.nan


class TrueDynamics:
    """Analytic environment transition exposed as a model (test hook)."""

    def __init__(self, config: EnvConfig):
        self.config = config
        self.state_dim = config.state_dim
        self.action_dim = config.action_dim

    def predict(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        return env_mod._integrate(
            np.asarray(state, dtype=np.float64), np.asarray(action, dtype=np.float64), self.config
        )

    def jacobians(self, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        js = finite_diff_jacobian(lambda s: self.predict(s, action), state)
        ja = finite_diff_jacobian(lambda a: self.predict(state, a), action)
        return js, ja


def _model_predict(model, state: np.ndarray, action: np.ndarray) -> np.ndarray:
    if isinstance(model, DynamicsModel):
        from .predictor import predict

        return predict(model, state, action)
    return model.predict(state, action)


def _model_predict_stages(model, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Predict each (state, action) row; batched for the learned model."""
    if isinstance(model, DynamicsModel):
        from .predictor import predict_batch

        return predict_batch(model, states, actions)
    return np.stack(
        [model.predict(states[k], actions[k]) for k in range(states.shape[0])]
    )


def _model_jacobians(model, state: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(model, DynamicsModel):
        ds = model.state_dim
        z = _normalize_inputs(model, state, action)
        j_net = mlp_input_jacobian(model.net, z)
        js = np.eye(ds) + (model.delta_std[:, None] * j_net[:, :ds]) / model.state_std[None, :]
        ja = (model.delta_std[:, None] * j_net[:, ds:]) / model.action_std[None, :]
        return js, ja
    return model.jacobians(state, action)


def _rollout(model, state: np.ndarray, actions: np.ndarray) -> np.ndarray:
    out = np.zeros((actions.shape[0], state.shape[0]))
    current = state
    for k in range(actions.shape[0]):
        current = _model_predict(model, current, actions[k])
        out[k] = current
    return out


def stage_cost(state, action, anchor, rho: float, smooth_eps: float) -> float:
    """Smoothed summed agent speed plus a quadratic pull toward the anchor."""
    vel = np.asarray(state, dtype=np.float64).reshape(-1, 4)[:, 2:]
    speeds = np.sqrt(np.sum(vel * vel, axis=1) + smooth_eps)
    diff = np.asarray(action, dtype=np.float64) - np.asarray(anchor, dtype=np.float64)
    return float(np.sum(speeds) + rho * np.sum(diff * diff))


@dataclass
class TrajectoryCost:
    """Summed stage costs over the horizon; stage k pairs state k+1 with action k."""

    anchors: np.ndarray  # (T, action_dim)
    rho: np.ndarray  # (T,)
    smooth_eps: float
    scale: float = 1.0

    def total(self, states: np.ndarray, actions: np.ndarray) -> float:
        t_len = actions.shape[0]
        vel = states.reshape(t_len, -1, 4)[:, :, 2:]
        speeds = np.sqrt(np.sum(vel * vel, axis=2) + self.smooth_eps)
        diff = actions - self.anchors
        return self.scale * float(np.sum(speeds) + np.sum(self.rho * np.sum(diff * diff, axis=1)))

    def gradients(self, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t_len, ds = states.shape
        per = states.reshape(t_len, -1, 4)
        vel = per[:, :, 2:]
        g = np.sqrt(np.sum(vel * vel, axis=2) + self.smooth_eps)
        grad = np.zeros_like(per)
        grad[:, :, 2:] = vel / g[:, :, None]
        gs = self.scale * grad.reshape(t_len, ds)
        ga = self.scale * 2.0 * self.rho[:, None] * (actions - self.anchors)
        return gs, ga

    def state_hessian(self, state: np.ndarray) -> np.ndarray:
        """Exact curvature of the smoothed speed terms; positive definite."""
        per = state.reshape(-1, 4)
        ds = state.shape[0]
        h = np.zeros((ds, ds))
        for i in range(per.shape[0]):
            v = per[i, 2:]
            g = np.sqrt(v @ v + self.smooth_eps)
            block = (g * g * np.eye(2) - np.outer(v, v)) / g**3
            j = 4 * i + 2
            h[j : j + 2, j : j + 2] = self.scale * block
        return h


def linearize(model, states: np.ndarray, actions: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-stage dynamics Jacobians along a nominal trajectory.

    ``states`` holds the stage input states (current state first), one row
    per action. For the learned model the Jacobians come from backprop
    through the network, including the residual identity term and the
    normalization chain rules.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if states.shape[0] != actions.shape[0]:
        raise ShapeMismatch(f"{states.shape[0]} states vs {actions.shape[0]} actions")
    return [_model_jacobians(model, states[k], actions[k]) for k in range(states.shape[0])]


def _split(z: np.ndarray, t_len: int, ds: int, da: int) -> tuple[np.ndarray, np.ndarray]:
    return z[: t_len * ds].reshape(t_len, ds), z[t_len * ds :].reshape(t_len, da)


def _feasible_start(
    problem: QPProblem,
    jacobians: list[tuple[np.ndarray, np.ndarray]],
    defects: np.ndarray,
) -> Optional[np.ndarray]:
    """Equality-feasible step with zero action deltas, via forward substitution.

    The shooting structure makes the equality rows triangular in the state
    steps, so chaining the defects through the state Jacobians always
    satisfies them; usable as a starting point whenever it also fits the
    state box.
    """
    t_len, ds = defects.shape
    dstates = np.zeros((t_len, ds))
    dstates[0] = defects[0]
    for k in range(1, t_len):
        dstates[k] = defects[k] + jacobians[k][0] @ dstates[k - 1]
    z0 = np.concatenate([dstates.reshape(-1), np.zeros(problem.gradient.shape[0] - t_len * ds)])
    if np.any(z0 < problem.lower - 1e-12) or np.any(z0 > problem.upper + 1e-12):
        return None
    return z0


def build_qp(
    iterate: SQPIterate,
    jacobians: list[tuple[np.ndarray, np.ndarray]],
    cost_gradients: tuple[np.ndarray, np.ndarray],
    opts: MPCOptions,
    traj_cost: TrajectoryCost,
    bounds: Bounds,
    defects: np.ndarray,
    relax_state_bounds: bool = False,
) -> QPProblem:
    """Assemble the quadratic step subproblem around the current iterate.

    Equality rows enforce the linearized dynamics defect per stage; bounds
    are the remaining slack to the state and action boxes. The Hessian
    follows ``opts.hessian_mode`` plus a small diagonal damping.
    """
    t_len, ds = iterate.states.shape
    da = iterate.actions.shape[1]
    nz = t_len * (ds + da)
    a_off = t_len * ds

    gs, ga = cost_gradients
    g = np.concatenate([gs.reshape(-1), ga.reshape(-1)])

    if opts.hessian_mode == "gauss_newton" or iterate.hessian_approx is None:
        h = np.zeros((nz, nz))
        if opts.hessian_mode == "identity":
            h = np.eye(nz)
        else:
            for j in range(t_len):
                sl = slice(j * ds, (j + 1) * ds)
                h[sl, sl] = traj_cost.state_hessian(iterate.states[j])
            for k in range(t_len):
                sl = slice(a_off + k * da, a_off + (k + 1) * da)
                h[sl, sl] = traj_cost.scale * (
                    2.0 * traj_cost.rho[k] + opts.action_curvature_floor
                ) * np.eye(da)
    else:
        h = iterate.hessian_approx.copy()
    h += QP_DAMPING * np.eye(nz)

    a_mat = np.zeros((t_len * ds, nz))
    for k in range(t_len):
        js, ja = jacobians[k]
        rows = slice(k * ds, (k + 1) * ds)
        a_mat[rows, k * ds : (k + 1) * ds] = -np.eye(ds)
        if k >= 1:
            a_mat[rows, (k - 1) * ds : k * ds] = js
        a_mat[rows, a_off + k * da : a_off + (k + 1) * da] = ja
    b = -defects.reshape(-1)

    lower = np.empty(nz)
    upper = np.empty(nz)
    if relax_state_bounds:
        lower[: t_len * ds] = -np.inf
        upper[: t_len * ds] = np.inf
    else:
        lower[: t_len * ds] = (bounds.state_low[None, :] - iterate.states).reshape(-1)
        upper[: t_len * ds] = (bounds.state_high[None, :] - iterate.states).reshape(-1)
    lower[a_off:] = (bounds.action_low[None, :] - iterate.actions).reshape(-1)
    upper[a_off:] = (bounds.action_high[None, :] - iterate.actions).reshape(-1)

    return QPProblem(h, g, a_mat, b, lower, upper)


def kkt_residual(
    iterate: SQPIterate,
    cost_gradients: tuple[np.ndarray, np.ndarray],
    jacobians: list[tuple[np.ndarray, np.ndarray]],
    defects: np.ndarray,
    bounds: Bounds,
) -> float:
    """Max norm over stationarity, feasibility, dual sign, and slackness terms."""
    t_len, ds = iterate.states.shape
    gs, ga = cost_gradients
    parts = []
    for j in range(t_len):
        stat = gs[j] - iterate.lam[j] - iterate.mu_s[j] + iterate.nu_s[j]
        if j + 1 < t_len:
            stat = stat + jacobians[j + 1][0].T @ iterate.lam[j + 1]
        parts.append(stat)
    for k in range(t_len):
        parts.append(ga[k] + jacobians[k][1].T @ iterate.lam[k] - iterate.xi_a[k] + iterate.zeta_a[k])
    parts.append(defects.reshape(-1))

    s_lo = np.maximum(0.0, bounds.state_low[None, :] - iterate.states)
    s_hi = np.maximum(0.0, iterate.states - bounds.state_high[None, :])
    a_lo = np.maximum(0.0, bounds.action_low[None, :] - iterate.actions)
    a_hi = np.maximum(0.0, iterate.actions - bounds.action_high[None, :])
    parts.extend([s_lo.reshape(-1), s_hi.reshape(-1), a_lo.reshape(-1), a_hi.reshape(-1)])

    for mult in (iterate.mu_s, iterate.nu_s, iterate.xi_a, iterate.zeta_a):
        parts.append(np.maximum(0.0, -mult).reshape(-1))

    parts.append((iterate.mu_s * (iterate.states - bounds.state_low[None, :])).reshape(-1))
    parts.append((iterate.nu_s * (bounds.state_high[None, :] - iterate.states)).reshape(-1))
    parts.append((iterate.xi_a * (iterate.actions - bounds.action_low[None, :])).reshape(-1))
    parts.append((iterate.zeta_a * (bounds.action_high[None, :] - iterate.actions)).reshape(-1))

    return float(np.max(np.abs(np.concatenate(parts))))


def _hinge_value(states: np.ndarray, bounds: Bounds) -> float:
    lo = np.maximum(0.0, bounds.state_low[None, :] - states)
    hi = np.maximum(0.0, states - bounds.state_high[None, :])
    return float(np.sum(lo) + np.sum(hi))


def _hinge_subgrad(states: np.ndarray, bounds: Bounds) -> np.ndarray:
    g = np.zeros_like(states)
    g -= (states < bounds.state_low[None, :]).astype(float)
    g += (states > bounds.state_high[None, :]).astype(float)
    return g


def merit_line_search(
    iterate: SQPIterate,
    direction: tuple[np.ndarray, np.ndarray],
    penalty: float,
    opts: MPCOptions,
    evaluate,
    gradient: np.ndarray,
    start_alpha: float = 1.0,
) -> tuple[float, float]:
    """Backtracking line search on the l1 merit function.

    ``evaluate(states, actions)`` returns (objective, defects); the merit is
    objective + penalty * sum |defects|. The predicted decrease combines the
    objective gradient with the full linearized constraint reduction.

    Returns (step_length, merit at the accepted point).
    """
    dstates, dactions = direction
    cost0, defects0 = evaluate(iterate.states, iterate.actions)
    merit0 = cost0 + penalty * float(np.sum(np.abs(defects0)))
    dz = np.concatenate([dstates.reshape(-1), dactions.reshape(-1)])
    predicted = float(gradient @ dz) - penalty * float(np.sum(np.abs(defects0)))

    alpha = start_alpha
    for _ in range(opts.max_backtracks + 1):
        cost_a, defects_a = evaluate(
            iterate.states + alpha * dstates, iterate.actions + alpha * dactions
        )
        merit_a = cost_a + penalty * float(np.sum(np.abs(defects_a)))
        if merit_a <= merit0 + opts.armijo_c * alpha * predicted:
            return alpha, merit_a
        alpha *= opts.backtrack_factor
    raise LineSearchFailed(
        f"no acceptable step in {opts.max_backtracks} backtracks (merit {merit0:.6g})"
    )


def _try_corrected_full_step(
    iterate: SQPIterate,
    direction: tuple[np.ndarray, np.ndarray],
    opts: MPCOptions,
    evaluate,
    gradient: np.ndarray,
    jacobians: list[tuple[np.ndarray, np.ndarray]],
    bounds: Bounds,
    relaxed: bool,
) -> Optional[tuple[np.ndarray, np.ndarray, float]]:
    """Full step, or full step plus a second-order defect correction.

    The l1 merit can reject good full steps whose only flaw is the
    second-order growth of the dynamics defects; re-centering the defects
    through the shooting chain restores them to third order and avoids the
    creeping short steps that would otherwise dominate near a solution.
    Returns (states, actions, merit) when a full-length step is acceptable.
    """
    dstates, dactions = direction
    penalty = iterate.merit_penalty
    cost0, defects0 = evaluate(iterate.states, iterate.actions)
    merit0 = cost0 + penalty * float(np.sum(np.abs(defects0)))
    dz = np.concatenate([dstates.reshape(-1), dactions.reshape(-1)])
    predicted = float(gradient @ dz) - penalty * float(np.sum(np.abs(defects0)))
    target = merit0 + opts.armijo_c * predicted

    trial_states = iterate.states + dstates
    trial_actions = iterate.actions + dactions
    cost1, defects1 = evaluate(trial_states, trial_actions)
    merit1 = cost1 + penalty * float(np.sum(np.abs(defects1)))
    if merit1 <= target:
        return trial_states, trial_actions, merit1

    t_len = defects1.shape[0]
    correction = np.zeros_like(dstates)
    correction[0] = defects1[0]
    for k in range(1, t_len):
        correction[k] = defects1[k] + jacobians[k][0] @ correction[k - 1]
    corrected = trial_states + correction
    if not relaxed:
        if np.any(corrected < bounds.state_low[None, :] - 1e-12) or np.any(
            corrected > bounds.state_high[None, :] + 1e-12
        ):
            return None
    cost2, defects2 = evaluate(corrected, trial_actions)
    merit2 = cost2 + penalty * float(np.sum(np.abs(defects2)))
    if merit2 <= target:
        return corrected, trial_actions, merit2
    return None


def sqp_solve(
    initial_actions: np.ndarray,
    state: np.ndarray,
    model,
    env_bounds: Bounds,
    opts: MPCOptions,
    anchor: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, SQPDiagnostics]:
    """Refine an action sequence to minimize the predicted safety cost.

    Warm starts from the model rollout of ``initial_actions``, then iterates
    linearize / QP step / merit line search until the KKT residual is at or
    below ``opts.kkt_tol``. Returns the refined actions and per-iteration
    diagnostics; on iteration exhaustion the best iterate so far is
    returned rather than raising.
    """
    state = np.asarray(state, dtype=np.float64)
    actions = np.asarray(initial_actions, dtype=np.float64).copy()
    t_len = opts.horizon
    if actions.shape[0] != t_len:
        raise ShapeMismatch(f"expected {t_len} actions, got {actions.shape[0]}")
    ds = state.shape[0]
    da = actions.shape[1]

    if anchor is None:
        anchors = np.zeros((t_len, da))
        rho = np.zeros(t_len)
    else:
        anchors = np.tile(np.asarray(anchor, dtype=np.float64), (t_len, 1))
        rho = np.zeros(t_len)
        rho[0] = opts.anchor_weight
    traj_cost = TrajectoryCost(anchors, rho, opts.smooth_eps, opts.cost_scale)

    states = _rollout(model, state, actions)
    iterate = SQPIterate(
        states=states,
        actions=actions,
        lam=np.zeros((t_len, ds)),
        mu_s=np.zeros((t_len, ds)),
        nu_s=np.zeros((t_len, ds)),
        xi_a=np.zeros((t_len, da)),
        zeta_a=np.zeros((t_len, da)),
        merit_penalty=opts.merit_penalty_init,
        hessian_approx=np.eye(t_len * (ds + da)) if opts.hessian_mode == "bfgs" else None,
    )
    diag = SQPDiagnostics()
    relaxed = False
    warm: Optional[tuple[np.ndarray, np.ndarray]] = None

    def stage_inputs(st: np.ndarray) -> np.ndarray:
        return np.vstack([state[None, :], st[:-1]])

    def compute_defects(st: np.ndarray, ac: np.ndarray) -> np.ndarray:
        return _model_predict_stages(model, stage_inputs(st), ac) - st

    def evaluate(st: np.ndarray, ac: np.ndarray) -> tuple[float, np.ndarray]:
        obj = traj_cost.total(st, ac)
        if relaxed:
            obj += HINGE_WEIGHT * _hinge_value(st, env_bounds)
        return obj, compute_defects(st, ac)

    def full_gradient(gs: np.ndarray, ga: np.ndarray, st: np.ndarray) -> np.ndarray:
        gs_eff = gs + HINGE_WEIGHT * _hinge_subgrad(st, env_bounds) if relaxed else gs
        return np.concatenate([gs_eff.reshape(-1), ga.reshape(-1)])

    for _ in range(opts.max_sqp_iter):
        defects = compute_defects(iterate.states, iterate.actions)
        jacobians = linearize(model, stage_inputs(iterate.states), iterate.actions)
        gs, ga = traj_cost.gradients(iterate.states, iterate.actions)
        res = kkt_residual(iterate, (gs, ga), jacobians, defects, env_bounds)
        if res <= opts.kkt_tol:
            diag.status = "converged"
            diag.final_kkt = res
            return iterate.actions, diag

        grad_vec = full_gradient(gs, ga, iterate.states)
        problem = build_qp(
            iterate, jacobians, (gs, ga), opts, traj_cost, env_bounds, defects, relaxed
        )
        if relaxed:
            problem.gradient = grad_vec
        try:
            try:
                sol = solve_box_qp(
                    problem, max_iter=opts.qp_max_iter, warm_start=warm,
                    x0=_feasible_start(problem, jacobians, defects),
                )
            except qp_mod.Infeasible:
                if relaxed:
                    raise
                relaxed = True
                grad_vec = full_gradient(gs, ga, iterate.states)
                problem = build_qp(
                    iterate, jacobians, (gs, ga), opts, traj_cost, env_bounds, defects, True
                )
                problem.gradient = grad_vec
                sol = solve_box_qp(
                    problem, max_iter=opts.qp_max_iter,
                    x0=_feasible_start(problem, jacobians, defects),
                )
        except (qp_mod.Infeasible, qp_mod.MaxIterations, qp_mod.SingularKKT,
                qp_mod.RankDeficientConstraints) as exc:
            diag.status = "qp_failed"
            raise QPFailed(f"QP subproblem failed: {exc}", diag) from exc
        warm = (sol.lower_multipliers > 0.0, sol.upper_multipliers > 0.0)

        dstates, dactions = _split(sol.x, t_len, ds, da)
        iterate.lam = sol.eq_multipliers.reshape(t_len, ds)
        iterate.mu_s, iterate.xi_a = _split(sol.lower_multipliers, t_len, ds, da)
        iterate.nu_s, iterate.zeta_a = _split(sol.upper_multipliers, t_len, ds, da)

        lam_inf = float(np.max(np.abs(sol.eq_multipliers))) if sol.eq_multipliers.size else 0.0
        if iterate.merit_penalty < lam_inf:
            iterate.merit_penalty = 2.0 * lam_inf + 1.0

        if max(np.max(np.abs(dstates)), np.max(np.abs(dactions))) < 1e-14:
            res = kkt_residual(iterate, (gs, ga), jacobians, defects, env_bounds)
            diag.status = "converged" if res <= opts.kkt_tol else "max_iter"
            diag.final_kkt = res
            return iterate.actions, diag

        old_hess_grad = None
        if opts.hessian_mode == "bfgs":
            old_hess_grad = _lagrangian_gradient(
                grad_vec, jacobians, iterate.lam, t_len, ds, da
            )

        accepted = _try_corrected_full_step(
            iterate, (dstates, dactions), opts, evaluate, grad_vec, jacobians, env_bounds,
            relaxed,
        )
        if accepted is not None:
            new_states, new_actions, merit_val = accepted
            alpha = 1.0
        else:
            try:
                alpha, merit_val = merit_line_search(
                    iterate, (dstates, dactions), iterate.merit_penalty, opts, evaluate,
                    grad_vec, start_alpha=opts.backtrack_factor,
                )
            except LineSearchFailed:
                diag.final_kkt = res
                return iterate.actions, diag
            new_states = iterate.states + alpha * dstates
            new_actions = iterate.actions + alpha * dactions

        iterate.states = new_states
        iterate.actions = np.clip(
            new_actions, env_bounds.action_low[None, :], env_bounds.action_high[None, :]
        )
        diag.iterations.append(SQPIterationRecord(res, merit_val, alpha, sol.status))

        window = opts.merit_stall_window
        if len(diag.iterations) >= window:
            gain = diag.iterations[-window].merit_value - merit_val
            if gain < opts.merit_stall_tol * (1.0 + abs(merit_val)):
                break
        # plateaued residual: the iterate is crawling (smoothed-cost cone or
        # model curvature); the actions are as good as they will get
        if len(diag.iterations) >= 2 * window:
            recent = min(r.kkt_residual for r in diag.iterations[-window:])
            earlier = min(r.kkt_residual for r in diag.iterations[: -window])
            if recent > 0.9 * earlier:
                break

        if opts.hessian_mode == "bfgs":
            new_defects = compute_defects(iterate.states, iterate.actions)
            new_jac = linearize(model, stage_inputs(iterate.states), iterate.actions)
            new_gs, new_ga = traj_cost.gradients(iterate.states, iterate.actions)
            new_grad = full_gradient(new_gs, new_ga, iterate.states)
            new_hess_grad = _lagrangian_gradient(new_grad, new_jac, iterate.lam, t_len, ds, da)
            step = alpha * np.concatenate([dstates.reshape(-1), dactions.reshape(-1)])
            iterate.hessian_approx = _damped_bfgs_update(
                iterate.hessian_approx, step, new_hess_grad - old_hess_grad
            )

    defects = compute_defects(iterate.states, iterate.actions)
    jacobians = linearize(model, stage_inputs(iterate.states), iterate.actions)
    gs, ga = traj_cost.gradients(iterate.states, iterate.actions)
    diag.final_kkt = kkt_residual(iterate, (gs, ga), jacobians, defects, env_bounds)
    diag.status = "converged" if diag.final_kkt <= opts.kkt_tol else "max_iter"
    return iterate.actions, diag


def _lagrangian_gradient(
    cost_grad: np.ndarray,
    jacobians: list[tuple[np.ndarray, np.ndarray]],
    lam: np.ndarray,
    t_len: int,
    ds: int,
    da: int,
) -> np.ndarray:
    grad = cost_grad.copy()
    for j in range(t_len):
        sl = slice(j * ds, (j + 1) * ds)
        grad[sl] -= lam[j]
        if j + 1 < t_len:
            grad[sl] += jacobians[j + 1][0].T @ lam[j + 1]
    a_off = t_len * ds
    for k in range(t_len):
        sl = slice(a_off + k * da, a_off + (k + 1) * da)
        grad[sl] += jacobians[k][1].T @ lam[k]
    return grad


def _damped_bfgs_update(h: np.ndarray, s: np.ndarray, y: np.ndarray) -> np.ndarray:
    shs = float(s @ h @ s)
    if shs <= 1e-14 or float(np.linalg.norm(s)) < 1e-14:
        return h
    sy = float(s @ y)
    if sy < 0.2 * shs:
        theta = 0.8 * shs / (shs - sy)
        y = theta * y + (1.0 - theta) * (h @ s)
        sy = float(s @ y)
    hs = h @ s
    return h - np.outer(hs, hs) / shs + np.outer(y, y) / sy


def safety_filter(
    policy_action: np.ndarray,
    state: np.ndarray,
    model,
    env_bounds: Bounds,
    opts: MPCOptions,
) -> tuple[np.ndarray, SQPDiagnostics]:
    """Refine a policy action; returns the first action of the solved horizon.

    The initial guess repeats the policy action over the horizon and the
    stage-0 anchor pulls toward it with weight ``opts.anchor_weight``. When
    the QP fails the policy action is returned clamped to bounds and the
    diagnostics record the fallback.
    """
    policy_action = np.clip(
        np.asarray(policy_action, dtype=np.float64), env_bounds.action_low, env_bounds.action_high
    )
    initial = np.tile(policy_action, (opts.horizon, 1))
    try:
        refined, diag = sqp_solve(initial, state, model, env_bounds, opts, anchor=policy_action)
    except QPFailed as exc:
        diag = exc.diagnostics
        diag.fallback = True
        return policy_action, diag
    return (
        np.clip(refined[0], env_bounds.action_low, env_bounds.action_high),
        diag,
    )
