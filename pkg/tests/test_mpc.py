import numpy as np
import pytest

from helpers import grid_search_action, random_transition_dataset, trained_toy_model, zero_residual_model

from deepsafempc.env import EnvConfig, reset
from deepsafempc.mpc import (
    Bounds,
    MPCOptions,
    SQPIterate,
    TrajectoryCost,
    TrueDynamics,
    build_qp,
    kkt_residual,
    linearize,
    merit_line_search,
    safety_filter,
    sqp_solve,
    stage_cost,
)
from deepsafempc.numerics import finite_diff_jacobian
from deepsafempc.qp import solve_box_qp


def single_agent_config(**kwargs):
    defaults = dict(n_agents=1, coupling_stiffness=0.0, dt=0.05, drag_coeff=0.08)
    defaults.update(kwargs)
    return EnvConfig(**defaults)


def make_iterate(states, actions, penalty=10.0):
    t_len, ds = states.shape
    da = actions.shape[1]
    return SQPIterate(
        states=states.copy(),
        actions=actions.copy(),
        lam=np.zeros((t_len, ds)),
        mu_s=np.zeros((t_len, ds)),
        nu_s=np.zeros((t_len, ds)),
        xi_a=np.zeros((t_len, da)),
        zeta_a=np.zeros((t_len, da)),
        merit_penalty=penalty,
    )


def test_stage_cost_near_zero_floor():
    state = np.zeros(4)
    value = stage_cost(state, np.zeros(2), np.zeros(2), rho=0.1, smooth_eps=1e-8)
    assert value == pytest.approx(1e-4, rel=1e-6)  # sqrt(1e-8)


def test_stage_cost_rho_zero_is_smoothed_speed():
    state = np.array([1.0, 2.0, 0.6, -0.8])
    value = stage_cost(state, np.ones(2), np.zeros(2), rho=0.0, smooth_eps=1e-8)
    assert value == pytest.approx(np.sqrt(1.0 + 1e-8), abs=1e-12)


def test_stage_cost_345():
    state = np.array([0.0, 0.0, 3.0, 4.0])
    value = stage_cost(state, np.zeros(2), np.zeros(2), rho=0.0, smooth_eps=1e-8)
    assert value == pytest.approx(5.0, abs=1e-8)


def test_stage_cost_anchor_term():
    state = np.zeros(4)
    value = stage_cost(state, np.array([0.5, 0.0]), np.array([0.1, 0.0]), 2.0, 0.0)
    assert value == pytest.approx(2.0 * 0.16, abs=1e-12)


def test_linearize_zero_residual_model():
    dataset, _ = random_transition_dataset(n=200, seed=0)
    model = zero_residual_model(dataset)
    states = dataset.states[:3]
    actions = dataset.actions[:3]
    jac = linearize(model, states, actions)
    assert len(jac) == 3
    for js, ja in jac:
        np.testing.assert_allclose(js, np.eye(4), atol=1e-12)
        np.testing.assert_allclose(ja, 0.0, atol=1e-12)


def test_linearize_matches_finite_differences():
    model, config, _ = trained_toy_model(n=1500, seed=3, epochs=15)
    from deepsafempc.predictor import predict

    rng = np.random.default_rng(1)
    for _ in range(4):
        state = rng.normal(scale=1.5, size=4)
        action = rng.uniform(-1, 1, size=2)
        (js, ja), = linearize(model, state[None, :], action[None, :])
        fd_s = finite_diff_jacobian(lambda s: predict(model, s, action), state)
        fd_a = finite_diff_jacobian(lambda a: predict(model, state, a), action)
        np.testing.assert_allclose(js, fd_s, rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(ja, fd_a, rtol=1e-5, atol=1e-7)


def test_linearize_shapes():
    config = single_agent_config()
    model = TrueDynamics(config)
    states = np.zeros((5, 4))
    actions = np.zeros((5, 2))
    jac = linearize(model, states, actions)
    assert all(js.shape == (4, 4) and ja.shape == (4, 2) for js, ja in jac)


def test_true_dynamics_jacobians_match_fd():
    config = single_agent_config()
    model = TrueDynamics(config)
    state = np.array([0.3, -0.1, 1.2, 0.4])
    action = np.array([0.2, -0.5])
    js, ja = model.jacobians(state, action)
    fd_s = finite_diff_jacobian(lambda s: model.predict(s, action), state)
    np.testing.assert_allclose(js, fd_s, atol=1e-9)
    assert ja.shape == (4, 2)


def build_problem_pieces(model, config, state, actions, opts, anchor=None):
    from deepsafempc.mpc import _model_predict, _rollout

    t_len = actions.shape[0]
    da = actions.shape[1]
    if anchor is None:
        anchors = np.zeros((t_len, da))
        rho = np.zeros(t_len)
    else:
        anchors = np.tile(anchor, (t_len, 1))
        rho = np.zeros(t_len)
        rho[0] = opts.anchor_weight
    traj_cost = TrajectoryCost(anchors, rho, opts.smooth_eps, opts.cost_scale)
    states = _rollout(model, state, actions)
    iterate = make_iterate(states, actions)
    inputs = np.vstack([state[None, :], states[:-1]])
    preds = np.stack([_model_predict(model, inputs[k], actions[k]) for k in range(t_len)])
    defects = preds - states
    jac = linearize(model, inputs, actions)
    grads = traj_cost.gradients(states, actions)
    return iterate, traj_cost, jac, grads, defects


def test_build_qp_stationary_point():
    dataset, config = random_transition_dataset(n=200, seed=1)
    model = zero_residual_model(dataset)
    opts = MPCOptions(horizon=1, anchor_weight=0.5)
    bounds = Bounds.from_env(config)
    state = np.array([0.5, 0.0, 0.0, 0.0])  # at rest
    actions = np.zeros((1, 2))
    iterate, traj_cost, jac, grads, defects = build_problem_pieces(
        model, config, state, actions, opts, anchor=np.zeros(2)
    )
    problem = build_qp(iterate, jac, grads, opts, traj_cost, bounds, defects)
    sol = solve_box_qp(problem)
    assert sol.status == "solved"
    np.testing.assert_allclose(sol.x, 0.0, atol=1e-9)


def test_build_qp_bound_rows_exact():
    config = single_agent_config()
    model = TrueDynamics(config)
    opts = MPCOptions(horizon=2)
    bounds = Bounds.from_env(config)
    state = np.array([0.2, 0.1, 0.5, -0.3])
    actions = np.array([[0.3, -0.2], [0.1, 0.4]])
    iterate, traj_cost, jac, grads, defects = build_problem_pieces(
        model, config, state, actions, opts
    )
    problem = build_qp(iterate, jac, grads, opts, traj_cost, bounds, defects)
    t_len, ds = iterate.states.shape
    np.testing.assert_allclose(
        problem.lower[: t_len * ds],
        (bounds.state_low[None, :] - iterate.states).reshape(-1),
    )
    np.testing.assert_allclose(
        problem.upper[: t_len * ds],
        (bounds.state_high[None, :] - iterate.states).reshape(-1),
    )
    np.testing.assert_allclose(
        problem.lower[t_len * ds :],
        (bounds.action_low[None, :] - iterate.actions).reshape(-1),
    )


def test_build_qp_dimensions():
    config = EnvConfig(n_agents=2)
    model = TrueDynamics(config)
    opts = MPCOptions(horizon=3)
    bounds = Bounds.from_env(config)
    state, _ = reset(config, 0)
    actions = np.zeros((3, 4))
    iterate, traj_cost, jac, grads, defects = build_problem_pieces(
        model, config, state, actions, opts
    )
    problem = build_qp(iterate, jac, grads, opts, traj_cost, bounds, defects)
    nz = 3 * (8 + 4)
    assert problem.hessian.shape == (nz, nz)
    assert problem.eq_matrix.shape == (3 * 8, nz)
    assert problem.gradient.shape == (nz,)


def test_kkt_residual_zero_case():
    config = single_agent_config()
    bounds = Bounds.from_env(config)
    states = np.array([[0.5, 0.0, 0.0, 0.0]])
    actions = np.zeros((1, 2))
    iterate = make_iterate(states, actions)
    grads = (np.zeros((1, 4)), np.zeros((1, 2)))
    jac = [(np.eye(4), np.zeros((4, 2)))]
    defects = np.zeros((1, 4))
    assert kkt_residual(iterate, grads, jac, defects, bounds) == 0.0


def test_kkt_residual_at_grid_optimum():
    config = single_agent_config()
    model = TrueDynamics(config)
    bounds = Bounds.from_env(config)
    state = np.array([0.0, 0.0, 0.8, -0.5])
    opts = MPCOptions(horizon=1, smooth_eps=1e-8)
    best_action, _ = grid_search_action(config, state, grid_step=0.01)
    nxt = model.predict(state, best_action)
    iterate = make_iterate(nxt[None, :], best_action[None, :])
    traj_cost = TrajectoryCost(np.zeros((1, 2)), np.zeros(1), opts.smooth_eps)
    grads = traj_cost.gradients(iterate.states, iterate.actions)
    iterate.lam = grads[0].copy()  # stationarity of the state block
    jac = linearize(model, state[None, :], iterate.actions)
    # boundary components absorb their stationarity into bound multipliers
    ga = grads[1][0] + jac[0][1].T @ iterate.lam[0]
    for d in range(2):
        if best_action[d] <= -config.action_bound + 1e-9:
            iterate.xi_a[0, d] = max(0.0, ga[d])
        elif best_action[d] >= config.action_bound - 1e-9:
            iterate.zeta_a[0, d] = max(0.0, -ga[d])
    defects = np.zeros((1, 4))
    res = kkt_residual(iterate, grads, jac, defects, bounds)
    assert res <= 2.0 * config.dt  # gradient scale at one grid step off the optimum


def test_merit_line_search_null_step():
    states = np.zeros((1, 4))
    actions = np.zeros((1, 2))
    iterate = make_iterate(states, actions)
    opts = MPCOptions(horizon=1)

    def evaluate(st, ac):
        return 3.5, np.zeros((1, 4))

    alpha, merit = merit_line_search(
        iterate, (np.zeros((1, 4)), np.zeros((1, 2))), 10.0, opts, evaluate, np.zeros(6)
    )
    assert alpha == 1.0
    assert merit == pytest.approx(3.5)


def test_merit_line_search_full_newton_step_on_quadratic():
    rng = np.random.default_rng(0)
    mat = rng.normal(size=(6, 6))
    h = mat.T @ mat + 6 * np.eye(6)
    target = rng.normal(size=6)

    def quad(z):
        d = z - target
        return 0.5 * d @ h @ d

    z0 = rng.normal(size=6)
    grad = h @ (z0 - target)
    direction = -np.linalg.solve(h, grad)
    iterate = make_iterate(z0[:4].reshape(1, 4), z0[4:].reshape(1, 2))
    opts = MPCOptions(horizon=1)

    def evaluate(st, ac):
        z = np.concatenate([st.reshape(-1), ac.reshape(-1)])
        return quad(z), np.zeros((1, 4))

    alpha, merit = merit_line_search(
        iterate,
        (direction[:4].reshape(1, 4), direction[4:].reshape(1, 2)),
        10.0,
        opts,
        evaluate,
        grad,
    )
    assert alpha == 1.0
    assert merit == pytest.approx(quad(z0 + direction))


def test_merit_line_search_armijo_decrease_assertion():
    # random nonconvex scalar landscape: accepted step satisfies the bound
    rng = np.random.default_rng(1)
    for _ in range(5):
        coeffs = rng.normal(size=4)

        def fun(z):
            flat = z.sum()
            return float(
                coeffs[0] * flat + coeffs[1] * flat**2 + coeffs[2] * np.sin(flat) + coeffs[3]
            )

        z0 = rng.normal(size=6)
        grad_flat = coeffs[0] + 2 * coeffs[1] * z0.sum() + coeffs[2] * np.cos(z0.sum())
        grad = np.full(6, grad_flat)
        direction = -grad  # steepest descent
        iterate = make_iterate(z0[:4].reshape(1, 4), z0[4:].reshape(1, 2))
        opts = MPCOptions(horizon=1)

        def evaluate(st, ac):
            z = np.concatenate([st.reshape(-1), ac.reshape(-1)])
            return fun(z), np.zeros((1, 4))

        merit0 = fun(z0)
        predicted = float(grad @ direction)
        alpha, merit = merit_line_search(
            iterate,
            (direction[:4].reshape(1, 4), direction[4:].reshape(1, 2)),
            10.0,
            opts,
            evaluate,
            grad,
        )
        assert merit <= merit0 + opts.armijo_c * alpha * predicted + 1e-12


def test_sqp_at_rest_converges_immediately():
    config = single_agent_config()
    model = TrueDynamics(config)
    bounds = Bounds.from_env(config)
    opts = MPCOptions(horizon=3, anchor_weight=0.1)
    state = np.array([1.0, 0.5, 0.0, 0.0])
    actions, diag = sqp_solve(np.zeros((3, 2)), state, model, bounds, opts, anchor=np.zeros(2))
    np.testing.assert_allclose(actions, 0.0, atol=1e-6)
    assert diag.status == "converged"
    assert diag.sqp_iters <= 2


def test_sqp_reduces_predicted_cost():
    config = single_agent_config()
    model = TrueDynamics(config)
    bounds = Bounds.from_env(config)
    opts = MPCOptions(horizon=4)
    state = np.array([0.0, 0.0, 3.5, 1.0])
    initial = np.tile(np.array([0.5, 0.2]), (4, 1))

    def trajectory_cost(actions):
        from deepsafempc.mpc import _rollout

        states = _rollout(model, state, actions)
        return sum(
            stage_cost(states[k], actions[k], np.zeros(2), 0.0, opts.smooth_eps)
            for k in range(4)
        )

    refined, diag = sqp_solve(initial, state, model, bounds, opts)
    assert trajectory_cost(refined) < trajectory_cost(initial)
    assert diag.status in ("converged", "max_iter")


def test_sqp_merit_strictly_decreasing():
    config = single_agent_config()
    model = TrueDynamics(config)
    bounds = Bounds.from_env(config)
    opts = MPCOptions(horizon=4)
    state = np.array([0.0, 0.0, 2.5, -1.5])
    _, diag = sqp_solve(np.tile(np.array([0.3, 0.3]), (4, 1)), state, model, bounds, opts)
    merits = [rec.merit_value for rec in diag.iterations]
    assert len(merits) >= 1
    assert all(b < a for a, b in zip(merits, merits[1:]))


def test_sqp_converged_residual_below_tol():
    config = single_agent_config()
    model = TrueDynamics(config)
    bounds = Bounds.from_env(config)
    opts = MPCOptions(horizon=2, max_sqp_iter=40)
    state = np.array([0.0, 0.0, 1.2, 0.7])
    _, diag = sqp_solve(np.zeros((2, 2)), state, model, bounds, opts)
    assert diag.status == "converged"
    assert diag.final_kkt <= opts.kkt_tol


def test_sqp_matches_grid_search_one_step():
    config = single_agent_config()
    model = TrueDynamics(config)
    bounds = Bounds.from_env(config)
    opts = MPCOptions(horizon=1, max_sqp_iter=40)
    rng = np.random.default_rng(3)
    for _ in range(5):
        state = np.concatenate([rng.normal(size=2), rng.uniform(-3, 3, size=2)])
        best_action, best_val = grid_search_action(config, state, grid_step=0.01)
        refined, diag = sqp_solve(np.zeros((1, 2)), state, model, bounds, opts)
        assert np.max(np.abs(refined[0] - best_action)) <= 0.02


def test_filter_fixed_point_at_rest():
    config = single_agent_config()
    model = TrueDynamics(config)
    bounds = Bounds.from_env(config)
    opts = MPCOptions(horizon=3)
    state = np.array([0.0, 0.0, 0.0, 0.0])
    action, diag = safety_filter(np.zeros(2), state, model, bounds, opts)
    np.testing.assert_allclose(action, 0.0, atol=1e-6)
    assert not diag.fallback


def test_filter_brakes_against_velocity():
    config = single_agent_config()
    model = TrueDynamics(config)
    bounds = Bounds.from_env(config)
    opts = MPCOptions(horizon=3, anchor_weight=0.0)
    state = np.array([0.0, 0.0, 3.0, 2.0])
    action, _ = safety_filter(np.array([0.5, 0.5]), state, model, bounds, opts)
    assert action[0] < 0.0 and action[1] < 0.0


def test_filter_output_within_bounds():
    config = EnvConfig(n_agents=2)
    model = TrueDynamics(config)
    bounds = Bounds.from_env(config)
    opts = MPCOptions(horizon=3)
    rng = np.random.default_rng(4)
    for _ in range(5):
        state = np.concatenate(
            [rng.normal(size=2), rng.uniform(-3, 3, size=2), rng.normal(size=2), rng.uniform(-3, 3, size=2)]
        )[[0, 1, 2, 3, 4, 5, 6, 7]]
        policy_action = rng.uniform(-1, 1, size=4)
        action, _ = safety_filter(policy_action, state, model, bounds, opts)
        assert np.all(action >= bounds.action_low - 1e-12)
        assert np.all(action <= bounds.action_high + 1e-12)


def test_filter_invariant_to_cost_rescaling():
    config = single_agent_config()
    model = TrueDynamics(config)
    bounds = Bounds.from_env(config)
    state = np.array([0.0, 0.0, 1.8, -0.9])
    base = MPCOptions(horizon=2, kkt_tol=1e-8, max_sqp_iter=60)
    scaled = MPCOptions(horizon=2, kkt_tol=1e-7, max_sqp_iter=60, cost_scale=10.0,
                        merit_penalty_init=100.0)
    a1, _ = safety_filter(np.zeros(2), state, model, bounds, base)
    a2, _ = safety_filter(np.zeros(2), state, model, bounds, scaled)
    assert np.max(np.abs(a1 - a2)) <= 1e-6


def test_sqp_deterministic():
    config = single_agent_config()
    model = TrueDynamics(config)
    bounds = Bounds.from_env(config)
    opts = MPCOptions(horizon=3)
    state = np.array([0.1, -0.2, 2.0, 1.0])
    initial = np.tile(np.array([0.2, -0.1]), (3, 1))
    a1, d1 = sqp_solve(initial, state, model, bounds, opts)
    a2, d2 = sqp_solve(initial, state, model, bounds, opts)
    assert np.array_equal(a1, a2)
    assert len(d1.iterations) == len(d2.iterations)
    for r1, r2 in zip(d1.iterations, d2.iterations):
        assert r1 == r2


def test_sqp_with_learned_model():
    model, config, _ = trained_toy_model(n=2500, seed=7, epochs=20)
    bounds = Bounds.from_env(config)
    opts = MPCOptions(horizon=3)
    state = np.array([0.0, 0.0, 2.0, 1.0])
    action, diag = safety_filter(np.array([0.3, 0.3]), state, model, bounds, opts)
    assert action[0] < 0.0  # brakes along the dominant velocity component
    assert diag.status in ("converged", "max_iter")
    assert not diag.fallback


def test_sqp_hessian_modes_reach_similar_solutions():
    config = single_agent_config()
    model = TrueDynamics(config)
    bounds = Bounds.from_env(config)
    state = np.array([0.0, 0.0, 0.9, -0.4])
    results = {}
    for mode in ("gauss_newton", "identity", "bfgs"):
        # stall safeguards off: the point is where each mode ends up, not speed
        opts = MPCOptions(horizon=2, hessian_mode=mode, max_sqp_iter=500,
                          merit_stall_window=10_000)
        actions, diag = sqp_solve(np.zeros((2, 2)), state, model, bounds, opts)
        results[mode] = actions
    np.testing.assert_allclose(results["identity"], results["gauss_newton"], atol=5e-3)
    np.testing.assert_allclose(results["bfgs"], results["gauss_newton"], atol=5e-3)


def test_state_bound_relaxation_on_infeasible_qp():
    # velocity box so tight that the linearized dynamics cannot satisfy it
    config = single_agent_config(
        state_low=(-0.001, -0.001, -0.001, -0.001), state_high=(0.001, 0.001, 0.001, 0.001)
    )
    model = TrueDynamics(config)
    bounds = Bounds.from_env(config)
    opts = MPCOptions(horizon=2, max_sqp_iter=10)
    state = np.array([0.001, 0.0, 0.001, 0.001])
    initial = np.tile(np.array([0.4, 0.0]), (2, 1))
    actions, diag = sqp_solve(initial, state, model, bounds, opts)
    assert actions.shape == (2, 2)  # solve completes through the penalized path
