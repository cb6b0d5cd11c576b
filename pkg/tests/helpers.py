"""Shared builders for tests: datasets, toy models, brute-force searches."""

import itertools

import numpy as np

from deepsafempc.env import EnvConfig, reset, step
from deepsafempc.predictor import DynamicsModel, PredictorHyper, build_dataset, train_predictor


def brute_force_box_qp(h, g, a, b, lo, up, tol=1e-9):
    """Enumerate every assignment of variables to {free, lower, upper}.

    For each assignment the reduced equality-constrained QP is solved and
    feasible candidates are compared on the objective; for a convex QP the
    optimum's active set is among the assignments, so the best feasible
    candidate is the global minimum.
    """
    n = g.shape[0]
    best = None
    options = []
    for i in range(n):
        opts = ["free"]
        if np.isfinite(lo[i]):
            opts.append("lower")
        if np.isfinite(up[i]):
            opts.append("upper")
        options.append(opts)
    for combo in itertools.product(*options):
        x = np.zeros(n)
        free = np.ones(n, dtype=bool)
        for i, tag in enumerate(combo):
            if tag == "lower":
                x[i] = lo[i]
                free[i] = False
            elif tag == "upper":
                x[i] = up[i]
                free[i] = False
        nf = int(free.sum())
        m = b.shape[0]
        if nf:
            kkt = np.zeros((nf + m, nf + m))
            kkt[:nf, :nf] = h[np.ix_(free, free)]
            if m:
                kkt[:nf, nf:] = a[:, free].T
                kkt[nf:, :nf] = a[:, free]
            rhs = np.concatenate(
                [-(g[free] + h[np.ix_(free, ~free)] @ x[~free]),
                 (b - a[:, ~free] @ x[~free]) if m else b]
            )
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            x[free] = sol[:nf]
        elif m and np.max(np.abs(a @ x - b)) > tol:
            continue
        if np.any(x < lo - tol) or np.any(x > up + tol):
            continue
        if m and np.max(np.abs(a @ x - b)) > 1e-7:
            continue
        val = 0.5 * x @ h @ x + g @ x
        if best is None or val < best[0]:
            best = (val, x.copy())
    return best


def random_box_qp(rng, n, m, spread=2.0):
    """Random strictly convex box QP with a feasible interior point."""
    from deepsafempc.qp import QPProblem

    mat = rng.normal(size=(n, n))
    h = mat.T @ mat + n * np.eye(n)
    g = rng.normal(size=n) * spread
    lo = -rng.uniform(0.2, spread, size=n)
    up = rng.uniform(0.2, spread, size=n)
    if m:
        a = rng.normal(size=(m, n))
        interior = lo + (up - lo) * rng.uniform(0.3, 0.7, size=n)
        b = a @ interior
    else:
        a = np.zeros((0, n))
        b = np.zeros(0)
    return QPProblem(h, g, a, b, lo, up)


def random_transition_dataset(n=400, seed=0, n_agents=1, config=None, random_starts=False):
    config = config or EnvConfig(n_agents=n_agents, episode_length=50)
    rng = np.random.default_rng(seed)

    def start_state():
        state, _ = reset(config, int(rng.integers(0, 2**31)))
        if random_starts:
            per = state.reshape(-1, 4)
            per[:, :2] += rng.uniform(-2.0, 2.0, size=per[:, :2].shape)
            per[:, 2:] = rng.uniform(-3.5, 3.5, size=per[:, 2:].shape)
            state = per.reshape(-1)
        return state

    states, actions, next_states = [], [], []
    state = start_state()
    t = 0
    while len(states) < n:
        if t >= config.episode_length:
            state = start_state()
            t = 0
        action = rng.uniform(-config.action_bound, config.action_bound, size=config.action_dim)
        out = step(state, action, t, config)
        states.append(state)
        actions.append(action)
        next_states.append(out.next_state)
        state = out.next_state
        t += 1
    return build_dataset(np.array(states), np.array(actions), np.array(next_states)), config


def zero_residual_model(dataset):
    from deepsafempc.neural_core import init_mlp

    ds = dataset.states.shape[1]
    da = dataset.actions.shape[1]
    net = init_mlp((ds + da, 8, ds), seed=0)
    w, b = net.layers[-1]
    net.layers[-1] = (np.zeros_like(w), np.zeros_like(b))
    return DynamicsModel(
        net,
        dataset.state_mean,
        dataset.state_std,
        dataset.action_mean,
        dataset.action_std,
        dataset.delta_std,
    )


def trained_toy_model(n=3000, seed=0, n_agents=1, epochs=40, config=None, random_starts=True):
    dataset, config = random_transition_dataset(
        n=n, seed=seed, n_agents=n_agents, config=config, random_starts=random_starts
    )
    hyper = PredictorHyper(hidden=(32, 32), epochs=epochs, batch_size=128)
    model, history = train_predictor(dataset, hyper, seed=seed + 1)
    return model, config, history


def grid_search_action(config, state, grid_step=0.01, smooth_eps=1e-8,
                       anchor=None, rho=0.0):
    """Brute-force the single-agent one-step filter objective on a grid.

    Vectorized reimplementation of the one-step dynamics and stage cost,
    independent of the solver path.
    """
    assert config.n_agents == 1 and config.coupling_stiffness == 0.0
    bound = config.action_bound
    values = np.arange(-bound, bound + grid_step / 2, grid_step)
    gx, gy = np.meshgrid(values, values, indexing="ij")
    actions = np.stack([gx.ravel(), gy.ravel()], axis=1)
    anchor = np.zeros(2) if anchor is None else anchor

    pos = state[:2]
    vel = state[2:]
    speed = np.sqrt(vel @ vel)
    accel = actions - config.drag_coeff * speed * vel[None, :]
    new_vel = vel[None, :] + config.dt * accel
    new_pos = pos[None, :] + config.dt * new_vel
    lo = np.asarray(config.state_low)
    hi = np.asarray(config.state_high)
    clipped = np.clip(new_pos, lo[:2], hi[:2])
    new_vel = np.where(clipped != new_pos, 0.0, new_vel)
    new_vel = np.clip(new_vel, lo[2:], hi[2:])

    cost = np.sqrt(np.sum(new_vel * new_vel, axis=1) + smooth_eps)
    cost = cost + rho * np.sum((actions - anchor[None, :]) ** 2, axis=1)
    best = int(np.argmin(cost))
    return actions[best].copy(), float(cost[best])
