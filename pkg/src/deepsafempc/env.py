"""Desk-scale multi-agent point-mass environments.

Each agent is a 2-d point mass on a plane, driven by a force action,
slowed by quadratic drag, and coupled to its chain neighbours by linear
springs along the x axis. The task rewards forward (x) progress; the
safety cost is the summed agent speed, with an indicator that fires when
any agent exceeds a velocity threshold.

State layout per agent: (x, y, vx, vy), flattened in agent order.
Action layout per agent: (fx, fy), flattened in agent order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class ActionOutOfBounds(Exception):
    """A commanded force component exceeds the action bound."""


@dataclass(frozen=True)
class EnvConfig:
    n_agents: int = 2
    dt: float = 0.05
    drag_coeff: float = 0.08
    coupling_stiffness: float = 0.25
    action_bound: float = 1.0
    state_low: tuple[float, float, float, float] = (-50.0, -50.0, -10.0, -10.0)
    state_high: tuple[float, float, float, float] = (50.0, 50.0, 10.0, 10.0)
    velocity_threshold: float = 3.227
    ctrl_cost_weight: float = 0.1
    alive_bonus: float = 0.0
    episode_length: int = 100

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if any(lo >= hi for lo, hi in zip(self.state_low, self.state_high)):
            raise ValueError("state_low must be < state_high componentwise")

    @property
    def state_dim(self) -> int:
        return 4 * self.n_agents

    @property
    def action_dim(self) -> int:
        return 2 * self.n_agents

    @property
    def obs_dim(self) -> int:
        # own (x, y, vx, vy) plus relative position of each chain neighbour
        return 8

    def state_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        low = np.tile(np.asarray(self.state_low, dtype=np.float64), self.n_agents)
        high = np.tile(np.asarray(self.state_high, dtype=np.float64), self.n_agents)
        return low, high

    def action_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        b = self.action_bound * np.ones(self.action_dim)
        return -b, b


@dataclass
class StepOutcome:
    next_state: np.ndarray
    observations: list[np.ndarray]
    reward: float
    cost: float
    cost_indicator: int
    done: bool


def reset(config: EnvConfig, seed: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Place agents on a line at x_i = i with small seeded velocity noise."""
    rng = np.random.default_rng(seed)
    state = np.zeros(config.state_dim)
    for i in range(config.n_agents):
        state[4 * i] = float(i)
    noise = rng.uniform(-0.05, 0.05, size=2 * config.n_agents)
    for i in range(config.n_agents):
        state[4 * i + 2 : 4 * i + 4] = noise[2 * i : 2 * i + 2]
    return state, observe(state, config)


def _check_action(action: np.ndarray, config: EnvConfig) -> None:
    if action.shape != (config.action_dim,):
        raise ActionOutOfBounds(f"action shape {action.shape}, expected ({config.action_dim},)")
    if np.any(np.abs(action) > config.action_bound + 1e-9):
        raise ActionOutOfBounds(
            f"|action| max {np.max(np.abs(action)):.4f} exceeds bound {config.action_bound}"
        )


def _integrate(state: np.ndarray, action: np.ndarray, config: EnvConfig) -> np.ndarray:
    """One semi-implicit Euler step, without the action-bound check."""
    n = config.n_agents
    pos = state.reshape(n, 4)[:, :2]
    vel = state.reshape(n, 4)[:, 2:]
    force = action.reshape(n, 2)

    speed = np.sqrt(np.sum(vel * vel, axis=1, keepdims=True))
    accel = force - config.drag_coeff * speed * vel

    if config.coupling_stiffness > 0.0 and n > 1:
        x = pos[:, 0]
        coupling = np.zeros(n)
        coupling[1:] += x[:-1] - x[1:] - 1.0  # left neighbour
        coupling[:-1] += x[1:] - x[:-1] + 1.0  # right neighbour
        accel[:, 0] += config.coupling_stiffness * coupling

    new_vel = vel + config.dt * accel
    new_pos = pos + config.dt * new_vel

    low, high = config.state_bounds()
    low = low.reshape(n, 4)
    high = high.reshape(n, 4)
    clipped_pos = np.clip(new_pos, low[:, :2], high[:, :2])
    new_vel = np.where(clipped_pos != new_pos, 0.0, new_vel)
    new_vel = np.clip(new_vel, low[:, 2:], high[:, 2:])

    out = np.empty_like(state).reshape(n, 4)
    out[:, :2] = clipped_pos
    out[:, 2:] = new_vel
    return out.reshape(-1)


def true_dynamics(state: np.ndarray, action: np.ndarray, config: EnvConfig) -> np.ndarray:
    """Ground-truth one-step transition; raises on out-of-bounds actions."""
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    _check_action(action, config)
    return _integrate(state, action, config)


def cost(state: np.ndarray, config: EnvConfig) -> tuple[float, int]:
    """Summed agent speed, plus an indicator that any speed exceeds the threshold."""
    vel = np.asarray(state, dtype=np.float64).reshape(-1, 4)[:, 2:]
    speeds = np.sqrt(np.sum(vel * vel, axis=1))
    return float(np.sum(speeds)), int(np.any(speeds > config.velocity_threshold))


def reward(
    state: np.ndarray, next_state: np.ndarray, action: np.ndarray, config: EnvConfig
) -> float:
    """Mean forward progress rate minus control cost plus alive bonus."""
    x0 = np.asarray(state, dtype=np.float64).reshape(-1, 4)[:, 0]
    x1 = np.asarray(next_state, dtype=np.float64).reshape(-1, 4)[:, 0]
    progress = float(np.mean(x1 - x0)) / config.dt
    ctrl = config.ctrl_cost_weight * float(np.sum(np.square(action)))
    return progress - ctrl + config.alive_bonus


def observe(state: np.ndarray, config: EnvConfig) -> list[np.ndarray]:
    """Per-agent observation: own state plus relative neighbour positions.

    Missing neighbours contribute zeros, so concatenating all observations
    in agent order always reconstructs the full state (and serves as the
    global state for the centralized critic).
    """
    state = np.asarray(state, dtype=np.float64)
    n = config.n_agents
    per = state.reshape(n, 4)
    obs = []
    for i in range(n):
        o = np.zeros(8)
        o[:4] = per[i]
        if i > 0:
            o[4:6] = per[i - 1, :2] - per[i, :2]
        if i < n - 1:
            o[6:8] = per[i + 1, :2] - per[i, :2]
        obs.append(o)
    return obs


def global_state(observations: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate(list(observations))


def step(state: np.ndarray, action: np.ndarray, t: int, config: EnvConfig) -> StepOutcome:
    """Compose dynamics, reward, cost, and observation into one transition."""
    if t >= config.episode_length:
        raise ValueError(f"t={t} is past the episode length {config.episode_length}")
    next_state = true_dynamics(state, action, config)
    r = reward(state, next_state, action, config)
    c, indicator = cost(next_state, config)
    return StepOutcome(
        next_state=next_state,
        observations=observe(next_state, config),
        reward=r,
        cost=c,
        cost_indicator=indicator,
        done=(t + 1 == config.episode_length),
    )
