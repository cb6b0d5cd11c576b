"""Multi-agent PPO: decentralized Gaussian actors with a centralized critic.

One actor network is shared by all agents (homogeneous roles, observations
already encode chain position); the critic consumes the concatenated
per-agent observations as the global state. Advantages use GAE; both
losses are the clipped forms with gradients from exact backprop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import env as env_mod
from .env import EnvConfig
from .neural_core import (
    GradientSet,
    MLPNet,
    adam_step,
    gradient_global_norm,
    init_adam,
    init_mlp,
    _backward_batch,
    _forward_batch,
)

LOG_2PI = math.log(2.0 * math.pi)


class LengthMismatch(Exception):
    """Sequence lengths passed to GAE are inconsistent."""


class NonFiniteLoss(Exception):
    """A loss evaluated to nan or inf."""


@dataclass
class PPOHyper:
    gamma: float = 0.96
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy_coeff: float = 0.01
    learning_iters: int = 5
    actor_lr: float = 9e-5
    critic_lr: float = 5e-3
    minibatch_count: int = 4
    target_kl: float = 0.016
    max_grad_norm: float = 10.0
    adam_epsilon: float = 1e-5
    huber_delta: Optional[float] = None  # off by default; squared clip loss otherwise
    rollout_envs: int = 8
    log_std_init: float = -0.5
    hidden: tuple[int, int] = (128, 128)

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.clip <= 0.0:
            raise ValueError("clip must be positive")
        if self.learning_iters < 1:
            raise ValueError("learning_iters must be >= 1")


@dataclass
class ActorPolicy:
    net: MLPNet
    log_std: np.ndarray

    @property
    def action_dim(self) -> int:
        return self.net.output_dim


@dataclass
class CentralCritic:
    net: MLPNet


@dataclass
class RolloutBatch:
    """Flattened per-(instance, timestep, agent) training rows.

    ``actions`` holds the raw pre-clamp policy samples so that importance
    ratios reproduce ``log_probs_old`` exactly at the old parameters; the
    clamped variants were what the environment executed.
    """

    observations: np.ndarray
    global_states: np.ndarray
    actions: np.ndarray
    log_probs_old: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    values_old: np.ndarray
    advantages: np.ndarray
    returns_togo: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return self.observations.shape[0]

    def select(self, idx: np.ndarray) -> "RolloutBatch":
        return RolloutBatch(
            self.observations[idx],
            self.global_states[idx],
            self.actions[idx],
            self.log_probs_old[idx],
            self.rewards[idx],
            self.costs[idx],
            self.values_old[idx],
            self.advantages[idx],
            self.returns_togo[idx],
            self.dones[idx],
        )


def make_actor(obs_dim: int, action_dim: int, seed: int, hyper: PPOHyper) -> ActorPolicy:
    net = init_mlp((obs_dim, *hyper.hidden, action_dim), seed, final_gain=0.01)
    return ActorPolicy(net, np.full(action_dim, hyper.log_std_init))


def make_critic(global_dim: int, seed: int, hyper: PPOHyper) -> CentralCritic:
    return CentralCritic(init_mlp((global_dim, *hyper.hidden, 1), seed))


def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Diagonal-Gaussian log density, batched over leading axes."""
    z = (x - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z + 2.0 * log_std + LOG_2PI, axis=-1)


def policy_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std) + 0.5 * log_std.shape[0] * (1.0 + LOG_2PI))


def act(
    policy: ActorPolicy,
    observation: np.ndarray,
    rng: Optional[np.random.Generator],
    action_bound: float,
    deterministic: bool = False,
) -> tuple[np.ndarray, float]:
    """Sample an action for one observation.

    Returns the bound-clamped action and the exact log density of the
    pre-clamp sample. Deterministic mode returns the clamped mean with its
    own density.
    """
    mean = _forward_batch(policy.net, np.asarray(observation, dtype=np.float64)[None, :])[-1][0]
    if deterministic or rng is None:
        sample = mean
    else:
        sample = mean + np.exp(policy.log_std) * rng.standard_normal(mean.shape)
    log_prob = float(gaussian_log_prob(mean, policy.log_std, sample))
    return np.clip(sample, -action_bound, action_bound), log_prob


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """GAE advantages and reward-to-go targets.

    ``values`` carries one bootstrap entry past the rewards; ``dones``
    truncate bootstrapping at episode ends.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    t_len = rewards.shape[0]
    if values.shape[0] != t_len + 1 or dones.shape[0] != t_len:
        raise LengthMismatch(
            f"rewards {t_len}, values {values.shape[0]}, dones {dones.shape[0]}"
        )
    advantages = np.zeros(t_len)
    acc = 0.0
    for t in range(t_len - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        acc = delta + gamma * lam * nonterminal * acc
        advantages[t] = acc
    return advantages, advantages + values[:-1]


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


def actor_loss_and_grads(
    policy: ActorPolicy, batch: RolloutBatch, hyper: PPOHyper
) -> tuple[float, GradientSet, float]:
    """Clipped-surrogate loss (negated for minimization) with exact gradients.

    Returns (loss, gradients, approx_kl); the gradient set carries the
    log-std gradient alongside the network gradients.
    """
    n = len(batch)
    acts = _forward_batch(policy.net, batch.observations)
    mean = acts[-1]
    log_std = policy.log_std
    inv_std = np.exp(-log_std)
    z = (batch.actions - mean) * inv_std
    log_prob = -0.5 * np.sum(z * z + 2.0 * log_std + LOG_2PI, axis=-1)

    ratio = np.exp(log_prob - batch.log_probs_old)
    adv = batch.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - hyper.clip, 1.0 + hyper.clip) * adv
    surrogate = np.minimum(unclipped, clipped)
    entropy = policy_entropy(log_std)
    loss = -float(np.mean(surrogate)) - hyper.entropy_coeff * entropy
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"actor loss {loss}")
    approx_kl = float(np.mean(batch.log_probs_old - log_prob))

    in_clip = (ratio >= 1.0 - hyper.clip) & (ratio <= 1.0 + hyper.clip)
    active = (unclipped <= clipped) | in_clip
    dloss_dlogp = -(ratio * adv * active) / n

    out_grad = dloss_dlogp[:, None] * (z * inv_std)
    wg, bg, _ = _backward_batch(policy.net, acts, out_grad)
    log_std_grad = np.sum(dloss_dlogp[:, None] * (z * z - 1.0), axis=0)
    log_std_grad -= hyper.entropy_coeff
    return loss, GradientSet(wg, bg, np.zeros(policy.net.input_dim), log_std_grad), approx_kl


def _huber(err: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    small = np.abs(err) <= delta
    val = np.where(small, 0.5 * err * err, delta * (np.abs(err) - 0.5 * delta))
    grad = np.where(small, err, delta * np.sign(err))
    return val, grad


def critic_loss_and_grads(
    critic: CentralCritic, batch: RolloutBatch, hyper: PPOHyper
) -> tuple[float, GradientSet]:
    """Clipped value-regression loss against the reward-to-go targets."""
    n = len(batch)
    acts = _forward_batch(critic.net, batch.global_states)
    v = acts[-1][:, 0]
    v_old = batch.values_old
    target = batch.returns_togo
    v_clip = np.clip(v, v_old - hyper.clip, v_old + hyper.clip)
    err = v - target
    err_clip = v_clip - target
    if hyper.huber_delta is None:
        l_raw, g_raw = err * err, 2.0 * err
        l_clip, g_clip = err_clip * err_clip, 2.0 * err_clip
    else:
        l_raw, g_raw = _huber(err, hyper.huber_delta)
        l_clip, g_clip = _huber(err_clip, hyper.huber_delta)
    take_raw = l_raw >= l_clip
    loss = float(np.mean(np.where(take_raw, l_raw, l_clip)))
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"critic loss {loss}")
    in_clip = (v >= v_old - hyper.clip) & (v <= v_old + hyper.clip)
    dv = np.where(take_raw, g_raw, g_clip * in_clip) / n
    wg, bg, _ = _backward_batch(critic.net, acts, dv[:, None])
    return loss, GradientSet(wg, bg, np.zeros(critic.net.input_dim))


@dataclass
class Trajectory:
    """Raw per-instance episode record kept for the dynamics dataset."""

    states: np.ndarray  # (L + 1, state_dim)
    actions: np.ndarray  # (L, action_dim), bound-clamped as executed
    rewards: np.ndarray
    costs: np.ndarray
    indicators: np.ndarray


def collect_rollout(
    policy: ActorPolicy,
    critic: CentralCritic,
    config: EnvConfig,
    hyper: PPOHyper,
    seed: int,
) -> tuple[RolloutBatch, list[Trajectory], dict]:
    """Run one episode in each of ``hyper.rollout_envs`` instances.

    Instances advance in lockstep with batched network evaluation and are
    flattened instance-major, so the result is independent of any
    scheduling. Advantages are computed here (GAE per instance) and shared
    across agents, matching the shared reward and centralized value.
    """
    n_env = hyper.rollout_envs
    n_agents = config.n_agents
    length = config.episode_length
    rng = np.random.default_rng(seed)
    reset_seeds = [int(s) for s in rng.integers(0, 2**62, size=n_env)]

    states = np.zeros((n_env, config.state_dim))
    obs = np.zeros((n_env, n_agents, config.obs_dim))
    for e in range(n_env):
        s, o = env_mod.reset(config, reset_seeds[e])
        states[e] = s
        obs[e] = np.stack(o)

    obs_buf = np.zeros((length, n_env, n_agents, config.obs_dim))
    gs_buf = np.zeros((length, n_env, n_agents * config.obs_dim))
    sample_buf = np.zeros((length, n_env, n_agents, 2))
    logp_buf = np.zeros((length, n_env, n_agents))
    rew_buf = np.zeros((length, n_env))
    cost_buf = np.zeros((length, n_env))
    ind_buf = np.zeros((length, n_env))
    done_buf = np.zeros((length, n_env))
    val_buf = np.zeros((length + 1, n_env))
    state_buf = np.zeros((length + 1, n_env, config.state_dim))
    exec_buf = np.zeros((length, n_env, config.action_dim))

    std = np.exp(policy.log_std)
    for t in range(length):
        obs_buf[t] = obs
        gs = obs.reshape(n_env, -1)
        gs_buf[t] = gs
        val_buf[t] = _forward_batch(critic.net, gs)[-1][:, 0]
        mean = _forward_batch(policy.net, obs.reshape(n_env * n_agents, -1))[-1]
        mean = mean.reshape(n_env, n_agents, 2)
        noise = rng.standard_normal(mean.shape)
        samples = mean + std * noise
        logp_buf[t] = gaussian_log_prob(mean, policy.log_std, samples)
        sample_buf[t] = samples
        executed = np.clip(samples, -config.action_bound, config.action_bound)
        state_buf[t] = states
        for e in range(n_env):
            out = env_mod.step(states[e], executed[e].reshape(-1), t, config)
            states[e] = out.next_state
            obs[e] = np.stack(out.observations)
            rew_buf[t, e] = out.reward
            cost_buf[t, e] = out.cost
            ind_buf[t, e] = out.cost_indicator
            done_buf[t, e] = float(out.done)
        exec_buf[t] = executed.reshape(n_env, -1)
    state_buf[length] = states
    val_buf[length] = _forward_batch(critic.net, obs.reshape(n_env, -1))[-1][:, 0]

    adv = np.zeros((length, n_env))
    ret = np.zeros((length, n_env))
    for e in range(n_env):
        adv[:, e], ret[:, e] = compute_gae(
            rew_buf[:, e], val_buf[:, e], done_buf[:, e], hyper.gamma, hyper.gae_lambda
        )

    def flat(arr_te, per_agent=False):
        # instance-major, then time, then agent
        if per_agent:
            return arr_te.transpose(1, 0, 2, *range(3, arr_te.ndim)).reshape(
                n_env * length * n_agents, *arr_te.shape[3:]
            )
        expanded = np.repeat(arr_te.transpose(1, 0, *range(2, arr_te.ndim)), n_agents, axis=1)
        return expanded.reshape(n_env * length * n_agents, *arr_te.shape[2:])

    batch = RolloutBatch(
        observations=flat(obs_buf, per_agent=True),
        global_states=flat(gs_buf),
        actions=flat(sample_buf, per_agent=True),
        log_probs_old=flat(logp_buf, per_agent=True),
        rewards=flat(rew_buf),
        costs=flat(cost_buf),
        values_old=flat(val_buf[:-1]),
        advantages=flat(adv),
        returns_togo=flat(ret),
        dones=flat(done_buf),
    )
    trajectories = [
        Trajectory(
            states=state_buf[:, e].copy(),
            actions=exec_buf[:, e].copy(),
            rewards=rew_buf[:, e].copy(),
            costs=cost_buf[:, e].copy(),
            indicators=ind_buf[:, e].copy(),
        )
        for e in range(n_env)
    ]
    stats = {
        "reward": float(np.mean(np.sum(rew_buf, axis=0))),
        "cost": float(np.mean(np.sum(cost_buf, axis=0))),
        "indicator_rate": float(np.mean(ind_buf)),
    }
    return batch, trajectories, stats


@dataclass
class _VectorAdam:
    """Adam moments for the handful of parameters living outside a net."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    def step(self, x: np.ndarray, grad: np.ndarray, lr: float, epsilon: float,
             beta1: float = 0.9, beta2: float = 0.999) -> np.ndarray:
        self.t += 1
        self.m = beta1 * self.m + (1 - beta1) * grad
        self.v = beta2 * self.v + (1 - beta2) * grad * grad
        m_hat = self.m / (1 - beta1 ** self.t)
        v_hat = self.v / (1 - beta2 ** self.t)
        return x - lr * m_hat / (np.sqrt(v_hat) + epsilon)


class MAPPOTrainer:
    """Owns the policy, critic, and optimizer state across iterations."""

    def __init__(self, config: EnvConfig, hyper: PPOHyper, seed: int):
        self.config = config
        self.hyper = hyper
        self.policy = make_actor(config.obs_dim, 2, seed, hyper)
        self.critic = make_critic(config.n_agents * config.obs_dim, seed + 1, hyper)
        self.actor_opt = init_adam(self.policy.net, hyper.actor_lr, epsilon=hyper.adam_epsilon)
        self.critic_opt = init_adam(self.critic.net, hyper.critic_lr, epsilon=hyper.adam_epsilon)
        self.log_std_opt = _VectorAdam(np.zeros(2), np.zeros(2))
        self.rng = np.random.default_rng(seed + 2)

    def train_iteration(self) -> dict:
        """One cycle of Algorithm-style training: rollout, GAE, clipped updates.

        Actor updates stop early once the minibatch KL estimate exceeds the
        target; the critic finishes its epochs regardless. Returns the
        iteration stats and keeps the collected trajectories on
        ``self.last_trajectories`` for the dynamics buffer.
        """
        hyper = self.hyper
        rollout_seed = int(self.rng.integers(0, 2**62))
        batch, trajectories, stats = collect_rollout(
            self.policy, self.critic, self.config, hyper, rollout_seed
        )
        self.last_trajectories = trajectories
        batch.advantages = normalize_advantages(batch.advantages)

        n = len(batch)
        perm_rng = np.random.default_rng(rollout_seed + 1)
        actor_live = True
        last_actor_loss = 0.0
        last_critic_loss = 0.0
        last_kl = 0.0
        for _ in range(hyper.learning_iters):
            order = perm_rng.permutation(n)
            for chunk in np.array_split(order, hyper.minibatch_count):
                mini = batch.select(chunk)
                if actor_live:
                    loss, grads, kl = actor_loss_and_grads(self.policy, mini, hyper)
                    last_kl = kl
                    if kl > hyper.target_kl:
                        actor_live = False
                    else:
                        last_actor_loss = loss
                        self._update_actor(grads)
                closs, cgrads = critic_loss_and_grads(self.critic, mini, hyper)
                last_critic_loss = closs
                self.critic.net, self.critic_opt = adam_step(
                    self.critic.net, cgrads, self.critic_opt, hyper.max_grad_norm
                )
        stats.update(
            actor_loss=last_actor_loss,
            critic_loss=last_critic_loss,
            kl=last_kl,
            entropy=policy_entropy(self.policy.log_std),
        )
        return stats

    def _update_actor(self, grads: GradientSet) -> None:
        # clip jointly over net parameters and log_std, then update both
        hyper = self.hyper
        norm = gradient_global_norm(grads)
        scale = 1.0 if norm <= hyper.max_grad_norm else hyper.max_grad_norm / norm
        net_grads = GradientSet(
            [g * scale for g in grads.weight_grads],
            [g * scale for g in grads.bias_grads],
            grads.input_gradient,
        )
        self.policy.net, self.actor_opt = adam_step(
            self.policy.net, net_grads, self.actor_opt, hyper.max_grad_norm
        )
        self.policy.log_std = self.log_std_opt.step(
            self.policy.log_std,
            grads.log_std_grad * scale,
            hyper.actor_lr,
            hyper.adam_epsilon,
        )
