"""End-to-end orchestration: policy training, predictor fitting, filtered eval.

A run executes three phases in order and writes everything under one
output directory: MAPPO training (actor/critic checkpoints, per-iteration
metrics), offline predictor training on the buffered transition data mixed
50/50 with random-policy rollouts, and a control loop that applies the MPC
safety filter to the trained policy while monitoring one-step prediction
error. All phases are reproducible from (config, seed); in single-thread
mode the metrics files are byte-identical across reruns.
"""

from __future__ import annotations

import json
import os
import sys
import time
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib as toml_reader
else:
    import tomli as toml_reader

from . import env as env_mod
from . import mappo as mappo_mod
from . import mpc as mpc_mod
from . import predictor as pred_mod
from . import report
from .env import EnvConfig
from .mappo import ActorPolicy, MAPPOTrainer, PPOHyper
from .mpc import Bounds, MPCOptions
from .neural_core import load_checkpoint, save_checkpoint
from .predictor import DynamicsModel, ErrorMonitor, PredictorHyper, update_error_monitor


class ConfigInvalid(Exception):
    """Config file or preset could not be parsed into a valid RunConfig."""


class MissingCheckpoint(Exception):
    """A required checkpoint file does not exist."""


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PPOHyper = field(default_factory=PPOHyper)
    predictor: PredictorHyper = field(default_factory=PredictorHyper)
    mpc: MPCOptions = field(default_factory=MPCOptions)
    episodes: int = 300  # MAPPO training iterations
    max_steps: int = 1000  # control steps in the filtered eval loop
    seed: int = 0
    output_dir: str = "runs/out"
    mpc_enabled: bool = True
    deterministic_eval: bool = True
    single_thread: bool = False
    mpc_open_loop: bool = False


PRESETS = {
    "cheetah2": dict(velocity_threshold=3.227, ctrl_cost_weight=0.1, alive_bonus=0.0),
    "ant2": dict(velocity_threshold=2.522, ctrl_cost_weight=0.5, alive_bonus=1.0),
    "swimmer2": dict(velocity_threshold=0.04891, ctrl_cost_weight=0.0001, alive_bonus=0.0),
}


def default_config(preset: str = "cheetah2") -> RunConfig:
    if preset not in PRESETS:
        raise ConfigInvalid(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return RunConfig(env=EnvConfig(n_agents=2, **PRESETS[preset]))


_TUPLE_FIELDS = {"state_low", "state_high", "hidden"}


def _coerce(key: str, value, default, context: str):
    """Check a parsed TOML value against the field's default-derived type."""
    if key in _TUPLE_FIELDS:
        if not isinstance(value, (list, tuple)):
            raise ConfigInvalid(f"{context}.{key} must be an array")
        return tuple(value)
    if default is None:  # optional numeric knobs
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigInvalid(f"{context}.{key} must be a number")
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigInvalid(f"{context}.{key} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigInvalid(f"{context}.{key} must be an integer")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigInvalid(f"{context}.{key} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigInvalid(f"{context}.{key} must be a string")
        return value
    return value


def _dataclass_from_table(cls, table: dict, context: str):
    by_name = {f.name: f for f in fields(cls)}
    unknown = set(table) - set(by_name)
    if unknown:
        raise ConfigInvalid(f"unknown keys {sorted(unknown)} in [{context}]")
    kwargs = {}
    for key, value in table.items():
        kwargs[key] = _coerce(key, value, by_name[key].default, context)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad values in [{context}]: {exc}") from exc


def load_config(path) -> RunConfig:
    """Parse a TOML run config; unknown keys are rejected."""
    try:
        with open(path, "rb") as fh:
            doc = toml_reader.load(fh)
    except FileNotFoundError:
        raise
    except (OSError, toml_reader.TOMLDecodeError) as exc:
        raise ConfigInvalid(f"cannot parse {path}: {exc}") from exc

    sections = {"env": EnvConfig, "ppo": PPOHyper, "predictor": PredictorHyper, "mpc": MPCOptions}
    top_known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - top_known
    if unknown:
        raise ConfigInvalid(f"unknown top-level keys {sorted(unknown)}")
    kwargs = {}
    top_fields = {f.name: f for f in fields(RunConfig)}
    for name, cls in sections.items():
        if name in doc:
            kwargs[name] = _dataclass_from_table(cls, doc[name], name)
    for key, value in doc.items():
        if key not in sections:
            kwargs[key] = _coerce(key, value, top_fields[key].default, "top level")
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad top-level values: {exc}") from exc


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot encode {value!r}")


def config_to_toml(config: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        if f.name in ("env", "ppo", "predictor", "mpc"):
            continue
        lines.append(f"{f.name} = {_toml_value(getattr(config, f.name))}")
    for section in ("env", "ppo", "predictor", "mpc"):
        sub = getattr(config, section)
        lines.append("")
        lines.append(f"[{section}]")
        for f in fields(sub):
            value = getattr(sub, f.name)
            if value is None:
                continue  # optional knobs are omitted when unset
            lines.append(f"{f.name} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


_METRIC_KEYS = (
    "episode_reward",
    "episode_cost",
    "cost_indicator_rate",
    "predictor_mse",
    "kkt_residual",
    "sqp_iters",
)


class MetricsWriter:
    """Appends one JSONL record per logging event with a fixed schema."""

    def __init__(self, path, single_thread: bool):
        self.path = path
        self.single_thread = single_thread
        self._t0 = time.perf_counter()
        self._fh = open(path, "w", encoding="utf-8")

    def write(self, phase: str, step: int, **values) -> None:
        record = {"phase": phase, "step": int(step)}
        for key in _METRIC_KEYS:
            record[key] = values.pop(key, None)
        if values:
            raise ValueError(f"unknown metric fields {sorted(values)}")
        record["wallclock"] = 0.0 if self.single_thread else time.perf_counter() - self._t0
        self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self._fh.close()


def _save_actor(policy: ActorPolicy, path, seed: int, config: EnvConfig) -> None:
    save_checkpoint(
        policy.net,
        path,
        {
            "seed": seed,
            "role": "actor",
            "log_std": policy.log_std.tolist(),
            "n_agents": config.n_agents,
            "action_bound": config.action_bound,
        },
    )


def load_actor(path) -> ActorPolicy:
    if not os.path.exists(path):
        raise MissingCheckpoint(str(path))
    net, meta = load_checkpoint(path)
    return ActorPolicy(net, np.asarray(meta["log_std"], dtype=np.float64))


def load_critic(path):
    if not os.path.exists(path):
        raise MissingCheckpoint(str(path))
    net, _ = load_checkpoint(path)
    return mappo_mod.CentralCritic(net)


def load_predictor(path) -> DynamicsModel:
    if not os.path.exists(path):
        raise MissingCheckpoint(str(path))
    return pred_mod.load_model(path)


def _policy_actions(policy: ActorPolicy, observations, config: EnvConfig,
                    rng: Optional[np.random.Generator], deterministic: bool) -> np.ndarray:
    parts = [
        mappo_mod.act(policy, obs, rng, config.action_bound, deterministic=deterministic)[0]
        for obs in observations
    ]
    return np.concatenate(parts)


def _random_trajectories(config: EnvConfig, n_transitions: int, seed: int) -> list:
    """Roll a uniform-random policy to gather extra dynamics data."""
    rng = np.random.default_rng(seed)
    trajs = []
    total = 0
    while total < n_transitions:
        state, _ = env_mod.reset(config, int(rng.integers(0, 2**62)))
        length = config.episode_length
        states = np.zeros((length + 1, config.state_dim))
        actions = rng.uniform(-config.action_bound, config.action_bound,
                              size=(length, config.action_dim))
        rewards = np.zeros(length)
        costs = np.zeros(length)
        indicators = np.zeros(length)
        states[0] = state
        for t in range(length):
            out = env_mod.step(states[t], actions[t], t, config)
            states[t + 1] = out.next_state
            rewards[t] = out.reward
            costs[t] = out.cost
            indicators[t] = out.cost_indicator
        trajs.append(mappo_mod.Trajectory(states, actions, rewards, costs, indicators))
        total += length
    return trajs


def _transitions_from_trajectories(trajs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    states, actions, next_states = [], [], []
    for traj in trajs:
        states.append(traj.states[:-1])
        actions.append(traj.actions)
        next_states.append(traj.states[1:])
    return np.concatenate(states), np.concatenate(actions), np.concatenate(next_states)


def run_training(config: RunConfig) -> dict:
    """Execute the three training phases and write all run artifacts.

    Returns a dict of artifact paths: actor/critic/predictor checkpoints,
    the metrics JSONL stream, and the buffered transition data.
    """
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    metrics = MetricsWriter(os.path.join(out, "metrics.jsonl"), config.single_thread)
    paths = {
        "actor": os.path.join(out, "actor.json"),
        "critic": os.path.join(out, "critic.json"),
        "predictor": os.path.join(out, "predictor.json"),
        "metrics": metrics.path,
        "transitions": os.path.join(out, "transitions.jsonl"),
        "mpc_diagnostics": os.path.join(out, "mpc_diagnostics.jsonl"),
    }
    try:
        # Phase 1: policy optimization; the rollout buffer is rebuilt every
        # iteration while the transition buffer keeps accumulating.
        trainer = MAPPOTrainer(config.env, config.ppo, config.seed)
        buffer: list = []
        for iteration in range(config.episodes):
            stats = trainer.train_iteration()
            buffer.extend(trainer.last_trajectories)
            metrics.write(
                "train_policy",
                iteration,
                episode_reward=stats["reward"],
                episode_cost=stats["cost"],
                cost_indicator_rate=stats["indicator_rate"],
            )
        _save_actor(trainer.policy, paths["actor"], config.seed, config.env)
        save_checkpoint(trainer.critic.net, paths["critic"],
                        {"seed": config.seed, "role": "critic"})

        # Phase 2: offline dynamics fitting on buffered + random transitions.
        target = config.predictor.dataset_transitions
        rng = np.random.default_rng(config.seed + 1)
        if buffer:
            s_all, a_all, ns_all = _transitions_from_trajectories(buffer)
            n_on = min(target // 2, s_all.shape[0])
            pick = rng.choice(s_all.shape[0], size=n_on, replace=False)
            pick.sort()
            on_policy = (s_all[pick], a_all[pick], ns_all[pick])
        else:
            on_policy = None
            n_on = 0
        random_trajs = _random_trajectories(
            config.env, target - n_on, int(rng.integers(0, 2**62))
        )
        s_r, a_r, ns_r = _transitions_from_trajectories(random_trajs)
        if on_policy is not None:
            dataset = pred_mod.build_dataset(
                np.concatenate([on_policy[0], s_r]),
                np.concatenate([on_policy[1], a_r]),
                np.concatenate([on_policy[2], ns_r]),
            )
        else:
            dataset = pred_mod.build_dataset(s_r, a_r, ns_r)
        pred_mod.save_transitions(paths["transitions"], random_trajs[: max(1, len(random_trajs) // 8)])
        model, history = pred_mod.train_predictor(dataset, config.predictor, config.seed + 2)
        for entry in history:
            metrics.write("train_predictor", entry["epoch"], predictor_mse=entry["val_mse"])
        best = min((e["val_mse"] for e in history), default=float("nan"))
        pred_mod.save_model(model, paths["predictor"],
                            {"seed": config.seed, "val_mse": best,
                             "val_rmse": min((e["val_rmse"] for e in history), default=float("nan"))})

        # Phase 3: filtered control loop with online prediction monitoring.
        _eval_loop(config, trainer.policy, model, metrics, paths["mpc_diagnostics"])
    finally:
        metrics.close()
    return paths


def _eval_loop(config: RunConfig, policy: ActorPolicy, model: DynamicsModel,
               metrics: MetricsWriter, diag_path) -> None:
    bounds = Bounds.from_env(config.env)
    monitor = ErrorMonitor(window_length=max(1, config.max_steps))
    rng = np.random.default_rng(config.seed + 3)
    diag_fh = open(diag_path, "w", encoding="utf-8")

    def log_solver(step: int, diag) -> None:
        diag_fh.write(
            json.dumps(
                {
                    "step": step,
                    "kkt": diag.final_kkt if np.isfinite(diag.final_kkt) else None,
                    "sqp_iters": diag.sqp_iters,
                    "merit_final": diag.final_merit if np.isfinite(diag.final_merit) else None,
                    "fallback": diag.fallback,
                }
            )
            + "\n"
        )

    try:
        _run_eval_episodes(config, policy, model, metrics, bounds, monitor, rng, log_solver)
    finally:
        diag_fh.close()


def _run_eval_episodes(config, policy, model, metrics, bounds, monitor, rng, log_solver):
    steps_done = 0
    episode_idx = 0
    while steps_done < config.max_steps:
        state, obs = env_mod.reset(config.env, int(rng.integers(0, 2**62)))
        ep_reward = 0.0
        ep_cost = 0.0
        ep_ind = 0.0
        kkts: list[float] = []
        iters: list[int] = []
        sq_errors: list[float] = []
        t = 0
        while t < config.env.episode_length and steps_done < config.max_steps:
            policy_action = _policy_actions(policy, obs, config.env, rng,
                                            config.deterministic_eval)
            if config.mpc_enabled and config.mpc_open_loop:
                plan, diag = mpc_mod.sqp_solve(
                    np.tile(policy_action, (config.mpc.horizon, 1)), state, model,
                    bounds, config.mpc, anchor=policy_action,
                )
                kkts.append(diag.final_kkt)
                iters.append(diag.sqp_iters)
                log_solver(steps_done, diag)
                actions = [np.clip(a, bounds.action_low, bounds.action_high) for a in plan]
            elif config.mpc_enabled:
                action, diag = mpc_mod.safety_filter(policy_action, state, model,
                                                     bounds, config.mpc)
                kkts.append(diag.final_kkt)
                iters.append(diag.sqp_iters)
                log_solver(steps_done, diag)
                actions = [action]
            else:
                actions = [policy_action]
            for action in actions:
                if t >= config.env.episode_length or steps_done >= config.max_steps:
                    break
                predicted = pred_mod.predict(model, state, action)
                out = env_mod.step(state, action, t, config.env)
                monitor = update_error_monitor(monitor, predicted, out.next_state)
                sq_errors.append(float(np.sum((predicted - out.next_state) ** 2)))
                state = out.next_state
                obs = out.observations
                ep_reward += out.reward
                ep_cost += out.cost
                ep_ind += out.cost_indicator
                t += 1
                steps_done += 1
        if t:
            finite_kkts = [k for k in kkts if np.isfinite(k)]
            metrics.write(
                "eval",
                episode_idx,
                episode_reward=ep_reward,
                episode_cost=ep_cost,
                cost_indicator_rate=ep_ind / t,
                predictor_mse=float(np.mean(sq_errors)),
                kkt_residual=float(np.mean(finite_kkts)) if finite_kkts else None,
                sqp_iters=float(np.mean(iters)) if iters else None,
            )
        episode_idx += 1


@dataclass
class EpisodeResult:
    reward: float
    cost: float
    indicator_rate: float
    fallbacks: int = 0


def _run_episode(
    policy: ActorPolicy,
    config: RunConfig,
    reset_seed: int,
    model: Optional[DynamicsModel],
    use_filter: bool,
) -> EpisodeResult:
    bounds = Bounds.from_env(config.env)
    state, obs = env_mod.reset(config.env, reset_seed)
    rng = np.random.default_rng(reset_seed + 77)
    total_r = 0.0
    total_c = 0.0
    ind = 0.0
    fallbacks = 0
    for t in range(config.env.episode_length):
        action = _policy_actions(policy, obs, config.env, rng, config.deterministic_eval)
        if use_filter:
            action, diag = mpc_mod.safety_filter(action, state, model, bounds, config.mpc)
            fallbacks += int(diag.fallback)
        out = env_mod.step(state, action, t, config.env)
        state = out.next_state
        obs = out.observations
        total_r += out.reward
        total_c += out.cost
        ind += out.cost_indicator
    return EpisodeResult(total_r, total_c, ind / config.env.episode_length, fallbacks)


def run_comparison(config: RunConfig, checkpoints_dir, episodes: int) -> dict:
    """Paired filtered/unfiltered evaluation over shared episode seeds.

    Writes a per-episode CSV, a summary JSON with means and the relative
    cost reduction, and a paired-cost SVG chart. Returns the summary dict
    augmented with the artifact paths.
    """
    policy = load_actor(os.path.join(checkpoints_dir, "actor.json"))
    model = load_predictor(os.path.join(checkpoints_dir, "predictor.json"))
    out = config.output_dir
    os.makedirs(out, exist_ok=True)

    rows = []
    results_off: list[EpisodeResult] = []
    results_on: list[EpisodeResult] = []
    for ep in range(episodes):
        seed = config.seed + 1000 + ep
        off = _run_episode(policy, config, seed, None, use_filter=False)
        # with mpc_enabled off this is a control experiment: both arms identical
        on = _run_episode(policy, config, seed, model, use_filter=config.mpc_enabled)
        results_off.append(off)
        results_on.append(on)
        rows.append(
            (ep, off.cost, on.cost, off.reward, on.reward, off.indicator_rate, on.indicator_rate)
        )

    csv_path = os.path.join(out, "comparison.csv")
    report.write_csv(
        csv_path,
        ("episode", "cost_off", "cost_on", "reward_off", "reward_on",
         "indicator_rate_off", "indicator_rate_on"),
        rows,
    )
    costs_off = np.array([r.cost for r in results_off])
    costs_on = np.array([r.cost for r in results_on])
    summary = {
        "episodes": episodes,
        "mean_cost_off": float(np.mean(costs_off)),
        "mean_cost_on": float(np.mean(costs_on)),
        "std_cost_off": float(np.std(costs_off)),
        "std_cost_on": float(np.std(costs_on)),
        "reduction_pct": float(
            100.0 * (1.0 - np.mean(costs_on) / np.mean(costs_off))
            if np.mean(costs_off) > 0 else 0.0
        ),
        "mean_reward_off": float(np.mean([r.reward for r in results_off])),
        "mean_reward_on": float(np.mean([r.reward for r in results_on])),
        "indicator_rate_off": float(np.mean([r.indicator_rate for r in results_off])),
        "indicator_rate_on": float(np.mean([r.indicator_rate for r in results_on])),
        "filter_fallbacks": int(sum(r.fallbacks for r in results_on)),
    }
    summary_path = os.path.join(out, "comparison_summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    svg_path = os.path.join(out, "cost_comparison.svg")
    report.line_chart_svg(
        svg_path,
        {"without filter": costs_off.tolist(), "with filter": costs_on.tolist()},
        "Episodic cost, paired seeds",
        x_label="episode",
        y_label="episodic cost",
    )
    summary["csv"] = csv_path
    summary["summary"] = summary_path
    summary["svg"] = svg_path
    return summary


def emit_prediction_error_curve(config: RunConfig, checkpoints_dir, steps: int = 1000) -> dict:
    """Roll the trained policy and log the one-step prediction error per step."""
    policy = load_actor(os.path.join(checkpoints_dir, "actor.json"))
    model = load_predictor(os.path.join(checkpoints_dir, "predictor.json"))
    out = config.output_dir
    os.makedirs(out, exist_ok=True)

    rng = np.random.default_rng(config.seed + 5)
    monitor = ErrorMonitor(window_length=steps)
    errors = []
    state, obs = env_mod.reset(config.env, config.seed + 6)
    t = 0
    for _ in range(steps):
        if t >= config.env.episode_length:
            state, obs = env_mod.reset(config.env, int(rng.integers(0, 2**62)))
            t = 0
        action = _policy_actions(policy, obs, config.env, rng, deterministic=False)
        predicted = pred_mod.predict(model, state, action)
        outcome = env_mod.step(state, action, t, config.env)
        monitor = update_error_monitor(monitor, predicted, outcome.next_state)
        errors.append(float(np.linalg.norm(predicted - outcome.next_state)))
        state = outcome.next_state
        obs = outcome.observations
        t += 1

    csv_path = os.path.join(out, "prediction_error.csv")
    report.write_csv(csv_path, ("step", "error"), list(enumerate(errors)))
    svg_path = os.path.join(out, "prediction_error.svg")
    report.line_chart_svg(
        svg_path,
        {"one-step error": errors},
        "One-step prediction error",
        x_label="step",
        y_label="euclidean error",
    )
    return {
        "csv": csv_path,
        "svg": svg_path,
        "max_error": max(errors) if errors else 0.0,
        "mean_error": float(np.mean(errors)) if errors else 0.0,
        "bound_estimate": monitor.bound_estimate,
    }
