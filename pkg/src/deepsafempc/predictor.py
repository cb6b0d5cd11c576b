"""Learned one-step dynamics model with multi-step rollout and error monitor.

The network maps normalized (state, action) to a normalized state delta;
predictions add the denormalized delta back onto the input state, so a
zero network is exactly the identity transition. Training is offline
minibatch Adam on the mean squared error of the normalized deltas, with
model selection on a held-out validation split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .neural_core import (
    MLPNet,
    ShapeMismatch,
    _backward_batch,
    _forward_batch,
    adam_step,
    init_adam,
    init_mlp,
    GradientSet,
)

STD_FLOOR = 1e-8


class EmptyDataset(Exception):
    """No transitions available for training."""


@dataclass
class TransitionDataset:
    states: np.ndarray  # (N, state_dim)
    actions: np.ndarray  # (N, action_dim)
    next_states: np.ndarray  # (N, state_dim)
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    delta_std: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]


def build_dataset(states, actions, next_states) -> TransitionDataset:
    """Stack transition arrays and compute the normalization statistics."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    next_states = np.asarray(next_states, dtype=np.float64)
    if len(states) == 0:
        raise EmptyDataset("no transitions")
    if states.shape != next_states.shape or states.shape[0] != actions.shape[0]:
        raise ShapeMismatch(
            f"states {states.shape}, actions {actions.shape}, next {next_states.shape}"
        )
    deltas = next_states - states
    return TransitionDataset(
        states=states,
        actions=actions,
        next_states=next_states,
        state_mean=states.mean(axis=0),
        state_std=np.maximum(states.std(axis=0), STD_FLOOR),
        action_mean=actions.mean(axis=0),
        action_std=np.maximum(actions.std(axis=0), STD_FLOOR),
        delta_std=np.maximum(deltas.std(axis=0), STD_FLOOR),
    )


@dataclass
class DynamicsModel:
    net: MLPNet
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray
    delta_std: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.state_mean.shape[0]

    @property
    def action_dim(self) -> int:
        return self.action_mean.shape[0]


@dataclass
class PredictorHyper:
    hidden: tuple[int, int] = (64, 64)
    lr: float = 1e-3
    lr_decay: float = 1.0
    epochs: int = 80
    batch_size: int = 256
    val_fraction: float = 0.1
    shuffle_each_epoch: bool = True
    adam_epsilon: float = 1e-5
    max_grad_norm: float = 10.0
    dataset_transitions: int = 20000

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


def _normalize_inputs(model_or_ds, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    zs = (states - model_or_ds.state_mean) / model_or_ds.state_std
    za = (actions - model_or_ds.action_mean) / model_or_ds.action_std
    return np.concatenate([zs, za], axis=-1)


def predict_batch(model: DynamicsModel, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    z = _normalize_inputs(model, states, actions)
    return states + _forward_batch(model.net, z)[-1] * model.delta_std


def predict(model: DynamicsModel, state, action) -> np.ndarray:
    """One-step prediction: state plus the denormalized network delta."""
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64)
    if state.shape != (model.state_dim,) or action.shape != (model.action_dim,):
        raise ShapeMismatch(
            f"state {state.shape}, action {action.shape}; model expects "
            f"({model.state_dim},), ({model.action_dim},)"
        )
    return predict_batch(model, state[None, :], action[None, :])[0]


def rollout_horizon(model: DynamicsModel, state, actions) -> np.ndarray:
    """Chain one-step predictions over an action sequence, length T >= 1."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 2 or actions.shape[0] < 1:
        raise ShapeMismatch(f"actions must be (T, action_dim), got {actions.shape}")
    out = np.zeros((actions.shape[0], np.asarray(state).shape[0]))
    current = np.asarray(state, dtype=np.float64)
    for k in range(actions.shape[0]):
        current = predict(model, current, actions[k])
        out[k] = current
    return out


def _mse_normalized(net: MLPNet, z: np.ndarray, y: np.ndarray) -> float:
    pred = _forward_batch(net, z)[-1]
    return float(np.mean((pred - y) ** 2))


def _mse_raw(model: DynamicsModel, ds: TransitionDataset, idx: np.ndarray) -> tuple[float, float]:
    pred = predict_batch(model, ds.states[idx], ds.actions[idx])
    err = pred - ds.next_states[idx]
    per_dim = float(np.mean(err * err))
    rmse = float(np.sqrt(np.mean(np.sum(err * err, axis=1))))
    return per_dim, rmse


def train_predictor(
    dataset: TransitionDataset, hyper: PredictorHyper, seed: int
) -> tuple[DynamicsModel, list[dict]]:
    """Fit the dynamics model; returns the best-validation model and history.

    History entries carry the normalized training objective and the raw
    validation errors: ``train_mse`` (normalized deltas, training split),
    ``val_mse`` (raw units, per dimension), ``val_rmse`` (raw Euclidean).
    """
    if len(dataset) == 0:
        raise EmptyDataset("no transitions")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    perm = rng.permutation(n)
    n_val = max(1, int(round(hyper.val_fraction * n)))
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]
    if train_idx.size == 0:
        raise EmptyDataset("dataset too small for the validation split")

    z_all = _normalize_inputs(dataset, dataset.states, dataset.actions)
    y_all = (dataset.next_states - dataset.states) / dataset.delta_std

    in_dim = z_all.shape[1]
    out_dim = y_all.shape[1]
    net = init_mlp((in_dim, *hyper.hidden, out_dim), seed)
    opt = init_adam(net, hyper.lr, epsilon=hyper.adam_epsilon)

    def model_with(current: MLPNet) -> DynamicsModel:
        return DynamicsModel(
            current,
            dataset.state_mean,
            dataset.state_std,
            dataset.action_mean,
            dataset.action_std,
            dataset.delta_std,
        )

    history: list[dict] = []
    best_val = np.inf
    best_net = net.copy()
    order = train_idx.copy()
    for epoch in range(hyper.epochs):
        if hyper.shuffle_each_epoch:
            order = rng.permutation(train_idx)
        for start in range(0, order.size, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            acts = _forward_batch(net, z_all[idx])
            err = acts[-1] - y_all[idx]
            grad = 2.0 * err / err.size
            wg, bg, _ = _backward_batch(net, acts, grad)
            net, opt = adam_step(
                net, GradientSet(wg, bg, np.zeros(in_dim)), opt, hyper.max_grad_norm
            )
        opt = replace(opt, lr=opt.lr * hyper.lr_decay)
        train_mse = _mse_normalized(net, z_all[train_idx], y_all[train_idx])
        val_mse, val_rmse = _mse_raw(model_with(net), dataset, val_idx)
        history.append(
            {"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse, "val_rmse": val_rmse}
        )
        if val_mse < best_val:
            best_val = val_mse
            best_net = net.copy()
    return model_with(best_net), history


@dataclass(frozen=True)
class ErrorMonitor:
    """Sliding window of one-step prediction error norms."""

    window_length: int
    window: tuple[float, ...] = ()

    def __post_init__(self):
        if self.window_length < 1:
            raise ValueError("window_length must be >= 1")

    @property
    def window_max(self) -> float:
        return max(self.window) if self.window else 0.0

    @property
    def window_mean(self) -> float:
        return float(np.mean(self.window)) if self.window else 0.0

    @property
    def bound_estimate(self) -> float:
        return self.window_max


def update_error_monitor(monitor: ErrorMonitor, predicted, actual) -> ErrorMonitor:
    """Push the Euclidean error between prediction and observation."""
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise ShapeMismatch(f"predicted {predicted.shape} vs actual {actual.shape}")
    err = float(np.linalg.norm(predicted - actual))
    window = (monitor.window + (err,))[-monitor.window_length :]
    return ErrorMonitor(monitor.window_length, window)


def save_model(model: DynamicsModel, path, extra_meta: Optional[dict] = None) -> None:
    from .neural_core import save_checkpoint

    meta = {
        "role": "predictor",
        "state_mean": model.state_mean.tolist(),
        "state_std": model.state_std.tolist(),
        "action_mean": model.action_mean.tolist(),
        "action_std": model.action_std.tolist(),
        "delta_std": model.delta_std.tolist(),
    }
    meta.update(extra_meta or {})
    save_checkpoint(model.net, path, meta)


def load_model(path) -> DynamicsModel:
    from .neural_core import load_checkpoint

    net, meta = load_checkpoint(path)
    return DynamicsModel(
        net,
        np.asarray(meta["state_mean"], dtype=np.float64),
        np.asarray(meta["state_std"], dtype=np.float64),
        np.asarray(meta["action_mean"], dtype=np.float64),
        np.asarray(meta["action_std"], dtype=np.float64),
        np.asarray(meta["delta_std"], dtype=np.float64),
    )


def save_transitions(path, trajectories) -> None:
    """Write episodes as JSONL rows; trailing state rows carry null action."""
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            length = traj.actions.shape[0]
            for t in range(length):
                fh.write(
                    json.dumps(
                        {
                            "t": t,
                            "state": traj.states[t].tolist(),
                            "action": traj.actions[t].tolist(),
                            "reward": float(traj.rewards[t]),
                            "cost": float(traj.costs[t]),
                            "indicator": int(traj.indicators[t]),
                        }
                    )
                    + "\n"
                )
            fh.write(
                json.dumps(
                    {
                        "t": length,
                        "state": traj.states[length].tolist(),
                        "action": None,
                        "reward": None,
                        "cost": None,
                        "indicator": None,
                    }
                )
                + "\n"
            )


def load_transitions(path) -> TransitionDataset:
    """Rebuild (state, action, next_state) triples from consecutive rows."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    states, actions, next_states = [], [], []
    for prev, nxt in zip(rows, rows[1:]):
        if nxt["t"] == prev["t"] + 1 and prev["action"] is not None:
            states.append(prev["state"])
            actions.append(prev["action"])
            next_states.append(nxt["state"])
    if not states:
        raise EmptyDataset(f"no consecutive transitions in {path}")
    return build_dataset(np.array(states), np.array(actions), np.array(next_states))
