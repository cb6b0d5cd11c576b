"""Minimal feed-forward network with exact backpropagation and Adam.

One fixed topology: dense layers, tanh on hidden layers, identity output.
Forward/backward are pure functions of (net, input); parameter updates are
functional (they return a new net). The same stack serves the policy, the
value function, and the dynamics predictor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class InvalidArchitecture(Exception):
    """Layer size list is empty, too short, or contains non-positive sizes."""


class ShapeMismatch(Exception):
    """An input or gradient does not match the network's dimensions."""


class NonFiniteGradient(Exception):
    """A gradient entry is nan or inf."""


@dataclass
class MLPNet:
    """Dense layers stored as (weight, bias) pairs, weight shape (out, in)."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "tanh"
    output_activation: str = "identity"

    @property
    def layer_sizes(self) -> list[int]:
        sizes = [self.layers[0][0].shape[1]]
        sizes.extend(w.shape[0] for w, _ in self.layers)
        return sizes

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def copy(self) -> "MLPNet":
        return MLPNet(
            [(w.copy(), b.copy()) for w, b in self.layers],
            self.activation,
            self.output_activation,
        )


@dataclass
class GradientSet:
    """Parameter gradients mirroring an MLPNet, plus the input gradient.

    ``log_std_grad`` is an optional rider used by Gaussian policies whose
    log-stddev parameters live outside the net.
    """

    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]
    input_gradient: np.ndarray
    log_std_grad: Optional[np.ndarray] = None


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus step counter."""

    m: list[tuple[np.ndarray, np.ndarray]]
    v: list[tuple[np.ndarray, np.ndarray]]
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-5


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    g = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_mlp(layer_sizes: Sequence[int], seed: int, final_gain: float = 1.0) -> MLPNet:
    """Build a net with seeded orthogonal weights and zero biases.

    Hidden weights use gain sqrt(2); the output layer uses ``final_gain``
    (policies pass 0.01 to start near-deterministic). The same
    (layer_sizes, seed, final_gain) always yields bit-identical parameters.
    """
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
        raise InvalidArchitecture(f"bad layer sizes {sizes}")
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(sizes) - 1):
        gain = final_gain if i == len(sizes) - 2 else np.sqrt(2.0)
        w = _orthogonal(rng, sizes[i + 1], sizes[i], gain)
        b = np.zeros(sizes[i + 1])
        layers.append((w, b))
    return MLPNet(layers)


def _forward_batch(net: MLPNet, x: np.ndarray) -> list[np.ndarray]:
    """Return the list of layer activations, [input, h1, ..., output]."""
    acts = [x]
    last = len(net.layers) - 1
    for i, (w, b) in enumerate(net.layers):
        z = acts[-1] @ w.T + b
        acts.append(z if i == last else np.tanh(z))
    return acts


def mlp_forward(net: MLPNet, x) -> np.ndarray:
    """Evaluate the network on a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != net.input_dim:
        raise ShapeMismatch(f"input shape {x.shape}, expected ({net.input_dim},)")
    return _forward_batch(net, x[None, :])[-1][0]


def _backward_batch(
    net: MLPNet, acts: list[np.ndarray], out_grad: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Backpropagate a batch of output gradients through cached activations.

    Parameter gradients are summed over the batch; the returned input
    gradient keeps one row per batch element.
    """
    n_layers = len(net.layers)
    weight_grads: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    bias_grads: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
    delta = out_grad
    for i in range(n_layers - 1, -1, -1):
        w, _ = net.layers[i]
        weight_grads[i] = delta.T @ acts[i]
        bias_grads[i] = delta.sum(axis=0)
        delta = delta @ w
        if i > 0:
            delta = delta * (1.0 - acts[i] ** 2)
    return weight_grads, bias_grads, delta


def mlp_backward(net: MLPNet, x, output_grad) -> GradientSet:
    """Exact reverse-mode gradients for all parameters and for the input.

    Calling this once per output basis vector assembles the full input
    Jacobian row by row.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(output_grad, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != net.input_dim:
        raise ShapeMismatch(f"input shape {x.shape}, expected ({net.input_dim},)")
    if g.ndim != 1 or g.shape[0] != net.output_dim:
        raise ShapeMismatch(f"output_grad shape {g.shape}, expected ({net.output_dim},)")
    acts = _forward_batch(net, x[None, :])
    wg, bg, ig = _backward_batch(net, acts, g[None, :])
    return GradientSet(wg, bg, ig[0])


def mlp_input_jacobian(net: MLPNet, x) -> np.ndarray:
    """Jacobian d output / d input at x, shape (output_dim, input_dim).

    Equivalent to stacking mlp_backward input gradients over output basis
    vectors, but shares one forward pass.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != net.input_dim:
        raise ShapeMismatch(f"input shape {x.shape}, expected ({net.input_dim},)")
    acts = _forward_batch(net, x[None, :])
    jac = np.eye(net.output_dim)
    for i in range(len(net.layers) - 1, -1, -1):
        w, _ = net.layers[i]
        jac = jac @ w
        if i > 0:
            jac = jac * (1.0 - acts[i][0] ** 2)
    return jac


def init_adam(net: MLPNet, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-5) -> AdamState:
    m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in net.layers]
    v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in net.layers]
    return AdamState(m, v, 0, lr, beta1, beta2, epsilon)


def gradient_global_norm(grads: GradientSet) -> float:
    total = 0.0
    for gw, gb in zip(grads.weight_grads, grads.bias_grads):
        total += float(np.sum(gw * gw)) + float(np.sum(gb * gb))
    if grads.log_std_grad is not None:
        total += float(np.sum(grads.log_std_grad ** 2))
    return float(np.sqrt(total))


def adam_step(
    net: MLPNet, grads: GradientSet, state: AdamState, max_grad_norm: float
) -> tuple[MLPNet, AdamState]:
    """Clip gradients by global norm, then apply a bias-corrected Adam update.

    Returns the updated net and optimizer state; the inputs are not mutated.
    """
    if len(grads.weight_grads) != len(net.layers):
        raise ShapeMismatch("gradient layer count does not match net")
    for (w, b), gw, gb in zip(net.layers, grads.weight_grads, grads.bias_grads):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ShapeMismatch(f"gradient shape {gw.shape}/{gb.shape} vs {w.shape}/{b.shape}")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NonFiniteGradient("non-finite gradient entry")

    norm = gradient_global_norm(
        GradientSet(grads.weight_grads, grads.bias_grads, grads.input_gradient)
    )
    scale = 1.0 if norm <= max_grad_norm else max_grad_norm / norm

    t = state.step_count + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_layers = []
    new_m = []
    new_v = []
    for (w, b), (mw, mb), (vw, vb), gw, gb in zip(
        net.layers, state.m, state.v, grads.weight_grads, grads.bias_grads
    ):
        gw = gw * scale
        gb = gb * scale
        mw = state.beta1 * mw + (1.0 - state.beta1) * gw
        mb = state.beta1 * mb + (1.0 - state.beta1) * gb
        vw = state.beta2 * vw + (1.0 - state.beta2) * gw * gw
        vb = state.beta2 * vb + (1.0 - state.beta2) * gb * gb
        w = w - state.lr * (mw / bc1) / (np.sqrt(vw / bc2) + state.epsilon)
        b = b - state.lr * (mb / bc1) / (np.sqrt(vb / bc2) + state.epsilon)
        new_layers.append((w, b))
        new_m.append((mw, mb))
        new_v.append((vw, vb))
    new_net = MLPNet(new_layers, net.activation, net.output_activation)
    new_state = AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.epsilon)
    return new_net, new_state


def save_checkpoint(net: MLPNet, path, meta: Optional[dict] = None) -> None:
    """Write the net as JSON; float64 values round-trip bit-exactly."""
    doc = {
        "arch": net.layer_sizes,
        "activation": net.activation,
        "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in net.layers],
        "meta": meta or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[MLPNet, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    layers = [
        (np.asarray(entry["w"], dtype=np.float64), np.asarray(entry["b"], dtype=np.float64))
        for entry in doc["layers"]
    ]
    net = MLPNet(layers, doc.get("activation", "tanh"))
    if net.layer_sizes != list(doc["arch"]):
        raise ValueError(f"checkpoint arch {doc['arch']} does not match layer shapes")
    return net, doc.get("meta", {})
