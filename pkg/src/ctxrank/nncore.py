"""Dense feed-forward networks with exact reverse-mode gradients.

Everything works on float64 arrays whose last axis is the feature axis, so a
single vector, a batch of objects and a batch of tasks all go through the
same code path. Gradients are always summed over the leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

SELU = "selu"
LINEAR = "linear"


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


def selu(x):
    x = np.asarray(x, dtype=np.float64)
    # expm1 on the clipped branch avoids overflow warnings for large positive x
    neg = SELU_ALPHA * np.expm1(np.minimum(x, 0.0))
    out = SELU_LAMBDA * np.where(x > 0.0, x, neg)
    return out if out.ndim else float(out)


def selu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return SELU_LAMBDA * np.where(x > 0.0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 32
    l1: float = 0.0
    l2: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.l1 < 0 or self.l2 < 0:
            raise ValueError("l1 and l2 penalties must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass
class GradientTape:
    """Inputs and pre-activations cached by one forward pass."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    used: bool = field(default=False, repr=False)


@dataclass
class DenseNet:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        n_layers = len(self.layer_sizes) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ValueError("parameter lists do not match layer_sizes")
        if len(self.activations) != n_layers:
            raise ValueError("need one activation per layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[k + 1], self.layer_sizes[k])
            if w.shape != expected or b.shape != (expected[0],):
                raise ValueError(f"layer {k}: weight shape {w.shape}, expected {expected}")

    @property
    def input_width(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_width(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        """Parameters in canonical order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        self.weights = list(params[0::2])
        self.biases = list(params[1::2])

    def copy(self) -> DenseNet:
        return DenseNet(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def forward(self, x):
        return net_forward(self, x)

    def backward(self, tape, dy):
        return net_backward(self, tape, dy)

    def __call__(self, x) -> np.ndarray:
        return net_forward(self, x)[0]


def net_init(layer_sizes, seed: int, hidden_activation: str = SELU) -> DenseNet:
    """Variance-scaling normal init (std 1/sqrt(fan_in)), zero biases."""
    layer_sizes = [int(s) for s in layer_sizes]
    if len(layer_sizes) < 2:
        raise ValueError("need at least an input and an output layer")
    if any(s <= 0 for s in layer_sizes):
        raise ValueError(f"layer sizes must be positive, got {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    n_layers = len(layer_sizes) - 1
    activations = [hidden_activation] * (n_layers - 1) + [LINEAR]
    return DenseNet(layer_sizes, weights, biases, activations)


def net_forward(net: DenseNet, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (net.input_width,):
        raise ValueError(f"input width {x.shape[-1:]} does not match net input {net.input_width}")
    inputs, preacts = [], []
    h = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        inputs.append(h)
        z = h @ w.T + b
        preacts.append(z)
        h = selu(z) if act == SELU else z
    return h, GradientTape(inputs, preacts)


def net_backward(net: DenseNet, tape: GradientTape, dy) -> list[np.ndarray]:
    """Gradient of sum(y * dy) w.r.t. every parameter, in ``net.params()`` order."""
    if tape.used:
        raise ValueError("gradient tape already consumed")
    if len(tape.inputs) != len(net.weights):
        raise ValueError("tape was recorded on a net with a different depth")
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != tape.preacts[-1].shape:
        raise ValueError(f"dy shape {dy.shape} does not match output {tape.preacts[-1].shape}")
    tape.used = True
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))  # type: ignore[list-item]
    g = dy
    for k in range(len(net.weights) - 1, -1, -1):
        if net.activations[k] == SELU:
            g = g * selu_grad(tape.preacts[k])
        h = tape.inputs[k]
        g2 = g.reshape(-1, g.shape[-1])
        h2 = h.reshape(-1, h.shape[-1])
        grads[2 * k] = g2.T @ h2
        grads[2 * k + 1] = g2.sum(axis=0)
        if k > 0:
            g = g @ net.weights[k]
    return grads


def input_gradient(net: DenseNet, tape: GradientTape, dy) -> np.ndarray:
    """Gradient of sum(y * dy) w.r.t. the input; does not consume the tape."""
    g = np.asarray(dy, dtype=np.float64)
    for k in range(len(net.weights) - 1, -1, -1):
        if net.activations[k] == SELU:
            g = g * selu_grad(tape.preacts[k])
        g = g @ net.weights[k]
    return g


def penalized(params: list[np.ndarray], grads: list[np.ndarray], cfg: TrainConfig) -> list[np.ndarray]:
    """Add the L1 (subgradient, sign(0)=0) and L2 penalty terms to ``grads``."""
    if cfg.l1 == 0 and cfg.l2 == 0:
        return grads
    return [g + cfg.l2 * 2.0 * p + cfg.l1 * np.sign(p) for p, g in zip(params, grads)]


def nesterov_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    velocity: list[np.ndarray],
    cfg: TrainConfig,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """One Nesterov-momentum update; returns new (params, velocity).

    ``grads`` must already contain the penalty contribution (see ``penalized``).
    """
    if len(params) != len(grads) or len(params) != len(velocity):
        raise ValueError("params, grads and velocity must have the same length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
    mu, lr = cfg.momentum, cfg.learning_rate
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        v_new = mu * v - lr * g
        new_params.append(p + mu * v_new - lr * g)
        new_velocity.append(v_new)
    return new_params, new_velocity
