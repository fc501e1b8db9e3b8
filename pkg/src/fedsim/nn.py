"""Minimal MLP substrate: flat parameter vectors, losses, backprop, SGD.

All model weights live in a single flat float64 vector so that averaging,
segment exchange, and distance computations are plain array arithmetic.
Every function here is pure: inputs are never mutated and identical inputs
produce bitwise identical outputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# Probabilities are clamped here before logs / KL denominators; the
# perturbation stays far below any test tolerance while avoiding infinities.
PROB_FLOOR = 1e-12

LOSS_KINDS = ("cross_entropy", "mse_onehot", "kl_match")


@dataclass(frozen=True)
class ModelSpec:
    """Fully connected ReLU network with a softmax-classified output.

    layer_dims = (input_dim, hidden..., num_classes). Parameters are packed
    layer by layer as (weights, biases), C-order flattened.
    """

    layer_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ConfigError("ModelSpec needs at least input and output dims")
        if any(d < 1 for d in dims):
            raise ConfigError(f"layer dims must be positive, got {dims}")
        if dims[-1] < 2:
            raise ConfigError("output layer needs at least 2 classes")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def param_count(self) -> int:
        return sum(
            (fan_in + 1) * fan_out
            for fan_in, fan_out in zip(self.layer_dims, self.layer_dims[1:])
        )


@dataclass(frozen=True)
class Batch:
    """A mini-batch: (n, m) feature matrix and n integer class labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ConfigError(f"batch features must be a nonempty matrix, got shape {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise ConfigError("batch needs one label per feature row")
        if not np.isfinite(feats).all():
            raise ConfigError("batch features must be finite")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Seeded uniform init: each layer drawn from [-s, s], s = sqrt(6 / (fan_in + fan_out))."""
    chunks = []
    for fan_in, fan_out in zip(spec.layer_dims, spec.layer_dims[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-s, s, size=fan_in * fan_out))
        chunks.append(rng.uniform(-s, s, size=fan_out))
    return np.concatenate(chunks)


def _check_params(spec: ModelSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != spec.param_count:
        raise ConfigError(
            f"expected {spec.param_count} parameters for layer dims {spec.layer_dims}, "
            f"got {params.size}"
        )
    return params


def unpack_params(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of the flat vector as per-layer (weights, biases) pairs."""
    params = _check_params(spec, params)
    layers = []
    pos = 0
    for fan_in, fan_out in zip(spec.layer_dims, spec.layer_dims[1:]):
        w = params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos:pos + fan_out]
        pos += fan_out
        layers.append((w, b))
    return layers


def _forward_cached(spec, params, features):
    """Forward pass keeping activations and pre-activations for backprop."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise ConfigError(
            f"features must be (n, {spec.input_dim}), got shape {features.shape}"
        )
    layers = unpack_params(spec, params)
    activations = [features]
    pre_acts = []
    a = features
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        pre_acts.append(z)
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        activations.append(a)
    return layers, activations, pre_acts


def forward(spec: ModelSpec, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Logits (n, num_classes) for a feature matrix; deterministic and pure."""
    _, activations, _ = _forward_cached(spec, params, features)
    return activations[-1]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis; rows sum to 1."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """sum_i p_i * log(p_i / q_i) with 0*log(0/q) = 0 and q clamped at PROB_FLOOR."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ConfigError(f"distributions must share a shape, got {p.shape} vs {q.shape}")
    q = np.maximum(q, PROB_FLOOR)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def _kl_rows(targets: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Per-row KL(target || probs) for matched (n, L) matrices."""
    q = np.maximum(probs, PROB_FLOOR)
    terms = np.where(targets > 0, targets * np.log(np.maximum(targets, PROB_FLOOR) / q), 0.0)
    return terms.sum(axis=1)


def _onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ConfigError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return np.eye(num_classes)[labels]


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean over rows of -log(probability of the true class)."""
    probs = np.asarray(probs, dtype=np.float64)
    _onehot(labels, probs.shape[1])
    picked = probs[np.arange(probs.shape[0]), np.asarray(labels)]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def mse_onehot(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean over rows of the squared distance between probs and the one-hot truth."""
    probs = np.asarray(probs, dtype=np.float64)
    onehot = _onehot(labels, probs.shape[1])
    return float(np.mean(((probs - onehot) ** 2).sum(axis=1)))


def loss_value(
    spec: ModelSpec,
    params: np.ndarray,
    batch: Batch,
    loss_kind: str,
    target: np.ndarray | None = None,
) -> float:
    """Scalar batch-mean loss of the given kind.

    kl_match measures KL(target || softmax(logits)) per row, averaged over
    the batch; `target` must be an (n, num_classes) matrix of row
    distributions and the batch labels are ignored.
    """
    probs = softmax(forward(spec, params, batch.features))
    if loss_kind == "cross_entropy":
        return cross_entropy(probs, batch.labels)
    if loss_kind == "mse_onehot":
        return mse_onehot(probs, batch.labels)
    if loss_kind == "kl_match":
        target = _check_target(target, probs.shape)
        return float(np.mean(_kl_rows(target, probs)))
    raise ConfigError(f"unknown loss kind {loss_kind!r}, expected one of {LOSS_KINDS}")


def _check_target(target, shape):
    if target is None:
        raise ConfigError("kl_match loss needs a target distribution matrix")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != shape:
        raise ConfigError(f"target must have shape {shape}, got {target.shape}")
    return target


def grad(
    spec: ModelSpec,
    params: np.ndarray,
    batch: Batch,
    loss_kind: str = "cross_entropy",
    target: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of the batch-mean loss with respect to every parameter.

    Backprop is hand-specified for the fixed MLP shape. Composite
    objectives (proximal anchors, frozen-partner KL terms) are built by
    callers summing gradients from separate invocations.
    """
    layers, activations, pre_acts = _forward_cached(spec, params, batch.features)
    n = batch.features.shape[0]
    probs = softmax(activations[-1])

    if loss_kind == "cross_entropy":
        delta = (probs - _onehot(batch.labels, spec.num_classes)) / n
    elif loss_kind == "mse_onehot":
        g = 2.0 * (probs - _onehot(batch.labels, spec.num_classes)) / n
        delta = probs * (g - (g * probs).sum(axis=1, keepdims=True))
    elif loss_kind == "kl_match":
        target = _check_target(target, probs.shape)
        delta = (probs - target) / n
    else:
        raise ConfigError(f"unknown loss kind {loss_kind!r}, expected one of {LOSS_KINDS}")

    grads: list[np.ndarray] = []
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads.append(delta.sum(axis=0))           # bias
        grads.append((activations[i].T @ delta).ravel())  # weights
        if i > 0:
            delta = (delta @ w.T) * (pre_acts[i - 1] > 0)
    return np.concatenate(grads[::-1])


def sgd_step(
    params: np.ndarray,
    gradient: np.ndarray,
    eta: float,
    weight_decay: float = 0.0,
) -> np.ndarray:
    """params - eta * (gradient + weight_decay * params), as a fresh vector."""
    params = np.asarray(params, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if params.shape != gradient.shape:
        raise ConfigError(
            f"params and gradient must match, got {params.shape} vs {gradient.shape}"
        )
    return params - eta * (gradient + weight_decay * params)
