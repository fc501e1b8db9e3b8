"""Server-orchestrated aggregation and fusion strategies.

Covers plain averaging (FedAvg), the proximal local gradient (FedProx), the
variance-adaptive server step (FedNova), label-aware two-group weighting
(FedLbl), and ensemble distillation onto a fused student (FedDF). All
operations are pure; aggregation expects the complete update list for a
round.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ProtocolError
from .nn import Batch, ModelSpec, forward, grad, sgd_step, softmax


@dataclass(frozen=True)
class ClientUpdate:
    """One client's round result: trained weights, sizes, and displacement."""

    params: np.ndarray
    n_k: int
    num_labels: int
    delta: np.ndarray

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64)
        delta = np.asarray(self.delta, dtype=np.float64)
        if params.shape != delta.shape:
            raise ConfigError("params and delta must have the same length")
        if self.n_k < 1 or self.num_labels < 1:
            raise ConfigError("n_k and num_labels must be >= 1")
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "delta", delta)


@dataclass(frozen=True)
class FedNovaConfig:
    """eta = alpha_scale * max(sqrt(d_t / d_ref), beta_floor)."""

    alpha_scale: float = 0.1
    beta_floor: float = 0.5
    d_ref: float = 0.01

    def __post_init__(self):
        if self.alpha_scale <= 0 or self.beta_floor <= 0 or self.d_ref <= 0:
            raise ConfigError("FedNova parameters must all be positive")


@dataclass(frozen=True)
class FedLblConfig:
    """alpha balances label-count weighting against sample-count weighting;
    nu splits the label-count mass between the label-rich and label-poor
    groups; clients with fewer than label_threshold labels form the poor
    group."""

    alpha: float = 0.5
    nu: float = 0.5
    label_threshold: int = 2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.nu <= 1.0:
            raise ConfigError("alpha and nu must lie in [0, 1]")
        if self.label_threshold < 1:
            raise ConfigError("label_threshold must be >= 1")


def _stack_params(updates: Sequence[ClientUpdate]) -> np.ndarray:
    if not updates:
        raise ProtocolError("aggregation needs at least one client update")
    length = updates[0].params.size
    if any(u.params.size != length for u in updates):
        raise ConfigError("client updates disagree on parameter length")
    return np.stack([u.params for u in updates])


def _ordered_sum(stack: np.ndarray) -> np.ndarray:
    # Accumulate in per-coordinate value order so the result is independent
    # of client order.
    return np.sort(stack, axis=0).sum(axis=0)


def fedavg_aggregate(updates: Sequence[ClientUpdate], weighting: str = "uniform") -> np.ndarray:
    """Average the client weights.

    "uniform" is the plain arithmetic mean over clients; "by_samples"
    weights each client by n_k / sum(n_k). The result is clipped into the
    coordinatewise [min, max] envelope of the inputs, which the exact mean
    lies in anyway, so averaging identical vectors reproduces them bitwise.
    """
    stack = _stack_params(updates)
    if weighting == "uniform":
        mean = _ordered_sum(stack) / len(updates)
    elif weighting == "by_samples":
        weights = np.array([u.n_k for u in updates], dtype=np.float64)
        mean = _ordered_sum(stack * (weights / weights.sum())[:, None])
    else:
        raise ConfigError(f"unknown weighting {weighting!r}")
    return np.clip(mean, stack.min(axis=0), stack.max(axis=0))


def fedprox_gradient(
    spec: ModelSpec,
    params: np.ndarray,
    theta_old: np.ndarray,
    lam: float,
    batch: Batch,
    loss_kind: str = "cross_entropy",
) -> np.ndarray:
    """Gradient of the proximal local objective f(params) + lam/2 * ||params - theta_old||^2."""
    params = np.asarray(params, dtype=np.float64)
    theta_old = np.asarray(theta_old, dtype=np.float64)
    if params.shape != theta_old.shape:
        raise ConfigError("params and theta_old must have the same length")
    if lam < 0:
        raise ConfigError("proximal coefficient must be nonnegative")
    base = grad(spec, params, batch, loss_kind)
    if lam == 0.0:
        return base
    return base + lam * (params - theta_old)


def update_variance(updates: Sequence[ClientUpdate]) -> float:
    """Mean over coordinates of the population variance of client deltas."""
    if not updates:
        raise ProtocolError("update_variance needs at least one client update")
    deltas = np.stack([u.delta for u in updates])
    if deltas.shape[0] == 1:
        return 0.0
    ordered = np.sort(deltas, axis=0)  # client-order independent
    return float(ordered.var(axis=0).mean())


def fednova_lr(d_t: float, cfg: FedNovaConfig) -> float:
    """alpha_scale * max(sqrt(d_t / d_ref), beta_floor)."""
    if d_t < 0:
        raise ConfigError("variance must be nonnegative")
    return cfg.alpha_scale * max(np.sqrt(d_t / cfg.d_ref), cfg.beta_floor)


def fednova_global_step(
    global_params: np.ndarray,
    updates: Sequence[ClientUpdate],
    cfg: FedNovaConfig,
    local_steps: float = 1.0,
    local_eta: float = 1.0,
) -> np.ndarray:
    """One variance-adaptive server step.

    The server holds no labeled loss of its own, so the objective gradient
    is estimated from the displacement the clients actually took:
    -(mean delta) / (local_steps * local_eta). The step size comes from
    fednova_lr over the update variance.
    """
    if not updates:
        raise ProtocolError("fednova_global_step needs at least one client update")
    if local_steps <= 0 or local_eta <= 0:
        raise ConfigError("local_steps and local_eta must be positive")
    global_params = np.asarray(global_params, dtype=np.float64)
    deltas = np.stack([u.delta for u in updates])
    if any(u.delta.size != global_params.size for u in updates):
        raise ConfigError("delta length does not match the global model")
    eta = fednova_lr(update_variance(updates), cfg)
    mean_delta = _ordered_sum(deltas) / len(updates)
    grad_estimate = -mean_delta / (local_steps * local_eta)
    return global_params - eta * grad_estimate


def fedlbl_aggregate(updates: Sequence[ClientUpdate], cfg: FedLblConfig) -> np.ndarray:
    """Two-group label-aware weighted average.

    Clients with at least label_threshold distinct labels form the
    label-rich group M, the rest the label-poor group Z. Client k gets
    weight (1-alpha) * n_k/n plus alpha * nu/|M| (rich) or
    alpha * (1-nu)/|Z| (poor). When one group is empty its alpha mass moves
    to the other, so the weights always sum to 1.
    """
    stack = _stack_params(updates)
    weights = fedlbl_weights(updates, cfg)
    return (stack * weights[:, None]).sum(axis=0)


def fedlbl_weights(updates: Sequence[ClientUpdate], cfg: FedLblConfig) -> np.ndarray:
    """The per-client scalar weights fedlbl_aggregate applies (they sum to 1)."""
    if not updates:
        raise ProtocolError("fedlbl_weights needs at least one client update")
    rich = [u.num_labels >= cfg.label_threshold for u in updates]
    m_count = sum(rich)
    z_count = len(updates) - m_count
    nu = 1.0 if z_count == 0 else (0.0 if m_count == 0 else cfg.nu)
    total = float(sum(u.n_k for u in updates))
    return np.array(
        [
            (1.0 - cfg.alpha) * (u.n_k / total)
            + cfg.alpha * ((nu / m_count) if rich[i] else ((1.0 - nu) / z_count))
            for i, u in enumerate(updates)
        ]
    )


def ensemble_logits(
    spec: ModelSpec, teachers: Sequence[np.ndarray], features: np.ndarray
) -> np.ndarray:
    """Mean teacher logits, accumulated order-independently."""
    if not teachers:
        raise ProtocolError("ensemble needs at least one teacher")
    stack = np.stack([forward(spec, t, features) for t in teachers])
    return _ordered_sum(stack) / len(teachers)


def feddf_fuse(
    teachers: Sequence[np.ndarray],
    student_init: np.ndarray,
    spec: ModelSpec,
    distill_batches: Sequence[Batch],
    eta: float = 0.05,
    steps: int = 50,
) -> np.ndarray:
    """Distill the teacher ensemble into a single student model.

    Each step pulls the student's softmax toward the softmax of the mean
    teacher logits on one distillation batch (KL divergence, teacher side
    fixed), cycling through the batches. Batch labels are ignored: the
    distillation data is treated as unlabeled.
    """
    if not teachers:
        raise ProtocolError("feddf_fuse needs at least one teacher")
    if not distill_batches:
        raise ProtocolError("feddf_fuse needs at least one distillation batch")
    if eta <= 0 or steps < 0:
        raise ConfigError("eta must be positive and steps nonnegative")
    student = np.asarray(student_init, dtype=np.float64)
    targets = [
        softmax(ensemble_logits(spec, teachers, b.features)) for b in distill_batches
    ]
    for j in range(steps):
        batch = distill_batches[j % len(distill_batches)]
        g = grad(spec, student, batch, "kl_match", target=targets[j % len(distill_batches)])
        student = sgd_step(student, g, eta)
    return student
