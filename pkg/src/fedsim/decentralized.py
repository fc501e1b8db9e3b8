"""Serverless peer-to-peer training rounds.

Each round, Q sender clients train locally and hand their weights to Q
disjoint receiver clients. Receivers either run mutual knowledge transfer
(two models teaching each other batch by batch), plain averaging of shared
and local weights, or a half-and-half weight segment exchange. Only the 2Q
participants' states change; everyone else's state is preserved bitwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ProtocolError
from .nn import Batch, ModelSpec, forward, grad, sgd_step, softmax

ClientArrays = tuple[np.ndarray, np.ndarray]  # (features, labels)


@dataclass(frozen=True)
class PeerRoundPlan:
    """Disjoint sender/receiver id sets, paired by position."""

    senders: tuple[int, ...]
    receivers: tuple[int, ...]

    def __post_init__(self):
        if len(self.senders) != len(self.receivers) or not self.senders:
            raise ConfigError("plan needs equally many senders and receivers, at least one each")
        if set(self.senders) & set(self.receivers):
            raise ConfigError("senders and receivers must not overlap")
        if len(set(self.senders)) != len(self.senders) or len(set(self.receivers)) != len(self.receivers):
            raise ConfigError("duplicate client in plan")

    @property
    def pairs(self) -> tuple[tuple[int, int], ...]:
        return tuple(zip(self.senders, self.receivers))

    @property
    def participants(self) -> tuple[int, ...]:
        return tuple(sorted(self.senders + self.receivers))


@dataclass(frozen=True)
class MutualLossConfig:
    """Rates and loss shape for the simultaneous two-model update.

    The classification term defaults to the squared distance between the
    softmax predictions and the one-hot truth; kl_weight scales the
    teach-each-other KL terms (0 disables them).
    """

    eta_shared: float = 0.1
    eta_local: float = 0.1
    kl_weight: float = 1.0
    classification_loss: str = "mse_onehot"

    def __post_init__(self):
        if self.eta_shared < 0 or self.eta_local < 0 or self.kl_weight < 0:
            raise ConfigError("rates and kl_weight must be nonnegative")
        if self.classification_loss not in ("mse_onehot", "cross_entropy"):
            raise ConfigError(f"unsupported classification loss {self.classification_loss!r}")


@dataclass(frozen=True)
class PeerTrainConfig:
    """Local-training knobs shared by the decentralized round functions."""

    local_epochs: int = 1
    batch_size: int = 64
    eta: float = 0.1
    weight_decay: float = 0.0
    mutual: MutualLossConfig = field(default_factory=MutualLossConfig)

    def __post_init__(self):
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("local_epochs and batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")


def plan_peer_round(num_clients: int, q: int, rng: np.random.Generator) -> PeerRoundPlan:
    """Seeded draw of 2q distinct clients, split into senders and receivers."""
    if q < 1:
        raise ConfigError("q must be >= 1")
    if 2 * q > num_clients:
        raise ConfigError(f"2q = {2 * q} exceeds the {num_clients} available clients")
    picks = rng.permutation(num_clients)[: 2 * q]
    return PeerRoundPlan(
        senders=tuple(int(i) for i in picks[:q]),
        receivers=tuple(int(i) for i in picks[q:]),
    )


def mutual_transfer_step(
    spec: ModelSpec,
    w_shared: np.ndarray,
    w_local: np.ndarray,
    batch: Batch,
    cfg: MutualLossConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """One simultaneous update of both models on one mini-batch.

    Both prediction sets are taken from the pre-step weights; each model's
    KL term treats the partner's predictions as constants. The shared model
    descends classification(vs truth) + KL(partner || self), and the local
    model the mirror image.
    """
    preds_shared = softmax(forward(spec, w_shared, batch.features))
    preds_local = softmax(forward(spec, w_local, batch.features))

    g_shared = grad(spec, w_shared, batch, cfg.classification_loss)
    g_local = grad(spec, w_local, batch, cfg.classification_loss)
    if cfg.kl_weight != 0.0:
        g_shared = g_shared + cfg.kl_weight * grad(
            spec, w_shared, batch, "kl_match", target=preds_local
        )
        g_local = g_local + cfg.kl_weight * grad(
            spec, w_local, batch, "kl_match", target=preds_shared
        )
    return (
        sgd_step(w_shared, g_shared, cfg.eta_shared),
        sgd_step(w_local, g_local, cfg.eta_local),
    )


def _shuffled_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _local_pass(
    spec: ModelSpec,
    params: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    cfg: PeerTrainConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Plain mini-batch SGD for a sender's local training."""
    for _ in range(cfg.local_epochs):
        for idx in _shuffled_batches(len(labels), cfg.batch_size, rng):
            batch = Batch(features[idx], labels[idx])
            g = grad(spec, params, batch, cfg.mutual.classification_loss)
            params = sgd_step(params, g, cfg.eta, cfg.weight_decay)
    return params


def _check_round_args(states, plan, client_data):
    for cid in plan.senders + plan.receivers:
        if cid < 0 or cid >= len(states):
            raise ProtocolError(f"plan references client {cid} outside the state list")
        if cid not in client_data or len(client_data[cid][1]) == 0:
            raise ProtocolError(f"participating client {cid} has no data")


def defkt_round(
    spec: ModelSpec,
    states: Sequence[np.ndarray],
    plan: PeerRoundPlan,
    client_data: Mapping[int, ClientArrays],
    cfg: PeerTrainConfig,
    rng_for: Callable[[int], np.random.Generator],
) -> list[np.ndarray]:
    """Mutual-knowledge-transfer round.

    Senders train locally and keep the result. Each receiver sweeps one
    epoch of its own mini-batches, updating the received shared weights and
    its local weights simultaneously, then adopts the updated shared
    weights as its new state.
    """
    _check_round_args(states, plan, client_data)
    new_states = list(states)
    for sender, receiver in plan.pairs:
        feats_s, labels_s = client_data[sender]
        trained = _local_pass(spec, states[sender], feats_s, labels_s, cfg, rng_for(sender))
        new_states[sender] = trained

        w_shared, w_local = trained, states[receiver]
        feats_r, labels_r = client_data[receiver]
        for idx in _shuffled_batches(len(labels_r), cfg.batch_size, rng_for(receiver)):
            w_shared, w_local = mutual_transfer_step(
                spec, w_shared, w_local, Batch(feats_r[idx], labels_r[idx]), cfg.mutual
            )
        new_states[receiver] = w_shared
    return new_states


def fullavg_round(
    spec: ModelSpec,
    states: Sequence[np.ndarray],
    plan: PeerRoundPlan,
    client_data: Mapping[int, ClientArrays],
    cfg: PeerTrainConfig,
    rng_for: Callable[[int], np.random.Generator],
) -> list[np.ndarray]:
    """Baseline: each receiver averages the shared weights with its own."""
    _check_round_args(states, plan, client_data)
    new_states = list(states)
    for sender, receiver in plan.pairs:
        feats_s, labels_s = client_data[sender]
        trained = _local_pass(spec, states[sender], feats_s, labels_s, cfg, rng_for(sender))
        new_states[sender] = trained
        new_states[receiver] = (trained + states[receiver]) / 2.0
    return new_states


def combo_round(
    spec: ModelSpec,
    states: Sequence[np.ndarray],
    plan: PeerRoundPlan,
    client_data: Mapping[int, ClientArrays],
    cfg: PeerTrainConfig,
    rng_for: Callable[[int], np.random.Generator],
) -> list[np.ndarray]:
    """Baseline: half-and-half weight segment exchange.

    The sender transmits the second half of its (trained) weights, the
    receiver the first half of its current weights. Each side averages its
    own values with the received segment on the overlapping coordinates and
    leaves the rest unchanged.
    """
    _check_round_args(states, plan, client_data)
    if len(states[0]) < 2:
        raise ConfigError("combo needs at least two parameters to split")
    new_states = list(states)
    for sender, receiver in plan.pairs:
        feats_s, labels_s = client_data[sender]
        trained = _local_pass(spec, states[sender], feats_s, labels_s, cfg, rng_for(sender))
        half = len(trained) // 2
        current = states[receiver]

        sender_new = trained.copy()
        sender_new[:half] = (trained[:half] + current[:half]) / 2.0
        receiver_new = current.copy()
        receiver_new[half:] = (current[half:] + trained[half:]) / 2.0

        new_states[sender] = sender_new
        new_states[receiver] = receiver_new
    return new_states
