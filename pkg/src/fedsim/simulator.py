"""Experiment orchestration: client sampling, local training, rounds, metrics.

A Simulation is a pure function of its SimConfig: dataset generation,
partitioning, initialization, client sampling, and every training step draw
from streams keyed by (master seed, purpose, round, client), so repeated
runs and threaded runs produce bit-identical results.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as datamod
from .algorithms import (
    ClientUpdate,
    FedLblConfig,
    FedNovaConfig,
    fedavg_aggregate,
    feddf_fuse,
    fedlbl_aggregate,
    fednova_global_step,
    fedprox_gradient,
)
from .decentralized import (
    MutualLossConfig,
    PeerTrainConfig,
    combo_round,
    defkt_round,
    fullavg_round,
    plan_peer_round,
)
from .errors import ConfigError, ProtocolError
from .nn import Batch, ModelSpec, cross_entropy, forward, grad, init_params, sgd_step, softmax
from .rng import (
    TAG_CLIENT,
    TAG_CLIENT_SPLIT,
    TAG_DATA,
    TAG_DISTILL,
    TAG_INIT,
    TAG_PARTITION,
    TAG_PLAN,
    TAG_SAMPLE,
    TAG_TEST_SPLIT,
    derive_rng,
    derive_seed,
)

CENTRALIZED_ALGORITHMS = ("fedavg", "fedprox", "fednova", "fedlbl", "feddf")
DECENTRALIZED_ALGORITHMS = ("defkt", "fullavg", "combo")
ALGORITHMS = CENTRALIZED_ALGORITHMS + DECENTRALIZED_ALGORITHMS

PARTITION_STRATEGIES = (
    "iid",
    "label_quantity",
    "label_dirichlet",
    "quantity_dirichlet",
    "noise",
    "cube_pairs",
    "by_source",
)

VALIDATION_FRACTION = 0.2  # per-client holdout, logged but never trained on


@dataclass(frozen=True)
class DataConfig:
    """Synthetic dataset parameters; `kind` is "blobs" or "cube"."""

    kind: str = "blobs"
    num_classes: int = 4
    per_class: int = 100
    dim: int = 8
    spread: float = 0.5
    scale: float = 1.0
    per_octant: int = 50
    num_sources: int = 0
    source_shift: float = 0.0
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.kind not in ("blobs", "cube"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class PartitionConfig:
    strategy: str = "iid"
    labels_per_client: int = 1
    beta: float = 0.5
    sigma_max: float = 0.5

    def __post_init__(self):
        if self.strategy not in PARTITION_STRATEGIES:
            raise ConfigError(
                f"unknown partition strategy {self.strategy!r}, "
                f"expected one of {PARTITION_STRATEGIES}"
            )

    def label(self) -> str:
        if self.strategy == "label_quantity":
            return f"label_quantity_q{self.labels_per_client}"
        if self.strategy in ("label_dirichlet", "quantity_dirichlet"):
            return f"{self.strategy}_b{self.beta:g}"
        if self.strategy == "noise":
            return f"noise_s{self.sigma_max:g}"
        return self.strategy


@dataclass(frozen=True)
class DistillConfig:
    """Ensemble-distillation knobs: fusion steps, rate, and the unlabeled
    distillation set (a held-out synthetic set with its own derived seed)."""

    steps: int = 50
    eta: float = 0.05
    batch_size: int = 64
    per_class: int = 32

    def __post_init__(self):
        if self.steps < 0 or self.eta <= 0 or self.batch_size < 1 or self.per_class < 1:
            raise ConfigError("invalid distillation configuration")


@dataclass(frozen=True)
class SimConfig:
    """Everything a run needs; two runs with equal configs match bitwise."""

    algorithm: str = "fedavg"
    num_clients: int = 10
    participation: float = 0.2
    local_epochs: int = 1
    batch_size: int = 64
    rounds: int = 50
    local_eta: float = 0.1
    weight_decay: float = 0.004
    hidden_dims: tuple[int, ...] = (16,)
    weighting: str = "uniform"
    prox_lambda: float = 0.0
    fednova: FedNovaConfig = field(default_factory=FedNovaConfig)
    fedlbl: FedLblConfig = field(default_factory=FedLblConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    peer_q: int = 2
    mutual: MutualLossConfig = field(default_factory=MutualLossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    master_seed: int = 0
    eval_stride: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}, expected one of {ALGORITHMS}")
        if self.num_clients < 1 or self.rounds < 1 or self.local_epochs < 1:
            raise ConfigError("num_clients, rounds and local_epochs must be >= 1")
        if self.batch_size < 1 or self.eval_stride < 1 or self.workers < 1:
            raise ConfigError("batch_size, eval_stride and workers must be >= 1")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError("participation must lie in (0, 1]")
        if self.local_eta <= 0 or self.weight_decay < 0 or self.prox_lambda < 0:
            raise ConfigError("local_eta must be positive; decay and lambda nonnegative")
        if self.is_decentralized:
            if 2 * self.peer_q > self.num_clients:
                raise ConfigError(
                    f"decentralized rounds need 2q <= num_clients, got q={self.peer_q}, "
                    f"num_clients={self.num_clients}"
                )
        elif math.floor(self.participation * self.num_clients) < 1:
            raise ConfigError("participation * num_clients must select at least one client")
        if self.partition.strategy == "cube_pairs" and self.data.kind != "cube":
            raise ConfigError("cube_pairs partitioning needs data.kind = cube")
        if self.partition.strategy == "by_source" and self.data.num_sources < self.num_clients:
            raise ConfigError("by_source partitioning needs data.num_sources >= num_clients")

    @property
    def is_decentralized(self) -> bool:
        return self.algorithm in DECENTRALIZED_ALGORITHMS


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    test_accuracy: float
    test_loss: float
    participants: tuple[int, ...]
    wall_time: float
    val_accuracy: float


@dataclass
class MetricsLog:
    records: list[RoundRecord]

    def accuracies(self) -> list[float]:
        return [r.test_accuracy for r in self.records]

    def final_accuracy(self) -> float:
        return self.records[-1].test_accuracy


def last_window_std(values, fraction: float = 0.2) -> float:
    """Population std over the trailing `fraction` of a series (min 1 point)."""
    values = list(values)
    if not values:
        raise ConfigError("empty series")
    window = max(1, math.ceil(fraction * len(values)))
    return float(np.std(values[-window:]))


def sample_clients(num_clients: int, participation: float, round_index: int, master_seed: int) -> tuple[int, ...]:
    """floor(participation * num_clients) distinct ids, seeded per round."""
    count = math.floor(participation * num_clients)
    if count < 1:
        raise ConfigError("participation * num_clients must select at least one client")
    rng = derive_rng(master_seed, TAG_SAMPLE, round_index)
    picks = rng.permutation(num_clients)[:count]
    return tuple(sorted(int(i) for i in picks))


def local_train(
    spec: ModelSpec,
    start_params: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    *,
    epochs: int,
    batch_size: int,
    eta: float,
    weight_decay: float = 0.0,
    loss_kind: str = "cross_entropy",
    proximal: tuple[np.ndarray, float] | None = None,
    rng: np.random.Generator,
) -> ClientUpdate:
    """Epochs of seeded-shuffled mini-batch SGD; the last partial batch is kept.

    `proximal`, when given, is (theta_old, lam) and anchors every step's
    gradient to the round-start model.
    """
    n = len(labels)
    if n == 0:
        raise ProtocolError("local_train needs a nonempty client dataset")
    params = np.asarray(start_params, dtype=np.float64)
    start = params
    for _ in range(epochs):
        order = rng.permutation(n)
        for pos in range(0, n, batch_size):
            batch = Batch(features[order[pos:pos + batch_size]], labels[order[pos:pos + batch_size]])
            if proximal is not None:
                theta_old, lam = proximal
                g = fedprox_gradient(spec, params, theta_old, lam, batch, loss_kind)
            else:
                g = grad(spec, params, batch, loss_kind)
            params = sgd_step(params, g, eta, weight_decay)
    return ClientUpdate(
        params=params,
        n_k=n,
        num_labels=int(np.unique(labels).size),
        delta=params - start,
    )


def evaluate(spec: ModelSpec, params: np.ndarray, features: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(accuracy, mean cross-entropy); argmax ties go to the lowest class."""
    if len(labels) == 0:
        raise ConfigError("evaluation set must be nonempty")
    logits = forward(spec, params, features)
    accuracy = float((logits.argmax(axis=1) == np.asarray(labels)).mean())
    loss = cross_entropy(softmax(logits), labels)
    return accuracy, loss


@dataclass(frozen=True)
class _ClientData:
    train_features: np.ndarray
    train_labels: np.ndarray
    val_features: np.ndarray
    val_labels: np.ndarray

    @property
    def n_train(self) -> int:
        return len(self.train_labels)


class Simulation:
    """Deterministic experiment instance derived from a SimConfig."""

    def __init__(self, config: SimConfig):
        self.config = config
        seed = config.master_seed
        full = self._generate_dataset()
        self.train_set, self.test_set = self._split_test(full)
        self.train_set, self.partition = self._partition_train()
        self.spec = ModelSpec(
            (self.train_set.dim, *config.hidden_dims, full.num_classes)
        )
        self.clients = self._split_clients()
        self.distill_batches = (
            self._build_distill_batches() if config.algorithm == "feddf" else None
        )
        self.init_params = init_params(self.spec, derive_rng(seed, TAG_INIT))

    # -- construction ------------------------------------------------------

    def _generate_dataset(self) -> datamod.Dataset:
        cfg, seed = self.config.data, self.config.master_seed
        if cfg.kind == "blobs":
            ds = datamod.gen_blobs(
                cfg.num_classes, cfg.per_class, cfg.dim, cfg.spread,
                derive_seed(seed, TAG_DATA),
            )
        else:
            ds = datamod.gen_cube(cfg.per_octant, cfg.scale, derive_seed(seed, TAG_DATA))
        if cfg.num_sources > 0:
            ds = datamod.assign_sources(
                ds, cfg.num_sources, derive_seed(seed, TAG_DATA, 2), shift=cfg.source_shift
            )
        return ds

    def _split_test(self, full: datamod.Dataset) -> tuple[datamod.Dataset, datamod.Dataset]:
        rng = derive_rng(self.config.master_seed, TAG_TEST_SPLIT)
        perm = rng.permutation(full.n)
        n_test = max(1, int(round(self.config.data.test_fraction * full.n)))
        if full.n - n_test < self.config.num_clients:
            raise ConfigError(
                f"{full.n - n_test} training samples cannot cover "
                f"{self.config.num_clients} clients"
            )
        return datamod.subset(full, perm[n_test:]), datamod.subset(full, perm[:n_test])

    def _partition_train(self) -> tuple[datamod.Dataset, datamod.PartitionMap]:
        cfg = self.config
        pcfg = cfg.partition
        seed = derive_seed(cfg.master_seed, TAG_PARTITION)
        train = self.train_set
        if pcfg.strategy == "iid":
            part = datamod.partition_iid(train, cfg.num_clients, seed)
        elif pcfg.strategy == "label_quantity":
            part = datamod.partition_label_quantity(
                train, cfg.num_clients, pcfg.labels_per_client, seed
            )
        elif pcfg.strategy == "label_dirichlet":
            part = datamod.partition_label_dirichlet(train, cfg.num_clients, pcfg.beta, seed)
        elif pcfg.strategy == "quantity_dirichlet":
            part = datamod.partition_quantity_dirichlet(train, cfg.num_clients, pcfg.beta, seed)
        elif pcfg.strategy == "noise":
            part = datamod.partition_iid(train, cfg.num_clients, seed)
            train = datamod.apply_feature_noise(
                train, part, pcfg.sigma_max, derive_seed(cfg.master_seed, TAG_PARTITION, 2)
            )
        elif pcfg.strategy == "cube_pairs":
            part = datamod.partition_cube_symmetric(train, cfg.num_clients, seed)
        else:  # by_source
            part = datamod.partition_by_source(train, cfg.num_clients, seed)
        return train, part

    def _split_clients(self) -> list[_ClientData]:
        clients = []
        feats, labels = self.train_set.features, self.train_set.labels
        for k, idx in enumerate(self.partition.client_indices):
            rng = derive_rng(self.config.master_seed, TAG_CLIENT_SPLIT, k)
            perm = rng.permutation(idx)
            n_val = math.floor(VALIDATION_FRACTION * idx.size)
            val, train = perm[:n_val], perm[n_val:]
            clients.append(
                _ClientData(
                    train_features=feats[train], train_labels=labels[train],
                    val_features=feats[val], val_labels=labels[val],
                )
            )
        return clients

    def _build_distill_batches(self) -> list[Batch]:
        cfg = self.config
        dcfg, seed = cfg.distill, derive_seed(cfg.master_seed, TAG_DISTILL)
        if cfg.data.kind == "blobs":
            ds = datamod.gen_blobs(
                cfg.data.num_classes, dcfg.per_class, cfg.data.dim, cfg.data.spread, seed
            )
        else:
            ds = datamod.gen_cube(dcfg.per_class, cfg.data.scale, seed)
        return [
            Batch(ds.features[pos:pos + dcfg.batch_size], ds.labels[pos:pos + dcfg.batch_size])
            for pos in range(0, ds.n, dcfg.batch_size)
        ]

    # -- round execution ---------------------------------------------------

    def initial_state(self):
        """One shared model: a global vector, or per-client copies of it."""
        if self.config.is_decentralized:
            return [self.init_params.copy() for _ in range(self.config.num_clients)]
        return self.init_params.copy()

    def _train_client(self, client_id: int, start_params: np.ndarray, round_index: int) -> ClientUpdate:
        cfg = self.config
        cd = self.clients[client_id]
        proximal = (start_params, cfg.prox_lambda) if cfg.algorithm == "fedprox" else None
        return local_train(
            self.spec,
            start_params,
            cd.train_features,
            cd.train_labels,
            epochs=cfg.local_epochs,
            batch_size=cfg.batch_size,
            eta=cfg.local_eta,
            weight_decay=cfg.weight_decay,
            proximal=proximal,
            rng=derive_rng(cfg.master_seed, TAG_CLIENT, round_index, client_id),
        )

    def _centralized_round(self, global_params: np.ndarray, round_index: int):
        cfg = self.config
        ids = sample_clients(cfg.num_clients, cfg.participation, round_index, cfg.master_seed)
        train_one = lambda k: self._train_client(k, global_params, round_index)
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                updates = list(pool.map(train_one, ids))
        else:
            updates = [train_one(k) for k in ids]

        if cfg.algorithm in ("fedavg", "fedprox"):
            new_global = fedavg_aggregate(updates, cfg.weighting)
        elif cfg.algorithm == "fedlbl":
            new_global = fedlbl_aggregate(updates, cfg.fedlbl)
        elif cfg.algorithm == "fednova":
            steps = np.mean(
                [cfg.local_epochs * math.ceil(u.n_k / cfg.batch_size) for u in updates]
            )
            new_global = fednova_global_step(
                global_params, updates, cfg.fednova,
                local_steps=float(steps), local_eta=cfg.local_eta,
            )
        else:  # feddf
            student = fedavg_aggregate(updates, cfg.weighting)
            new_global = feddf_fuse(
                [u.params for u in updates], student, self.spec,
                self.distill_batches, cfg.distill.eta, cfg.distill.steps,
            )
        return new_global, ids

    def _decentralized_round(self, states, round_index: int):
        cfg = self.config
        plan = plan_peer_round(
            cfg.num_clients, cfg.peer_q, derive_rng(cfg.master_seed, TAG_PLAN, round_index)
        )
        client_data = {
            cid: (self.clients[cid].train_features, self.clients[cid].train_labels)
            for cid in plan.senders + plan.receivers
        }
        peer_cfg = PeerTrainConfig(
            local_epochs=cfg.local_epochs,
            batch_size=cfg.batch_size,
            eta=cfg.local_eta,
            weight_decay=cfg.weight_decay,
            mutual=cfg.mutual,
        )
        rng_for = lambda cid: derive_rng(cfg.master_seed, TAG_CLIENT, round_index, cid)
        round_fn = {"defkt": defkt_round, "fullavg": fullavg_round, "combo": combo_round}[
            cfg.algorithm
        ]
        states = round_fn(self.spec, states, plan, client_data, peer_cfg, rng_for)
        return states, plan.participants

    def _test_metrics(self, state) -> tuple[float, float]:
        test = self.test_set
        if self.config.is_decentralized:
            pairs = [
                evaluate(self.spec, params, test.features, test.labels) for params in state
            ]
            return (
                float(np.mean([p[0] for p in pairs])),
                float(np.mean([p[1] for p in pairs])),
            )
        return evaluate(self.spec, state, test.features, test.labels)

    def _val_accuracy(self, state, participants) -> float:
        scores = []
        for cid in participants:
            cd = self.clients[cid]
            if len(cd.val_labels) == 0:
                continue
            params = state[cid] if self.config.is_decentralized else state
            scores.append(evaluate(self.spec, params, cd.val_features, cd.val_labels)[0])
        return float(np.mean(scores)) if scores else float("nan")

    def run_round(self, state, round_index: int) -> tuple[object, tuple[int, ...]]:
        """Advance one communication round; returns (new state, participants)."""
        if self.config.is_decentralized:
            return self._decentralized_round(state, round_index)
        return self._centralized_round(state, round_index)

    def run(self) -> MetricsLog:
        """Execute all rounds and collect one record per round."""
        state = self.initial_state()
        records = []
        last_test: tuple[float, float] | None = None
        for r in range(self.config.rounds):
            started = time.perf_counter()
            state, participants = self.run_round(state, r)
            if r % self.config.eval_stride == 0 or r == self.config.rounds - 1 or last_test is None:
                last_test = self._test_metrics(state)
            records.append(
                RoundRecord(
                    round_index=r,
                    test_accuracy=last_test[0],
                    test_loss=last_test[1],
                    participants=participants,
                    wall_time=time.perf_counter() - started,
                    val_accuracy=self._val_accuracy(state, participants),
                )
            )
        return MetricsLog(records)


def run_simulation(config: SimConfig) -> MetricsLog:
    """Build the experiment from its config and run every round."""
    return Simulation(config).run()
