"""Synthetic datasets and the non-IID partitioning strategies.

Partitioners cover the full skew taxonomy: quantity-based and
Dirichlet-based label imbalance, noise/synthetic-cube/source-based feature
imbalance, and Dirichlet quantity skew. Every function is a deterministic
function of (inputs, seed) and never touches global RNG state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# How often an unlucky random assignment may be redrawn before failing loudly.
RESAMPLE_BUDGET = 1000

# Octant pairs of the labeled cube that are point-symmetric through the origin
# (bitwise complements of the sign-encoded octant index).
CUBE_SYMMETRIC_PAIRS = ((0, 7), (1, 6), (2, 5), (3, 4))


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, integer class labels, optional provenance group ids."""

    features: np.ndarray
    labels: np.ndarray
    source_ids: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ConfigError(f"dataset features must be a nonempty matrix, got {feats.shape}")
        if labels.shape != (feats.shape[0],) or labels.min() < 0:
            raise ConfigError("dataset needs one nonnegative label per row")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        if self.source_ids is not None:
            sources = np.asarray(self.source_ids, dtype=np.int64)
            if sources.shape != (feats.shape[0],):
                raise ConfigError("source_ids must have one entry per row")
            object.__setattr__(self, "source_ids", sources)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


def subset(dataset: Dataset, indices: np.ndarray) -> Dataset:
    """New Dataset holding the selected rows (copies)."""
    idx = np.asarray(indices, dtype=np.int64)
    sources = None if dataset.source_ids is None else dataset.source_ids[idx]
    return Dataset(dataset.features[idx], dataset.labels[idx], sources)


@dataclass(frozen=True)
class PartitionMap:
    """Disjoint per-client index sets over a dataset, with size/label metadata."""

    client_indices: tuple[np.ndarray, ...]
    sizes: tuple[int, ...]
    label_sets: tuple[frozenset[int], ...]

    @classmethod
    def from_indices(cls, indices: list[np.ndarray], labels: np.ndarray) -> "PartitionMap":
        labels = np.asarray(labels)
        cleaned = []
        for k, idx in enumerate(indices):
            idx = np.asarray(idx, dtype=np.int64)
            if idx.size == 0:
                raise ConfigError(f"client {k} received no samples")
            if idx.min() < 0 or idx.max() >= labels.shape[0]:
                raise ConfigError(f"client {k} indices out of range")
            cleaned.append(idx)
        flat = np.concatenate(cleaned)
        if np.unique(flat).size != flat.size:
            raise ConfigError("client index sets overlap")
        return cls(
            client_indices=tuple(cleaned),
            sizes=tuple(int(idx.size) for idx in cleaned),
            label_sets=tuple(frozenset(int(c) for c in np.unique(labels[idx])) for idx in cleaned),
        )

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    @property
    def total_assigned(self) -> int:
        return sum(self.sizes)


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing exactly to `total`, proportional to `proportions`.

    Floors every raw share, then hands the shortfall to the largest
    fractional remainders (ties broken toward the lowest index).
    """
    p = np.asarray(proportions, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or (p < 0).any():
        raise ConfigError("proportions must be a nonempty nonnegative vector")
    raw = p / p.sum() * total
    counts = np.floor(raw).astype(np.int64)
    shortfall = int(total - counts.sum())
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    counts[order[:shortfall]] += 1
    return counts


def _dirichlet(rng: np.random.Generator, beta: float, k: int) -> np.ndarray:
    """Dirichlet(beta * 1_k) via normalized Gamma(beta, 1) draws."""
    while True:
        g = rng.gamma(beta, 1.0, size=k)
        s = g.sum()
        if s > 0 and np.isfinite(s):
            return g / s


def _separated_centers(rng, num_classes, dim, min_sep):
    """Seeded distinct cluster centers with pairwise distance >= min_sep."""
    half = max(1.0, min_sep)
    while True:
        pts = rng.uniform(-half, half, size=(num_classes, dim))
        if num_classes == 1:
            return pts
        diffs = pts[:, None, :] - pts[None, :, :]
        dists = np.sqrt((diffs ** 2).sum(axis=-1))
        np.fill_diagonal(dists, np.inf)
        if dists.min() >= min_sep:
            return pts
        half *= 1.5


def gen_blobs(num_classes: int, per_class: int, dim: int, spread: float, seed) -> Dataset:
    """Gaussian clusters, one per class; centers kept >= 6*spread apart."""
    if num_classes < 2 or per_class < 1 or dim < 1 or spread < 0:
        raise ConfigError("gen_blobs needs num_classes >= 2, per_class >= 1, dim >= 1, spread >= 0")
    rng = np.random.default_rng(seed)
    centers = _separated_centers(rng, num_classes, dim, 6.0 * spread)
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = spread * rng.standard_normal((num_classes * per_class, dim))
    return Dataset(centers[labels] + noise, labels)


def gen_cube(per_octant: int, scale: float, seed) -> Dataset:
    """Points uniform in the cube [-scale, scale]^3, labeled by octant.

    The octant index encodes the sign bits (x>0, y>0, z>0) as bits 0..2, so
    (+,+,+) is label 7 and (-,-,-) is label 0. Coordinates within 1e-9 of an
    axis plane are resampled so every label is unambiguous.
    """
    if per_octant < 1:
        raise ConfigError("per_octant must be >= 1")
    if scale <= 1e-8:
        raise ConfigError("cube scale must exceed 1e-8 (plane-exclusion band)")
    rng = np.random.default_rng(seed)
    feats = np.empty((8 * per_octant, 3))
    labels = np.repeat(np.arange(8), per_octant)
    for octant in range(8):
        signs = np.array([1.0 if octant >> b & 1 else -1.0 for b in range(3)])
        mags = rng.uniform(0.0, scale, size=(per_octant, 3))
        while True:
            bad = mags < 1e-9
            if not bad.any():
                break
            mags[bad] = rng.uniform(0.0, scale, size=int(bad.sum()))
        feats[octant * per_octant:(octant + 1) * per_octant] = signs * mags
    return Dataset(feats, labels)


def assign_sources(dataset: Dataset, num_sources: int, seed, shift: float = 0.0) -> Dataset:
    """Tag every sample with a provenance group; optional per-source mean shift.

    Groups are near-equal sized and randomly interleaved. A nonzero `shift`
    adds a seeded constant offset per source so sources differ in feature
    distribution, not just in name.
    """
    if num_sources < 1 or num_sources > dataset.n:
        raise ConfigError("num_sources must lie in [1, n]")
    rng = np.random.default_rng(seed)
    sources = rng.permutation(np.arange(dataset.n) % num_sources)
    feats = dataset.features.copy()
    if shift != 0.0:
        offsets = shift * rng.standard_normal((num_sources, dataset.dim))
        feats += offsets[sources]
    return Dataset(feats, dataset.labels.copy(), sources)


def partition_iid(dataset: Dataset, num_clients: int, seed) -> PartitionMap:
    """Seeded shuffle split into near-equal parts (sizes differ by <= 1)."""
    if num_clients < 1:
        raise ConfigError("need at least one client")
    if dataset.n < num_clients:
        raise ConfigError(f"cannot split {dataset.n} samples across {num_clients} clients")
    rng = np.random.default_rng(seed)
    parts = np.array_split(rng.permutation(dataset.n), num_clients)
    return PartitionMap.from_indices(parts, dataset.labels)


def partition_label_quantity(
    dataset: Dataset, num_clients: int, labels_per_client: int, seed
) -> PartitionMap:
    """Each client owns a random fixed-size label set; samples of each label
    are split near-equally among the label's owners.

    The random assignment is redrawn (bounded by RESAMPLE_BUDGET) until every
    label has at least one owner and every client at least one sample.
    """
    num_labels = dataset.num_classes
    if not 1 <= labels_per_client <= num_labels:
        raise ConfigError(f"labels_per_client must lie in [1, {num_labels}]")
    rng = np.random.default_rng(seed)
    by_label = [np.flatnonzero(dataset.labels == c) for c in range(num_labels)]

    for _ in range(RESAMPLE_BUDGET):
        owned = [rng.choice(num_labels, size=labels_per_client, replace=False)
                 for _ in range(num_clients)]
        owners = [[k for k in range(num_clients) if c in owned[k]] for c in range(num_labels)]
        if any(len(o) == 0 for o in owners):
            continue
        shares: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for c in range(num_labels):
            pieces = np.array_split(rng.permutation(by_label[c]), len(owners[c]))
            for k, piece in zip(owners[c], pieces):
                shares[k].append(piece)
        if any(sum(p.size for p in s) == 0 for s in shares):
            continue
        indices = [np.concatenate([p for p in s if p.size]) for s in shares]
        return PartitionMap.from_indices(indices, dataset.labels)
    raise ConfigError(
        f"no label assignment covering all {num_labels} labels found in "
        f"{RESAMPLE_BUDGET} attempts (num_clients={num_clients}, "
        f"labels_per_client={labels_per_client})"
    )


def partition_label_dirichlet(dataset: Dataset, num_clients: int, beta: float, seed) -> PartitionMap:
    """Per-label client proportions drawn from Dirichlet(beta * 1_K).

    Each label's samples are allocated by largest-remainder rounding of the
    drawn proportions; draws leaving any client empty are redrawn up to
    RESAMPLE_BUDGET times.
    """
    if beta <= 0 or num_clients < 1:
        raise ConfigError("beta must be positive and num_clients >= 1")
    rng = np.random.default_rng(seed)
    by_label = [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]

    for _ in range(RESAMPLE_BUDGET):
        shares: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for idx in by_label:
            counts = largest_remainder(_dirichlet(rng, beta, num_clients), idx.size)
            pieces = np.split(rng.permutation(idx), np.cumsum(counts)[:-1])
            for k, piece in enumerate(pieces):
                if piece.size:
                    shares[k].append(piece)
        if any(not s for s in shares):
            continue
        return PartitionMap.from_indices(
            [np.concatenate(s) for s in shares], dataset.labels
        )
    raise ConfigError(
        f"Dirichlet label split left a client empty in every one of "
        f"{RESAMPLE_BUDGET} attempts (beta={beta}, num_clients={num_clients})"
    )


def partition_quantity_dirichlet(dataset: Dataset, num_clients: int, beta: float, seed) -> PartitionMap:
    """Client sizes drawn from Dirichlet(beta * 1_K) and scaled to n.

    Samples are dealt by a plain seeded shuffle, so per-client label
    distributions stay near the global one and only the sizes are skewed.
    """
    if beta <= 0 or num_clients < 1:
        raise ConfigError("beta must be positive and num_clients >= 1")
    if dataset.n < num_clients:
        raise ConfigError(f"cannot split {dataset.n} samples across {num_clients} clients")
    rng = np.random.default_rng(seed)
    for _ in range(RESAMPLE_BUDGET):
        sizes = largest_remainder(_dirichlet(rng, beta, num_clients), dataset.n)
        if sizes.min() >= 1:
            break
    else:
        raise ConfigError(
            f"Dirichlet sizes left a client empty in every one of "
            f"{RESAMPLE_BUDGET} attempts (beta={beta}, num_clients={num_clients})"
        )
    pieces = np.split(rng.permutation(dataset.n), np.cumsum(sizes)[:-1])
    return PartitionMap.from_indices(pieces, dataset.labels)


def apply_feature_noise(dataset: Dataset, partition: PartitionMap, sigma_max: float, seed) -> Dataset:
    """Additive Gaussian noise ramping linearly across clients.

    Client k receives noise level sigma_max * k / (K - 1): client 0 stays
    bitwise clean and the last client gets the full sigma_max. Labels and
    provenance are untouched.
    """
    if sigma_max < 0:
        raise ConfigError("sigma_max must be nonnegative")
    rng = np.random.default_rng(seed)
    feats = dataset.features.copy()
    k_total = partition.num_clients
    for k, idx in enumerate(partition.client_indices):
        sigma = 0.0 if k_total == 1 else sigma_max * k / (k_total - 1)
        if sigma > 0.0:
            feats[idx] += sigma * rng.standard_normal((idx.size, dataset.dim))
    sources = None if dataset.source_ids is None else dataset.source_ids.copy()
    return Dataset(feats, dataset.labels.copy(), sources)


def partition_cube_symmetric(dataset: Dataset, num_clients: int, seed) -> PartitionMap:
    """Allocate origin-symmetric octant pairs of a labeled cube to clients.

    Pair i goes to client i mod K, so at most 4 clients can be served. Each
    client holds every sample of its pairs.
    """
    if not 1 <= num_clients <= len(CUBE_SYMMETRIC_PAIRS):
        raise ConfigError("cube partition supports 1 to 4 clients (4 symmetric pairs)")
    if dataset.labels.max() > 7:
        raise ConfigError("cube partition expects octant labels in [0, 8)")
    rng = np.random.default_rng(seed)
    octants: list[list[int]] = [[] for _ in range(num_clients)]
    for i, pair in enumerate(CUBE_SYMMETRIC_PAIRS):
        octants[i % num_clients].extend(pair)
    indices = [
        rng.permutation(np.flatnonzero(np.isin(dataset.labels, octs)))
        for octs in octants
    ]
    return PartitionMap.from_indices(indices, dataset.labels)


def partition_by_source(dataset: Dataset, num_clients: int, seed) -> PartitionMap:
    """Provenance groups dealt round-robin (in seeded order) to clients."""
    if dataset.source_ids is None:
        raise ConfigError("dataset carries no source ids")
    distinct = np.unique(dataset.source_ids)
    if distinct.size < num_clients:
        raise ConfigError(
            f"need at least {num_clients} distinct sources, dataset has {distinct.size}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(distinct)
    client_sources = [order[k::num_clients] for k in range(num_clients)]
    indices = [
        np.flatnonzero(np.isin(dataset.source_ids, srcs)) for srcs in client_sources
    ]
    return PartitionMap.from_indices(indices, dataset.labels)


@dataclass(frozen=True)
class ClientSkew:
    client: int
    size: int
    num_labels: int
    histogram: tuple[int, ...]
    feature_distance: float


@dataclass(frozen=True)
class SkewReport:
    """Per-client skew statistics plus the aggregate size imbalance ratio."""

    clients: tuple[ClientSkew, ...]
    size_ratio: float

    def format_table(self) -> str:
        lines = ["client size labels feat_dist histogram"]
        for c in self.clients:
            hist = ",".join(str(h) for h in c.histogram)
            lines.append(f"{c.client} {c.size} {c.num_labels} {c.feature_distance:.6f} {hist}")
        lines.append(f"max/min size ratio: {self.size_ratio:.6f}")
        return "\n".join(lines)


def skew_report(dataset: Dataset, partition: PartitionMap) -> SkewReport:
    """Quantify a partition: sizes, label histograms, feature-mean drift."""
    num_labels = dataset.num_classes
    global_mean = dataset.features.mean(axis=0)
    clients = []
    for k, idx in enumerate(partition.client_indices):
        hist = np.bincount(dataset.labels[idx], minlength=num_labels)
        dist = float(np.linalg.norm(dataset.features[idx].mean(axis=0) - global_mean))
        clients.append(
            ClientSkew(
                client=k,
                size=int(idx.size),
                num_labels=int((hist > 0).sum()),
                histogram=tuple(int(h) for h in hist),
                feature_distance=dist,
            )
        )
    return SkewReport(
        clients=tuple(clients),
        size_ratio=float(max(partition.sizes) / min(partition.sizes)),
    )


def partition_manifest(dataset: Dataset, partition: PartitionMap) -> str:
    """One line per client: `client_id,n_k,h0,h1,...` over the global classes."""
    num_labels = dataset.num_classes
    lines = []
    for k, idx in enumerate(partition.client_indices):
        hist = np.bincount(dataset.labels[idx], minlength=num_labels)
        lines.append(f"{k},{idx.size}," + ",".join(str(int(h)) for h in hist))
    return "\n".join(lines)
