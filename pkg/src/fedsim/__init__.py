"""Deterministic desk-scale federated learning simulator.

A small numpy library covering: a minimal MLP training core, synthetic
datasets with the full non-IID partitioning taxonomy, centralized
aggregation strategies (FedAvg, FedProx, FedNova, FedLbl, FedDF), and
decentralized peer-to-peer protocols (Def-KT, FullAvg, Combo), all driven
by a single master seed.
"""

from .errors import ConfigError, ProtocolError
from .nn import (
    Batch,
    ModelSpec,
    cross_entropy,
    forward,
    grad,
    init_params,
    kl_divergence,
    loss_value,
    mse_onehot,
    sgd_step,
    softmax,
)
from .data import (
    Dataset,
    PartitionMap,
    apply_feature_noise,
    assign_sources,
    gen_blobs,
    gen_cube,
    largest_remainder,
    partition_by_source,
    partition_cube_symmetric,
    partition_iid,
    partition_label_dirichlet,
    partition_label_quantity,
    partition_manifest,
    partition_quantity_dirichlet,
    skew_report,
    subset,
)
from .algorithms import (
    ClientUpdate,
    FedLblConfig,
    FedNovaConfig,
    fedavg_aggregate,
    feddf_fuse,
    fedlbl_aggregate,
    fedlbl_weights,
    fednova_global_step,
    fednova_lr,
    fedprox_gradient,
    update_variance,
)
from .decentralized import (
    MutualLossConfig,
    PeerRoundPlan,
    PeerTrainConfig,
    combo_round,
    defkt_round,
    fullavg_round,
    mutual_transfer_step,
    plan_peer_round,
)
from .simulator import (
    DataConfig,
    DistillConfig,
    MetricsLog,
    PartitionConfig,
    RoundRecord,
    SimConfig,
    Simulation,
    evaluate,
    last_window_std,
    local_train,
    run_simulation,
    sample_clients,
)

__version__ = "0.1.0"
