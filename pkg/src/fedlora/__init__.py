"""Deterministic simulator and verification library for federated LoRA
fine-tuning with alternating optimization of the adapter factors."""

from .adapters import (
    BOTH_SCHEDULE,
    FFA_SCHEDULE,
    ROLORA_SCHEDULE,
    InitSpec,
    LoraAdapter,
    Trainable,
    UpdateSchedule,
    effective_update,
    init_adapter,
    init_with_angle,
    trainable_mask,
)
from .fedsim import (
    FedConfig,
    Strategy,
    TrainingTrace,
    aggregate_fedavg,
    aggregate_flexlora,
    aggregate_flora,
    aggregate_rolora,
    interference_gap,
    local_train,
    run_federated,
)
from .linalg import (
    angle_distance,
    derive_rng,
    frob_norm,
    gaussian_matrix,
    make_rng,
    projector_orth,
    truncated_svd,
    unit_normalize,
)
from .oracles import (
    ContractionReport,
    FfaLossPrediction,
    altmin_gd,
    contraction_bound,
    ffa_heter_loss_exact,
    ffa_homog_empirical_loss,
    ffa_homog_predicted_loss,
    heter_population_round,
    iterations_needed,
)
from .tasks import (
    ClassifierTask,
    ClientShard,
    ClientVariance,
    LinearTask,
    TwoLayerNet,
    client_variance,
    forward_two_layer,
    gen_linear_shard,
    grad_a_linear,
    grad_two_layer,
    local_loss_linear,
    make_cluster_task,
    make_heterogeneous_task,
    make_homogeneous_task,
    read_idx_images,
    read_idx_labels,
    solve_b_exact,
    split_by_label,
    split_dirichlet,
)

__version__ = "0.1.0"
