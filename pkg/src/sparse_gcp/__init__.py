"""Stochastic generalized CP decomposition of sparse tensors.

Sampled-gradient GCP with Adam, a deterministic simulation of distributed
and federated execution, and Latin hypercube hyperparameter studies.
"""

from .distsim import (
    CommLedger,
    DistributedSimulator,
    MessageBus,
    ProcessorGrid,
    allocate_samples,
    grid_factorization,
    partition_tensor,
)
from .estimator import GCPDecomposition
from .exceptions import (
    ConfigError,
    GCPError,
    OracleGuardError,
    SamplingError,
    SimulationError,
    TensorFormatError,
)
from .federated import FederatedConfig, FederatedSimulation, run_federated
from .io import (
    SyntheticSpec,
    generate_synthetic,
    init_model,
    load_frostt,
    load_model,
    save_frostt,
    save_model,
)
from .losses import LossFunction, estimated_loss, exact_loss, full_loss, loss_deriv, loss_value
from .optimizer import AdamState, EpochConfig, adam_update, run_gcp_adam, sync_sgd_iteration
from .rng import RngStream
from .sampler import (
    SamplerConfig,
    fused_sample_mttkrp,
    sample_semi_stratified,
    sample_stratified,
    sampled_gradient,
)
from .tensor import (
    KruskalModel,
    SampledGradientTensor,
    SparseTensor,
    dense_gradient_oracle,
    model_entry,
    mttkrp,
)
from .tuner import ParamSpace, Param, default_space, lhs_generate, run_study, spearman_rank_correlation

__version__ = "0.1.0"
