"""Deterministic desk-scale simulator of personalized federated learning
with shareable basis models."""

from .basis import (
    BasisSet,
    CombinationState,
    coefficients,
    combine,
    grad_bases,
    grad_logits,
    grad_major,
    sharpen,
    uniform_state,
)
from .bench import (
    Benchmark,
    ClientDataset,
    DomainDataset,
    SplitFractions,
    build_pflbed,
    dirichlet_partition,
    label_discrepancy,
    make_synthetic_multidomain,
    split_domain,
)
from .checkpoint import checkpoint_read, checkpoint_write
from .config import ExperimentConfig
from .diagnostics import (
    alpha_entropy,
    global_accuracy,
    kmeans_compress,
    mean_pairwise_cosine,
    pca_compress,
    personalized_accuracy,
)
from .errors import ConfigError, DataError, FedBasisError, ShapeError
from .nn import Batch, Block, MlpSpec, ParamVector, forward_loss, grad_params, init_params
from .protocol import (
    EvalContext,
    FedConfig,
    RoundMetrics,
    aggregate,
    aggregate_basis_sets,
    client_update_fedavg,
    client_update_fedbasis,
    client_update_fedbasis_naive,
    finetune_full,
    personalize_new_client,
    run_federation,
    warm_start,
)
from .rng import child_seed, stream

__version__ = "0.1.0"
