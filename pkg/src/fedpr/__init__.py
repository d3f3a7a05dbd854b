"""Desk-scale simulator of personalized federated forgery-detection training."""

from .autodiff import ParamTensor, Tensor, backward, sgd_step, zero_grads
from .errors import (
    AggregationError,
    BatchError,
    ConfigError,
    DegenerateError,
    DomainError,
    FedprError,
    FormatError,
    LabelError,
    OptimizerError,
    PartitionError,
    RankError,
    ShapeError,
)
from .federation import (
    ClientState,
    PartitionedParams,
    RoundConfig,
    RoundReport,
    aggregate,
    client_round,
    run_federation,
    select_clients,
)
from .harness import (
    ExperimentConfig,
    build_clients,
    load_checkpoint,
    run_experiment,
    save_checkpoint,
)
from .metrics import EvalMatrix, EvalResult, accuracy, auc, cross_eval, eer
from .model import (
    Batch,
    ForgeryModel,
    LossWeights,
    forward_mixed,
    infer,
    loss_adversarial,
    loss_personalized,
    loss_shared,
    total_loss,
)
from .statmix import ChannelStats, channel_stats, interpolate_stats, transform_personalized, transform_shared
from .synthdata import SyntheticSpec, batches, generate, read_dataset, write_dataset

__version__ = "0.1.0"
