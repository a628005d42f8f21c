"""Fairness-aware federated cognitive diagnosis on numpy.

Schools train local cognitive-diagnosis models on private response logs and
share only exercise embeddings, which a server combines with a loss-weighted
softmax.
"""

from .data import (
    ClientDataset,
    EntityCatalog,
    QMatrix,
    ResponseLog,
    Responses,
    SyntheticSpec,
    filter_dataset,
    generate_synthetic,
    ingest_logs,
    split_client,
    split_clients,
)
from .federation import (
    AttentionDistance,
    DataSizeAverage,
    FairnessSoftmax,
    ModelConfig,
    StrategyConfig,
    UniformAverage,
    aggregate,
    apply_dp_noise,
    compute_weights,
    run_centralized,
    run_protocol,
    run_round,
)
from .metrics import MetricReport, accuracy, auc, degree_of_agreement, evaluate, group_fairness, rmse
from .models import AdamState, ModelParams, adam_step, backward, bce_loss, init_params, train_local

__version__ = "0.1.0"
