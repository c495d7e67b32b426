"""Vertical federated learning simulator with certified machine unlearning.

A deterministic multi-party simulator: linear or MLP local models produce
per-class confidences that a non-trainable global module sums into a
confidence matrix held by the label-owning active party. Removal requests
(client, feature, sensitive cells, samples, class) become confidence-delta
corrections plus a short fine-tuning loop, optionally asynchronous with
factor-based compensation for offline clients, and optionally certified via
calibrated objective-perturbation noise.
"""

__version__ = "0.1.0"

from .data import VerticalDataset, load_csv, normalize_and_partition, synthesize
from .federation import (
    CommLedger,
    ContributionFactors,
    FederationState,
    TrainingConfig,
    capture_contribution_factors,
    infer,
    init_models,
    train,
)
from .unlearning import (
    UnlearningRequest,
    apply_request,
    retrain_baseline,
    unlearn_sync,
    vfulr_baseline,
)
from .async_unlearning import (
    OnlineSchedule,
    estimate_offline,
    reconcile_all,
    reconcile_client,
    unlearn_async,
)
from .certification import CertParams, CertificationReport, certify
from .metrics import accuracy, auc
