"""Unlearning requests, dataset corrections, the certified first-round update
and the synchronous unlearning loop, plus the retrain and single-update
baselines.

All scenarios reduce to a dataset correction plus confidence-delta pushes into
the aggregated matrix; removed samples are masked out of the loss rather than
physically deleted so row indexing stays stable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import models as local_models
from .data import VerticalDataset
from .federation import (
    CONFIDENCE_DELTA,
    GRADIENT_BROADCAST,
    CommLedger,
    FederationState,
    TrainingConfig,
    init_models,
    train,
    weighted_loss_grad,
)
from .numerics import cross_entropy_l2

CLIENT_REMOVAL = "client_removal"
FEATURE_REMOVAL = "feature_removal"
CELL_REMOVAL = "cell_removal"
SAMPLE_REMOVAL = "sample_removal"
CLASS_REMOVAL = "class_removal"

SCENARIOS = (CLIENT_REMOVAL, FEATURE_REMOVAL, CELL_REMOVAL,
             SAMPLE_REMOVAL, CLASS_REMOVAL)


@dataclass(frozen=True)
class UnlearningRequest:
    scenario: str
    client: int | None = None
    features: tuple[int, ...] = ()        # columns within the client's block
    cells: tuple[tuple[int, int], ...] = ()   # (train row, client-local column)
    samples: tuple[int, ...] = ()         # train row indices
    class_id: int | None = None
    requested_at_epoch: int = 0
    deadline: int | None = None

    def validate(self, dataset: VerticalDataset) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown unlearning scenario {self.scenario!r}")
        n_train = int(dataset.train_mask.sum())
        if self.scenario in (CLIENT_REMOVAL, FEATURE_REMOVAL, CELL_REMOVAL):
            if self.client is None or not 0 <= self.client < dataset.n_clients:
                raise ValueError(f"request names invalid client {self.client!r}")
            width = dataset.client_widths[self.client]
            if self.scenario == FEATURE_REMOVAL:
                if not self.features:
                    raise ValueError("feature removal needs a non-empty feature set")
                for f in self.features:
                    if not 0 <= f < width:
                        raise ValueError(
                            f"feature {f} out of range for client {self.client} "
                            f"(width {width})"
                        )
            if self.scenario == CELL_REMOVAL:
                if not self.cells:
                    raise ValueError("cell removal needs a non-empty cell list")
                for s, f in self.cells:
                    if not 0 <= s < n_train:
                        raise ValueError(f"cell sample index {s} out of range")
                    if not 0 <= f < width:
                        raise ValueError(f"cell feature index {f} out of range")
        elif self.scenario == SAMPLE_REMOVAL:
            if not self.samples:
                raise ValueError("sample removal needs a non-empty sample list")
            for s in self.samples:
                if not 0 <= s < n_train:
                    raise ValueError(f"sample index {s} out of range")
        elif self.scenario == CLASS_REMOVAL:
            if self.class_id is None or not 0 <= self.class_id < dataset.class_count:
                raise ValueError(f"invalid class id {self.class_id!r}")


@dataclass
class DatasetCorrection:
    affected_client: int | None       # None when the correction spans clients
    x_old_train: np.ndarray           # full concatenated train features, before
    x_new_train: np.ndarray           # and after the correction
    z_count: int                      # samples with any changed feature
    changed_clients: tuple[int, ...]  # clients whose blocks changed


def apply_request(
    dataset: VerticalDataset, request: UnlearningRequest
) -> tuple[VerticalDataset, DatasetCorrection]:
    """Corrected dataset D' for the request, plus the correction record.

    Client and feature removal zero the affected columns on every row (the
    feature source is gone for inference too); cell removal replaces listed
    training cells with the feature's pre-correction training mean; sample and
    class removal zero the affected training rows across all clients and
    remove them from the loss via a zero weight.
    """
    request.validate(dataset)
    out = dataset.copy()
    x_old_train = dataset.full_train_matrix()
    train_idx = np.flatnonzero(dataset.train_mask)

    if request.scenario == CLIENT_REMOVAL:
        k = request.client
        out.blocks[k][:] = 0.0
        changed = (k,)
    elif request.scenario == FEATURE_REMOVAL:
        k = request.client
        out.blocks[k][:, list(request.features)] = 0.0
        changed = (k,)
    elif request.scenario == CELL_REMOVAL:
        k = request.client
        block_train = dataset.blocks[k][dataset.train_mask]
        means = block_train.mean(axis=0)
        for s, f in request.cells:
            out.blocks[k][train_idx[s], f] = means[f]
        changed = (k,)
    else:
        if request.scenario == SAMPLE_REMOVAL:
            rows = np.asarray(sorted(set(request.samples)), dtype=np.int64)
        else:
            labels = dataset.train_labels().argmax(axis=1)
            rows = np.flatnonzero(labels == request.class_id)
        weights = out.loss_weights.copy()
        weights[rows] = 0.0
        out.loss_weights = weights
        global_rows = train_idx[rows]
        for k in range(out.n_clients):
            out.blocks[k][global_rows, :] = 0.0
        changed = tuple(range(out.n_clients))

    x_new_train = out.full_train_matrix()
    diff = np.abs(x_new_train - x_old_train)
    z_count = int((diff > 0).any(axis=1).sum())
    correction = DatasetCorrection(
        affected_client=request.client,
        x_old_train=x_old_train,
        x_new_train=x_new_train,
        z_count=z_count,
        changed_clients=changed,
    )
    return out, correction


def confidence_delta(
    model: local_models.LocalModel, x_old: np.ndarray, x_new: np.ndarray
) -> np.ndarray:
    """Confidence change caused by a data correction at fixed parameters."""
    return local_models.forward(model, x_new) - local_models.forward(model, x_old)


def first_round_step(
    model: local_models.LocalModel,
    x_old: np.ndarray,
    x_new: np.ndarray,
    g_old: np.ndarray,
    g_new: np.ndarray,
    tau: float,
) -> local_models.LocalModel:
    """theta <- theta - tau*(grad on corrected data - grad on original data).

    Regularization and perturbation terms cancel between the two evaluations
    at the same parameters, so only the data terms appear.
    """
    if tau == 0.0:
        return model.copy()
    grads_new = local_models.backward(model, x_new, g_new)
    grads_old = local_models.backward(model, x_old, g_old)
    diff = []
    for (dwn, dbn), (dwo, dbo) in zip(grads_new, grads_old):
        db = None if dbn is None else dbn - dbo
        diff.append((dwn - dwo, db))
    return local_models.apply_update(model, diff, tau)


def first_round_update(
    state: FederationState,
    old_dataset: VerticalDataset,
    new_dataset: VerticalDataset,
    tau: float,
) -> FederationState:
    """Single combined descent-on-corrected / ascent-on-original update.

    `state` must already hold the corrected dataset's confidences in H (the
    excision deltas applied); the original gradients are recomputed from
    `old_dataset` at the current parameters.
    """
    out = state.copy()
    blocks_old = old_dataset.train_blocks()
    blocks_new = new_dataset.train_blocks()
    y = new_dataset.train_labels()
    h_old = sum(
        local_models.forward(out.models[k], blocks_old[k])
        for k in range(out.n_clients)
    )
    g_old = weighted_loss_grad(h_old, y, old_dataset.loss_weights)
    g_new = weighted_loss_grad(out.confidence.H, y, new_dataset.loss_weights)
    for k in range(out.n_clients):
        updated = first_round_step(
            out.models[k], blocks_old[k], blocks_new[k], g_old, g_new, tau)
        delta = local_models.forward(updated, blocks_new[k]) - out.confidence.per_client[k]
        out.models[k] = updated
        out.confidence.per_client[k] = out.confidence.per_client[k] + delta
        out.confidence.H = out.confidence.H + delta
    return out


def unlearn_sync(
    state: FederationState,
    request: UnlearningRequest,
    cfg: TrainingConfig,
    update_clients: frozenset[int] | None = None,
) -> FederationState:
    """Synchronous unlearning: excision, certified first round, then
    early-stopped fine-tuning on the corrected data.

    `update_clients` optionally restricts which clients apply parameter
    updates (used to measure how much a partial protocol undershoots); all
    clients still receive broadcasts.
    """
    from .async_unlearning import OnlineSchedule, run_unlearning_rounds

    schedule = OnlineSchedule.full(state.n_clients, cfg.max_epochs)
    return run_unlearning_rounds(state, request, cfg, schedule,
                                 update_clients=update_clients)


def retrain_baseline(
    dataset_corrected: VerticalDataset,
    cfg: TrainingConfig,
    model_kind: str = local_models.LINEAR,
    hidden: int = 16,
    active_party: int | None = None,
) -> FederationState:
    """Train from a fresh initialization on the corrected dataset."""
    model_list = init_models(dataset_corrected, cfg, kind=model_kind,
                             hidden=hidden, active_party=active_party)
    return train(dataset_corrected, model_list, cfg, active_party=active_party)


def vfulr_baseline(
    state: FederationState, request: UnlearningRequest
) -> FederationState:
    """Client-removal baseline: subtract the leaving client's contribution
    from H, then a single descent update on the remaining clients."""
    if request.scenario != CLIENT_REMOVAL:
        raise ValueError("vfulr baseline supports client removal only")
    for m in state.models:
        if m.kind != local_models.LINEAR:
            raise ValueError("vfulr baseline supports linear models only")
    cfg = state.config
    new_dataset, _ = apply_request(state.dataset, request)
    out = state.copy()
    out.dataset = new_dataset
    out.ledger = CommLedger(trace=cfg.trace_messages)
    out.loss_trace = []
    out.residual_trace = []
    blocks_new = new_dataset.train_blocks()
    y = new_dataset.train_labels()
    n, c = y.shape
    removed = request.client
    active = out.active_party

    # excision: the leaving client's confidence is replaced by its (zeroed)
    # corrected output
    h_removed_new = local_models.forward(out.models[removed], blocks_new[removed])
    delta = h_removed_new - out.confidence.per_client[removed]
    out.ledger.add("unlearn", 1, removed, active, CONFIDENCE_DELTA, n * c)
    out.confidence.per_client[removed] = h_removed_new
    out.confidence.H = out.confidence.H + delta

    grad = weighted_loss_grad(out.confidence.H, y, new_dataset.loss_weights)
    for k in range(out.n_clients):
        if k == removed:
            continue
        out.ledger.add("unlearn", 1, active, k, GRADIENT_BROADCAST, n * c,
                       payload=grad)
        grads = local_models.backward(out.models[k], blocks_new[k], grad)
        out.models[k] = local_models.apply_update(
            out.models[k], grads, cfg.eta, cfg.l2_lambda, out.perturbations[k])
        h_new = local_models.forward(out.models[k], blocks_new[k])
        d = h_new - out.confidence.per_client[k]
        out.ledger.add("unlearn", 1, k, active, CONFIDENCE_DELTA, n * c)
        out.confidence.per_client[k] = h_new
        out.confidence.H = out.confidence.H + d
    out.epochs_used = 1
    out.loss_trace.append(
        cross_entropy_l2(out.confidence.H, y, out.flat_params(),
                         cfg.l2_lambda, out.flat_perturbations(),
                         weights=new_dataset.loss_weights))
    return out
