"""AggVFL protocol: party roles, confidence-matrix bookkeeping, the training
loop, communication accounting and contribution-factor capture.

Protocol per epoch: the active party broadcasts dL/dH (one identical matrix
to every client), clients update their local parameters and push confidence
deltas, the active party aggregates them back into H. H therefore equals the
sum of client confidences at every epoch boundary.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import models as local_models
from .data import VerticalDataset
from .numerics import (
    PURPOSE_INIT,
    PURPOSE_NOISE,
    RandomSource,
    cross_entropy_l2,
    gaussian_vector,
    softmax_rows,
)

logger = logging.getLogger(__name__)

ACTIVE = "active"
PASSIVE = "passive"

CONFIDENCE_FULL = "CONFIDENCE_FULL"
CONFIDENCE_DELTA = "CONFIDENCE_DELTA"
GRADIENT_BROADCAST = "GRADIENT_BROADCAST"
FACTOR_PROBE = "FACTOR_PROBE"

BYTES_PER_SCALAR = 8


@dataclass(frozen=True)
class PartyId:
    index: int
    role: str

    def __post_init__(self):
        if self.role not in (ACTIVE, PASSIVE):
            raise ValueError(f"unknown party role {self.role!r}")


@dataclass
class TrainingConfig:
    eta: float
    l2_lambda: float = 0.0
    max_epochs: int = 100
    seed: int = 0
    noise_sigma: float = 0.0
    early_stop_patience: int = 5
    loss_tolerance: float = 1e-4
    tau: float | None = None          # first-round unlearning step; defaults to eta
    trace_messages: bool = False

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @property
    def first_round_tau(self) -> float:
        return self.eta if self.tau is None else self.tau


@dataclass
class CommRecord:
    phase: str
    epoch: int
    sender: int
    receiver: int
    kind: str
    scalars: int


class CommLedger:
    """Append-only log of protocol messages, counted in 8-byte scalars."""

    def __init__(self, trace: bool = False):
        self.records: list[CommRecord] = []
        self.trace = trace
        self.payloads: list[bytes | None] = []

    def add(self, phase: str, epoch: int, sender: int, receiver: int,
            kind: str, scalars: int, payload: np.ndarray | None = None) -> None:
        self.records.append(CommRecord(phase, epoch, sender, receiver, kind, scalars))
        self.payloads.append(payload.tobytes() if self.trace and payload is not None else None)

    def total_scalars(self, phase: str | None = None) -> int:
        return sum(r.scalars for r in self.records if phase is None or r.phase == phase)

    def per_epoch_scalars(self, phase: str) -> dict[int, int]:
        out: dict[int, int] = {}
        for r in self.records:
            if r.phase == phase:
                out[r.epoch] = out.get(r.epoch, 0) + r.scalars
        return out

    def total_megabytes(self, phase: str | None = None) -> float:
        return self.total_scalars(phase) * BYTES_PER_SCALAR / 1e6

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["phase", "epoch", "sender", "receiver", "kind", "scalars"])
            for r in self.records:
                writer.writerow([r.phase, r.epoch, r.sender, r.receiver, r.kind, r.scalars])


@dataclass
class ConfidenceMatrix:
    """Aggregated pre-softmax scores plus per-client believed contributions.

    `per_client[k]` is the active party's current estimate of client k's
    cumulative confidence; it is exact for clients that have participated in
    every round and estimate-based for clients that missed rounds.
    """

    H: np.ndarray
    per_client: list[np.ndarray]

    def consistency_error(self) -> float:
        return float(np.abs(self.H - sum(self.per_client)).max())


@dataclass
class ContributionFactors:
    """Per-sample share of each client in the aggregate confidence update."""

    R: np.ndarray               # n_train x n_clients, rows sum to 1
    capture_epoch: int


@dataclass
class FederationState:
    dataset: VerticalDataset
    models: list[local_models.LocalModel]
    config: TrainingConfig
    active_party: int
    confidence: ConfidenceMatrix
    ledger: CommLedger
    perturbations: list[np.ndarray | None]
    loss_trace: list[float] = field(default_factory=list)
    residual_trace: list[float] = field(default_factory=list)
    epochs_used: int = 0
    train_epochs: int = 0
    factors: ContributionFactors | None = None
    # unlearning bookkeeping: stored per-round broadcasts for catch-up replay,
    # rounds each client missed, accumulated estimated confidence drift while
    # offline, and the pre-correction train blocks (ascent-term replay)
    unlearn_history: list[dict] = field(default_factory=list)
    missed_rounds: list[list[int]] = field(default_factory=list)
    estimate_accum: list[np.ndarray] = field(default_factory=list)
    old_train_blocks: list[np.ndarray] | None = None
    unlearn_config: "TrainingConfig | None" = None

    @property
    def n_clients(self) -> int:
        return len(self.models)

    @property
    def parties(self) -> list[PartyId]:
        return [
            PartyId(k, ACTIVE if k == self.active_party else PASSIVE)
            for k in range(self.n_clients)
        ]

    def flat_params(self) -> np.ndarray:
        return np.concatenate([m.flat_params() for m in self.models])

    def flat_perturbations(self) -> np.ndarray:
        parts = []
        for m, b in zip(self.models, self.perturbations):
            parts.append(np.zeros(m.param_count()) if b is None else b)
        return np.concatenate(parts)

    def copy(self) -> "FederationState":
        out = FederationState(
            dataset=self.dataset.copy(),
            models=[m.copy() for m in self.models],
            config=self.config,
            active_party=self.active_party,
            confidence=ConfidenceMatrix(
                H=self.confidence.H.copy(),
                per_client=[h.copy() for h in self.confidence.per_client],
            ),
            ledger=self.ledger,   # shared on purpose: one ledger per experiment
            perturbations=[None if b is None else b.copy() for b in self.perturbations],
            loss_trace=list(self.loss_trace),
            residual_trace=list(self.residual_trace),
            epochs_used=self.epochs_used,
            train_epochs=self.train_epochs,
            factors=self.factors,
            unlearn_history=list(self.unlearn_history),
            missed_rounds=[list(m) for m in self.missed_rounds],
            estimate_accum=[a.copy() for a in self.estimate_accum],
            old_train_blocks=self.old_train_blocks,
            unlearn_config=self.unlearn_config,
        )
        return out


def weighted_loss_grad(h_total: np.ndarray, y: np.ndarray,
                       weights: np.ndarray) -> np.ndarray:
    """dL/dH for the weighted-mean loss; equals (softmax(H)-Y)/n when all
    weights are one."""
    total = float(weights.sum())
    if total <= 0:
        raise ValueError("loss weights sum to zero")
    return (softmax_rows(h_total) - y) * (weights / total)[:, None]


def federation_loss(state: FederationState) -> float:
    ds = state.dataset
    return cross_entropy_l2(
        state.confidence.H,
        ds.train_labels(),
        state.flat_params(),
        state.config.l2_lambda,
        state.flat_perturbations(),
        weights=ds.loss_weights,
    )


def init_models(
    dataset: VerticalDataset,
    cfg: TrainingConfig,
    kind: str = local_models.LINEAR,
    hidden: int = 16,
    active_party: int | None = None,
) -> list[local_models.LocalModel]:
    """One local model per client; in linear mode only the active party's
    model carries a bias so client confidences aggregate exactly."""
    active = dataset.n_clients - 1 if active_party is None else active_party
    source = RandomSource(cfg.seed)
    out = []
    for k, width in enumerate(dataset.client_widths):
        stream = source.party_stream(PURPOSE_INIT, k)
        if kind == local_models.LINEAR:
            out.append(local_models.init_linear(
                width, dataset.class_count, stream, with_bias=(k == active)))
        elif kind == local_models.MLP:
            out.append(local_models.init_mlp(
                width, dataset.class_count, stream, hidden=hidden))
        else:
            raise ValueError(f"unknown model kind {kind!r}")
    return out


def draw_perturbations(
    dataset: VerticalDataset,
    model_list: list[local_models.LocalModel],
    cfg: TrainingConfig,
) -> list[np.ndarray | None]:
    """Fixed per-client objective-perturbation vectors, drawn once before
    epoch 1; None when certification noise is disabled."""
    if cfg.noise_sigma <= 0:
        return [None] * len(model_list)
    source = RandomSource(cfg.seed)
    return [
        gaussian_vector(source.party_stream(PURPOSE_NOISE, k),
                        m.param_count(), cfg.noise_sigma)
        for k, m in enumerate(model_list)
    ]


def _early_stop_tracker(cfg: TrainingConfig):
    """Returns update(loss) -> True when training should stop."""
    state = {"best": np.inf, "bad": 0}

    def update(loss: float) -> bool:
        if not cfg.early_stop_patience:
            return False
        if state["best"] - loss > cfg.loss_tolerance * max(abs(state["best"]), 1.0):
            state["best"] = loss
            state["bad"] = 0
            return False
        state["bad"] += 1
        state["best"] = min(state["best"], loss)
        return state["bad"] >= cfg.early_stop_patience

    return update


def train(
    dataset: VerticalDataset,
    model_list: list[local_models.LocalModel],
    cfg: TrainingConfig,
    active_party: int | None = None,
    ledger: CommLedger | None = None,
) -> FederationState:
    """Full-batch federated training on the dataset's train rows."""
    widths = dataset.client_widths
    for k, (m, w) in enumerate(zip(model_list, widths)):
        if m.feature_count != w:
            raise ValueError(
                f"client {k}: model expects {m.feature_count} features, "
                f"dataset block has {w}"
            )
    active = dataset.n_clients - 1 if active_party is None else active_party
    ledger = ledger if ledger is not None else CommLedger(trace=cfg.trace_messages)
    blocks = dataset.train_blocks()
    y = dataset.train_labels()
    n, c = y.shape
    k_clients = dataset.n_clients

    model_list = [m.copy() for m in model_list]
    perturbations = draw_perturbations(dataset, model_list, cfg)

    # setup: every client uploads its full confidence once
    per_client = []
    for k in range(k_clients):
        h_k = local_models.forward(model_list[k], blocks[k])
        per_client.append(h_k)
        ledger.add("setup", 0, k, active, CONFIDENCE_FULL, n * c)
    h_total = np.sum(per_client, axis=0)

    state = FederationState(
        dataset=dataset,
        models=model_list,
        config=cfg,
        active_party=active,
        confidence=ConfidenceMatrix(H=h_total, per_client=per_client),
        ledger=ledger,
        perturbations=perturbations,
        missed_rounds=[[] for _ in range(k_clients)],
        estimate_accum=[np.zeros((n, c)) for _ in range(k_clients)],
    )

    state.loss_trace.append(federation_loss(state))
    should_stop = _early_stop_tracker(cfg)
    for epoch in range(1, cfg.max_epochs + 1):
        grad = weighted_loss_grad(state.confidence.H, y, dataset.loss_weights)
        for k in range(k_clients):
            ledger.add("train", epoch, active, k, GRADIENT_BROADCAST, n * c,
                       payload=grad)
        for k in range(k_clients):
            grads = local_models.backward(state.models[k], blocks[k], grad)
            state.models[k] = local_models.apply_update(
                state.models[k], grads, cfg.eta, cfg.l2_lambda, perturbations[k])
            h_new = local_models.forward(state.models[k], blocks[k])
            delta = h_new - state.confidence.per_client[k]
            ledger.add("train", epoch, k, active, CONFIDENCE_DELTA, n * c)
            state.confidence.per_client[k] = h_new
            state.confidence.H = state.confidence.H + delta
        state.epochs_used = epoch
        loss = federation_loss(state)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite training loss at epoch {epoch}")
        state.loss_trace.append(loss)
        if should_stop(loss):
            break
    state.train_epochs = state.epochs_used
    return state


def infer(state: FederationState, test_blocks: list[np.ndarray | None]) -> np.ndarray:
    """Softmax probabilities over summed test confidences; needs every client."""
    if len(test_blocks) != state.n_clients:
        raise ValueError(
            f"got {len(test_blocks)} test blocks for {state.n_clients} clients"
        )
    for k, block in enumerate(test_blocks):
        if block is None:
            raise ValueError(
                f"inference requires all clients online; client {k} is missing"
            )
    h = sum(
        local_models.forward(state.models[k], test_blocks[k])
        for k in range(state.n_clients)
    )
    return softmax_rows(h)


def capture_contribution_factors(
    state: FederationState, rcond: float = 1e-12
) -> ContributionFactors:
    """Per-sample projection of each client's hypothetical update effect.

    Runs a probe round: every client reports, per sample, the confidence
    change its own single-sample update would cause. The probe never commits
    any update, so the federation state is unchanged. Rows where the
    aggregate change is numerically zero fall back to the uniform share.
    """
    ds = state.dataset
    blocks = ds.train_blocks()
    y = ds.train_labels()
    n, c = y.shape
    k_clients = state.n_clients
    grad = weighted_loss_grad(state.confidence.H, y, ds.loss_weights)

    deltas = []
    for k in range(k_clients):
        state.ledger.add("probe", state.epochs_used, state.active_party, k,
                         FACTOR_PROBE, n * c)
        d_k = local_models.per_sample_update_deltas(
            state.models[k], blocks[k], grad, state.config.eta)
        deltas.append(d_k)
        state.ledger.add("probe", state.epochs_used, k, state.active_party,
                         FACTOR_PROBE, n * c)
    delta_total = np.sum(deltas, axis=0)

    denom = np.einsum("ij,ij->i", delta_total, delta_total)
    r = np.empty((n, k_clients))
    degenerate = denom < rcond
    safe = ~degenerate
    for k in range(k_clients):
        num = np.einsum("ij,ij->i", deltas[k], delta_total)
        r[safe, k] = num[safe] / denom[safe]
    if degenerate.any():
        logger.warning(
            "contribution factors: %d sample(s) with vanishing aggregate "
            "update, using uniform fallback", int(degenerate.sum()))
        r[degenerate, :] = 1.0 / k_clients
    factors = ContributionFactors(R=r, capture_epoch=state.epochs_used)
    state.factors = factors
    return factors
