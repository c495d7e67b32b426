"""Asynchronous unlearning: online schedules, offline-client estimation from
contribution factors, the schedule-driven round engine shared with the
synchronous path, and catch-up reconciliation for returning clients.

While a client is offline its parameters are never touched; only the active
party's belief about its confidence contribution advances, via the factor
estimates. A returning client replays the gradient broadcasts it missed and
swaps its estimated contribution for the recomputed true one.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import models as local_models
from .certification import gradient_residual
from .federation import (
    CONFIDENCE_DELTA,
    CONFIDENCE_FULL,
    GRADIENT_BROADCAST,
    CommLedger,
    ContributionFactors,
    FederationState,
    TrainingConfig,
    _early_stop_tracker,
    federation_loss,
    weighted_loss_grad,
)
from .numerics import PURPOSE_SCHEDULE, RandomSource
from .unlearning import UnlearningRequest, apply_request, first_round_step

logger = logging.getLogger(__name__)

FALLBACK_FACTOR_MASS = 1e-9


@dataclass
class OnlineSchedule:
    """Per unlearning round, the set of online clients."""

    rounds: list[frozenset[int]]

    def online(self, round_no: int) -> frozenset[int]:
        return self.rounds[round_no - 1]

    def validate(self, n_clients: int, active: int, requester: int,
                 max_rounds: int) -> None:
        if len(self.rounds) < max_rounds:
            raise ValueError(
                f"schedule covers {len(self.rounds)} rounds, need {max_rounds}"
            )
        for i, online in enumerate(self.rounds, start=1):
            for k in online:
                if not 0 <= k < n_clients:
                    raise ValueError(f"round {i}: unknown client {k}")
            if active not in online or requester not in online:
                raise ValueError(
                    f"round {i}: active party and requesting client must be online"
                )

    @classmethod
    def full(cls, n_clients: int, rounds: int) -> "OnlineSchedule":
        everyone = frozenset(range(n_clients))
        return cls([everyone] * rounds)

    @classmethod
    def random_dropout(
        cls,
        n_clients: int,
        rounds: int,
        online_count: int,
        seed: int,
        always_online: frozenset[int],
    ) -> "OnlineSchedule":
        """Exactly `online_count` clients per round, always including
        `always_online`, the rest drawn without replacement."""
        if online_count < len(always_online) or online_count > n_clients:
            raise ValueError("online_count out of range")
        pool = np.asarray(sorted(set(range(n_clients)) - set(always_online)))
        rng = RandomSource(seed).party_stream(PURPOSE_SCHEDULE, 0).generator()
        out = []
        extra = online_count - len(always_online)
        for _ in range(rounds):
            picked = rng.choice(pool, size=extra, replace=False) if extra else []
            out.append(frozenset(always_online) | frozenset(int(i) for i in picked))
        return cls(out)

    @classmethod
    def from_fraction(
        cls,
        n_clients: int,
        rounds: int,
        online_fraction: float,
        seed: int,
        always_online: frozenset[int],
    ) -> "OnlineSchedule":
        count = int(round(online_fraction * n_clients))
        count = max(count, len(always_online))
        return cls.random_dropout(n_clients, rounds, count, seed, always_online)


def estimate_offline(
    deltas: dict[int, np.ndarray],
    factors: ContributionFactors,
    offline: frozenset[int] | set[int],
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Estimated aggregate update and per-offline-client updates.

    Row-wise: delta_H = sum_online(delta_h) / sum_online(R) and
    delta_h_k = R_k / sum_online(R) * sum_online(delta_h). Rows whose online
    factor mass vanishes fall back to the raw online sum with zero offline
    estimates (logged).
    """
    if not deltas:
        raise ValueError("estimation needs a non-empty online set")
    online = sorted(deltas)
    delta_sum = np.sum([deltas[k] for k in online], axis=0)
    if not offline:
        return delta_sum, {}
    r = factors.R
    mass = r[:, online].sum(axis=1)
    degenerate = mass <= FALLBACK_FACTOR_MASS
    safe_mass = np.where(degenerate, 1.0, mass)
    delta_h_total = delta_sum / safe_mass[:, None]
    delta_h_total[degenerate] = delta_sum[degenerate]
    if degenerate.any():
        logger.warning(
            "offline estimation: %d sample(s) with no online factor mass, "
            "using the raw online sum", int(degenerate.sum()))
    estimates: dict[int, np.ndarray] = {}
    for k in sorted(offline):
        share = np.where(degenerate, 0.0, r[:, k] / safe_mass)
        estimates[k] = share[:, None] * delta_sum
    return delta_h_total, estimates


def run_unlearning_rounds(
    state: FederationState,
    request: UnlearningRequest,
    cfg: TrainingConfig,
    schedule: OnlineSchedule,
    update_clients: frozenset[int] | None = None,
) -> FederationState:
    """Schedule-driven unlearning engine (round 1 carries the combined
    descent/ascent update; later rounds are plain descent on the corrected
    data). Synchronous unlearning is the all-online special case.
    """
    requester = request.client if request.client is not None else state.active_party
    schedule.validate(state.n_clients, state.active_party, requester,
                      cfg.max_epochs)
    old_dataset = state.dataset
    new_dataset, correction = apply_request(old_dataset, request)

    out = state.copy()
    out.dataset = new_dataset
    out.ledger = CommLedger(trace=cfg.trace_messages)
    out.loss_trace = []
    out.residual_trace = []
    out.epochs_used = 0
    out.unlearn_history = []
    n_train = int(new_dataset.train_mask.sum())
    c = new_dataset.class_count
    out.estimate_accum = [np.zeros((n_train, c)) for _ in range(out.n_clients)]
    out.missed_rounds = [[] for _ in range(out.n_clients)]
    out.old_train_blocks = old_dataset.train_blocks()
    out.unlearn_config = cfg

    blocks_new = new_dataset.train_blocks()
    blocks_old = out.old_train_blocks
    y = new_dataset.train_labels()
    active = out.active_party
    k_clients = out.n_clients
    updaters = frozenset(range(k_clients)) if update_clients is None else frozenset(update_clients)

    # each client's own view of its latest confidence; differs from the active
    # party's belief only by accumulated estimates for clients that missed rounds
    own_h = [
        local_models.forward(out.models[k], blocks_old[k])
        for k in range(k_clients)
    ]

    should_stop = _early_stop_tracker(cfg)
    for round_no in range(1, cfg.max_epochs + 1):
        online = schedule.online(round_no)
        if round_no == 1:
            # excision: online clients with corrected blocks push the change
            for k in sorted(online):
                if k in correction.changed_clients:
                    h_corr = local_models.forward(out.models[k], blocks_new[k])
                    delta = h_corr - own_h[k]
                    if np.any(delta):
                        out.ledger.add("unlearn", 1, k, active,
                                       CONFIDENCE_DELTA, n_train * c)
                    own_h[k] = h_corr
                    out.confidence.per_client[k] = out.confidence.per_client[k] + delta
                    out.confidence.H = out.confidence.H + delta
            h_old = sum(
                local_models.forward(out.models[k], blocks_old[k])
                for k in range(k_clients)
            )
            g_old = weighted_loss_grad(h_old, y, old_dataset.loss_weights)
            g_new = weighted_loss_grad(out.confidence.H, y, new_dataset.loss_weights)
            tau = cfg.first_round_tau
            out.unlearn_history.append(
                {"kind": "first_round", "g_old": g_old, "g_new": g_new, "tau": tau})
            deltas: dict[int, np.ndarray] = {}
            for k in sorted(online):
                out.ledger.add("unlearn", 1, active, k, GRADIENT_BROADCAST,
                               n_train * c, payload=g_new)
                out.ledger.add("unlearn", 1, active, k, GRADIENT_BROADCAST,
                               n_train * c, payload=g_old)
                if k not in updaters:
                    continue
                updated = first_round_step(
                    out.models[k], blocks_old[k], blocks_new[k], g_old, g_new, tau)
                h_new = local_models.forward(updated, blocks_new[k])
                out.models[k] = updated
                deltas[k] = h_new - own_h[k]
                own_h[k] = h_new
                out.ledger.add("unlearn", 1, k, active, CONFIDENCE_DELTA,
                               n_train * c)
        else:
            grad = weighted_loss_grad(out.confidence.H, y, new_dataset.loss_weights)
            out.unlearn_history.append({"kind": "descent", "g": grad})
            deltas = {}
            for k in sorted(online):
                out.ledger.add("unlearn", round_no, active, k,
                               GRADIENT_BROADCAST, n_train * c, payload=grad)
                if k not in updaters:
                    continue
                grads = local_models.backward(out.models[k], blocks_new[k], grad)
                out.models[k] = local_models.apply_update(
                    out.models[k], grads, cfg.eta, cfg.l2_lambda,
                    out.perturbations[k])
                h_new = local_models.forward(out.models[k], blocks_new[k])
                deltas[k] = h_new - own_h[k]
                own_h[k] = h_new
                out.ledger.add("unlearn", round_no, k, active,
                               CONFIDENCE_DELTA, n_train * c)

        offline = frozenset(range(k_clients)) - online
        for k, delta in deltas.items():
            out.confidence.per_client[k] = out.confidence.per_client[k] + delta
            out.confidence.H = out.confidence.H + delta
        if offline and deltas:
            if out.factors is None:
                raise ValueError(
                    "asynchronous unlearning requires captured contribution factors"
                )
            _, estimates = estimate_offline(deltas, out.factors, offline)
            for k, est in estimates.items():
                out.confidence.per_client[k] = out.confidence.per_client[k] + est
                out.confidence.H = out.confidence.H + est
                out.estimate_accum[k] = out.estimate_accum[k] + est
        for k in sorted(offline):
            out.missed_rounds[k].append(round_no)

        out.epochs_used = round_no
        loss = federation_loss(out)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite unlearning loss at round {round_no}")
        out.loss_trace.append(loss)
        out.residual_trace.append(gradient_residual(out))
        if should_stop(loss):
            break
    return out


def unlearn_async(
    state: FederationState,
    request: UnlearningRequest,
    schedule: OnlineSchedule,
    cfg: TrainingConfig,
) -> FederationState:
    """Unlearning under a partial-participation schedule; bit-identical to the
    synchronous path when every round is fully online."""
    return run_unlearning_rounds(state, request, cfg, schedule)


def reconcile_client(state: FederationState, k: int) -> FederationState:
    """Catch-up for a client that missed rounds: replay the stored gradient
    broadcasts in order, then swap its estimated contribution in H for the
    recomputed true one. No-op for clients that never went offline."""
    if not state.missed_rounds or (
        not state.missed_rounds[k] and not np.any(state.estimate_accum[k])
    ):
        return state
    out = state.copy()
    cfg = out.unlearn_config if out.unlearn_config is not None else out.config
    blocks_new = out.dataset.train_blocks()
    blocks_old = out.old_train_blocks
    n_train, c = out.confidence.H.shape
    active = out.active_party

    for round_no in out.missed_rounds[k]:
        payload = out.unlearn_history[round_no - 1]
        if payload["kind"] == "first_round":
            out.ledger.add("reconcile", round_no, active, k, GRADIENT_BROADCAST,
                           n_train * c * 2)
            out.models[k] = first_round_step(
                out.models[k], blocks_old[k], blocks_new[k],
                payload["g_old"], payload["g_new"], payload["tau"])
        else:
            out.ledger.add("reconcile", round_no, active, k, GRADIENT_BROADCAST,
                           n_train * c)
            grads = local_models.backward(out.models[k], blocks_new[k], payload["g"])
            out.models[k] = local_models.apply_update(
                out.models[k], grads, cfg.eta, cfg.l2_lambda, out.perturbations[k])
    out.missed_rounds[k] = []

    h_true = local_models.forward(out.models[k], blocks_new[k])
    out.ledger.add("reconcile", out.epochs_used, k, active, CONFIDENCE_FULL,
                   n_train * c)
    out.confidence.H = out.confidence.H + (h_true - out.confidence.per_client[k])
    out.confidence.per_client[k] = h_true
    out.estimate_accum[k] = np.zeros((n_train, c))
    return out


def reconcile_all(state: FederationState) -> FederationState:
    """Reconcile every client that missed rounds (called before inference)."""
    out = state
    for k in range(state.n_clients):
        if out.missed_rounds and out.missed_rounds[k]:
            out = reconcile_client(out, k)
    return out
