"""Experiment orchestration: configuration, run records, single runs and
sweeps, with JSON-lines results, communication-ledger CSV and plot-data CSV.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, asdict, replace as dc_replace

import numpy as np

from . import models as local_models
from .async_unlearning import (
    OnlineSchedule,
    reconcile_all,
    unlearn_async,
)
from .certification import CertParams, CertificationReport, certify, noise_sigma
from .data import VerticalDataset, load_csv, normalize_and_partition, save_manifest, synthesize
from .federation import (
    CommLedger,
    FederationState,
    TrainingConfig,
    capture_contribution_factors,
    infer,
    init_models,
    train,
)
from .metrics import accuracy, auc
from .unlearning import (
    UnlearningRequest,
    apply_request,
    retrain_baseline,
    unlearn_sync,
    vfulr_baseline,
)

logger = logging.getLogger(__name__)

MODES = ("train_only", "sync", "async", "retrain", "vfulr")


@dataclass
class ExperimentConfig:
    run_id: str
    mode: str
    dataset: dict
    model: dict = field(default_factory=lambda: {"kind": "linear"})
    training: dict = field(default_factory=dict)
    unlearning: dict = field(default_factory=dict)
    request: dict | None = None
    schedule: dict | None = None
    certification: dict | None = None
    output: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        if cfg.mode not in MODES:
            raise ValueError(f"unknown mode {cfg.mode!r}; expected one of {MODES}")
        return cfg

    def training_config(self) -> TrainingConfig:
        t = dict(self.training)
        t.setdefault("eta", 1.0)
        return TrainingConfig(**t)

    def unlearning_config(self) -> TrainingConfig:
        base = dict(self.training)
        base.pop("max_epochs", None)    # the training cap never applies here
        base.update(self.unlearning)
        base.setdefault("eta", 1.0)
        base.setdefault("max_epochs", 50)
        return TrainingConfig(**base)

    def build_dataset(self) -> VerticalDataset:
        spec = self.dataset
        seed = self.training_config().seed
        if "csv" in spec:
            table = load_csv(spec["csv"], spec["label_column"])
            return normalize_and_partition(
                table, spec["client_feature_counts"], seed,
                train_fraction=spec.get("train_fraction", 0.8))
        if "synthetic" in spec:
            syn = spec["synthetic"]
            return synthesize(
                syn["n"], syn["client_feature_counts"], syn.get("class_count", 2),
                seed, margin=syn.get("margin", 0.0),
                train_fraction=syn.get("train_fraction", 0.8))
        raise ValueError("dataset spec needs either 'csv' or 'synthetic'")

    def build_request(self, dataset: VerticalDataset) -> UnlearningRequest | None:
        if self.request is None:
            return None
        r = dict(self.request)
        scenario = r.pop("scenario")
        request = UnlearningRequest(
            scenario=scenario,
            client=r.pop("client", None),
            features=tuple(r.pop("features", ()) or ()),
            cells=tuple(tuple(c) for c in r.pop("cells", ()) or ()),
            samples=tuple(r.pop("samples", ()) or ()),
            class_id=r.pop("class_id", None),
            requested_at_epoch=r.pop("requested_at_epoch", 0),
            deadline=r.pop("deadline", None),
        )
        if r:
            raise ValueError(f"unknown request keys: {sorted(r)}")
        request.validate(dataset)
        return request

    def build_schedule(
        self, dataset: VerticalDataset, request: UnlearningRequest,
        rounds: int, active: int,
    ) -> OnlineSchedule:
        spec = self.schedule or {}
        requester = request.client if request.client is not None else active
        always = frozenset({active, requester})
        if "rounds" in spec:
            return OnlineSchedule([frozenset(r) for r in spec["rounds"]])
        if "online_count" in spec:
            return OnlineSchedule.random_dropout(
                dataset.n_clients, rounds, spec["online_count"],
                spec.get("seed", self.training_config().seed), always)
        if "online_fraction" in spec:
            return OnlineSchedule.from_fraction(
                dataset.n_clients, rounds, spec["online_fraction"],
                spec.get("seed", self.training_config().seed), always)
        return OnlineSchedule.full(dataset.n_clients, rounds)


@dataclass
class ResultRecord:
    run_id: str
    mode: str
    epochs_used: int
    accuracy: float
    auc: float
    scalars_total: int
    scalars_per_epoch: float
    wall_seconds: float
    final_loss: float | None = None
    residual_trace: list[float] = field(default_factory=list)
    certification: dict | None = None
    axis_value: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _evaluate(state: FederationState) -> tuple[float, float]:
    probs = infer(state, state.dataset.test_blocks())
    labels = state.dataset.test_labels()
    return accuracy(probs, labels), auc(probs, labels)


def _state_from_checkpoints(
    dataset: VerticalDataset, paths: list[str], cfg: TrainingConfig
) -> FederationState:
    """Resume from per-party checkpoint files instead of training."""
    if len(paths) != dataset.n_clients:
        raise ValueError(
            f"{len(paths)} checkpoints for {dataset.n_clients} clients")
    from . import federation
    from .federation import CommLedger, ConfidenceMatrix

    model_list = [local_models.load_checkpoint(p) for p in paths]
    blocks = dataset.train_blocks()
    n, c = dataset.train_labels().shape
    per_client = [
        local_models.forward(model_list[k], blocks[k])
        for k in range(dataset.n_clients)
    ]
    return FederationState(
        dataset=dataset,
        models=model_list,
        config=cfg,
        active_party=dataset.n_clients - 1,
        confidence=ConfidenceMatrix(H=np.sum(per_client, axis=0),
                                    per_client=per_client),
        ledger=CommLedger(trace=cfg.trace_messages),
        perturbations=federation.draw_perturbations(dataset, model_list, cfg),
        missed_rounds=[[] for _ in range(dataset.n_clients)],
        estimate_accum=[np.zeros((n, c)) for _ in range(dataset.n_clients)],
    )


def run_experiment(cfg: ExperimentConfig) -> ResultRecord:
    """Train, capture factors, dispatch the configured mode, evaluate, and
    append the record to the configured output files."""
    started = time.perf_counter()
    dataset = cfg.build_dataset()
    train_cfg = cfg.training_config()
    request = cfg.build_request(dataset)

    cert_params = None
    if cfg.certification is not None:
        if request is None:
            raise ValueError("certification requires an unlearning request")
        _, correction = apply_request(dataset, request)
        from .certification import perturbation_magnitude
        magnitude, z_count = perturbation_magnitude(
            correction.x_old_train, correction.x_new_train)
        unl_cfg = cfg.unlearning_config()
        cert_params = CertParams(
            epsilon=cfg.certification.get("epsilon", 1.0),
            c=cfg.certification.get("c", 2.0),
            tau=unl_cfg.first_round_tau,
            gamma=cfg.certification.get("gamma", 1.0),
            gamma_z=cfg.certification.get("gamma_z", 1.0),
            n=int(dataset.train_mask.sum()),
            lam=max(train_cfg.l2_lambda, 1e-12),
        )
        sigma = noise_sigma(cert_params, magnitude, z_count)
        train_cfg = TrainingConfig(**{**cfg.training, "noise_sigma": sigma})
        logger.info("calibrated training noise sigma=%.6g (M=%.4g, |Z|=%d)",
                    sigma, magnitude, z_count)

    checkpoints = cfg.model.get("checkpoints")
    if checkpoints:
        state = _state_from_checkpoints(dataset, checkpoints, train_cfg)
    else:
        model_list = init_models(
            dataset, train_cfg, kind=cfg.model.get("kind", "linear"),
            hidden=cfg.model.get("hidden", 16))
        state = train(dataset, model_list, train_cfg)
    capture_contribution_factors(state)

    if cfg.mode != "train_only" and request is None:
        raise ValueError(f"mode {cfg.mode!r} requires an unlearning request")
    unl_cfg = cfg.unlearning_config()
    if cert_params is not None:
        unl_cfg = dc_replace(unl_cfg, noise_sigma=train_cfg.noise_sigma)
    report: CertificationReport | None = None

    if cfg.mode == "train_only":
        final = state
        epochs = state.train_epochs
    elif cfg.mode == "sync":
        final = unlearn_sync(state, request, unl_cfg)
        epochs = final.epochs_used
    elif cfg.mode == "async":
        schedule = cfg.build_schedule(dataset, request, unl_cfg.max_epochs,
                                      state.active_party)
        final = unlearn_async(state, request, schedule, unl_cfg)
        epochs = final.epochs_used
        final = reconcile_all(final)
    elif cfg.mode == "retrain":
        corrected, _ = apply_request(dataset, request)
        final = retrain_baseline(
            corrected, train_cfg, model_kind=cfg.model.get("kind", "linear"),
            hidden=cfg.model.get("hidden", 16))
        epochs = final.train_epochs
    elif cfg.mode == "vfulr":
        final = vfulr_baseline(state, request)
        epochs = final.epochs_used
    else:  # pragma: no cover - guarded by from_dict
        raise ValueError(cfg.mode)

    if cert_params is not None and cfg.mode in ("sync", "async"):
        _, correction = apply_request(dataset, request)
        report = certify(final, correction.x_old_train, correction.x_new_train,
                         cert_params)

    acc, area = _evaluate(final)
    wall = time.perf_counter() - started

    mode_ledger = final.ledger
    phase_scalars = mode_ledger.total_scalars("unlearn")
    if cfg.mode in ("train_only", "retrain"):
        phase_scalars = mode_ledger.total_scalars("train")
    total = state.ledger.total_scalars() + (
        mode_ledger.total_scalars() if mode_ledger is not state.ledger else 0)
    record = ResultRecord(
        run_id=cfg.run_id,
        mode=cfg.mode,
        epochs_used=epochs,
        accuracy=acc,
        auc=area,
        scalars_total=total,
        scalars_per_epoch=phase_scalars / max(epochs, 1),
        wall_seconds=wall,
        final_loss=final.loss_trace[-1] if final.loss_trace else None,
        residual_trace=list(final.residual_trace),
        certification=None if report is None else json.loads(report.to_json()),
    )
    _write_outputs(cfg, [record], final)
    return record


def sweep(cfg: ExperimentConfig, axis: str, values: list[float]) -> list[ResultRecord]:
    """One run per axis value under a shared seed policy. Axes:
    `online_count` (async participation) and `removal_fraction` (share of the
    requesting client's features removed)."""
    if not values:
        raise ValueError("sweep needs a non-empty value list")
    records: list[ResultRecord] = []
    for value in values:
        sub = _apply_axis(cfg, axis, value)
        try:
            record = run_experiment(sub)
        except Exception:
            logger.exception("sweep run failed for %s=%s; continuing", axis, value)
            continue
        record.axis_value = float(value)
        record.run_id = f"{cfg.run_id}-{axis}-{value}"
        records.append(record)
    outdir = cfg.output.get("dir")
    if outdir:
        os.makedirs(outdir, exist_ok=True)
        _append_jsonl(os.path.join(outdir, "results.jsonl"), records)
        _write_plot_csv(os.path.join(outdir, "sweep.csv"), axis, records)
        if cfg.output.get("figures", True):
            from .report import render_sweep
            render_sweep(records, axis, os.path.join(outdir, "sweep.png"))
    return records


def _apply_axis(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    raw = json.loads(json.dumps({
        "run_id": cfg.run_id, "mode": cfg.mode, "dataset": cfg.dataset,
        "model": cfg.model, "training": cfg.training, "unlearning": cfg.unlearning,
        "request": cfg.request, "schedule": cfg.schedule,
        "certification": cfg.certification, "output": cfg.output,
    }))
    raw["output"] = dict(raw.get("output") or {})
    raw["output"]["dir"] = None     # per-run files suppressed inside sweeps
    if axis == "online_count":
        raw["mode"] = "async"
        raw["schedule"] = dict(raw.get("schedule") or {})
        raw["schedule"].pop("online_fraction", None)
        raw["schedule"]["online_count"] = int(value)
    elif axis == "removal_fraction":
        request = dict(raw.get("request") or {})
        if request.get("scenario") != "feature_removal":
            raise ValueError("removal_fraction sweeps require a feature_removal request")
        if value <= 0:
            # nothing to remove: the answer is the original model
            raw["mode"] = "train_only"
        else:
            client = request["client"]
            width = _client_width(cfg, client)
            count = max(1, int(math.ceil(value * width)))
            request["features"] = list(range(min(count, width)))
            raw["request"] = request
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")
    cleaned = {k: v for k, v in raw.items() if v is not None}
    return ExperimentConfig.from_dict(cleaned)


def _client_width(cfg: ExperimentConfig, client: int) -> int:
    spec = cfg.dataset
    if "csv" in spec:
        counts = spec["client_feature_counts"]
    else:
        counts = spec["synthetic"]["client_feature_counts"]
    return counts[client]


def _append_jsonl(path: str, records: list[ResultRecord]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def _write_plot_csv(path: str, axis: str, records: list[ResultRecord]) -> None:
    import csv as _csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow([axis, "accuracy", "auc", "epochs", "scalars_per_epoch"])
        for r in records:
            writer.writerow([r.axis_value, r.accuracy, r.auc, r.epochs_used,
                             r.scalars_per_epoch])


def _write_outputs(cfg: ExperimentConfig, records: list[ResultRecord],
                   state: FederationState) -> None:
    outdir = cfg.output.get("dir")
    if not outdir:
        return
    os.makedirs(outdir, exist_ok=True)
    _append_jsonl(os.path.join(outdir, "results.jsonl"), records)
    state.ledger.to_csv(os.path.join(outdir, "comm_ledger.csv"))
    save_manifest(state.dataset, cfg.training_config().seed,
                  os.path.join(outdir, "dataset_manifest.json"))
    for k, model in enumerate(state.models):
        local_models.save_checkpoint(
            model, os.path.join(outdir, f"model_client{k}.json"))
    if cfg.output.get("figures", True):
        from .report import render_run
        render_run(records[-1], state, os.path.join(outdir, "run.png"))
