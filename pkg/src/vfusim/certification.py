"""Certified-unlearning accounting: perturbation sensitivity, noise
calibration, gradient residual and the analytic residual bound.

Two closed forms are deliberately kept side by side: the noise scale uses the
(1 + tau*gamma_z*n) factor and the residual bound uses (1 + tau*gamma*n); the
two smoothness constants are configured independently and the report carries
both, so either reading can be audited.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import models as local_models
from .federation import FederationState, weighted_loss_grad
from .data import VerticalDataset

PASS_ATOL = 1e-6            # slack for the residual-vs-bound comparison
SIGMA_MATCH_RTOL = 1e-9     # calibration check on the trained noise scale


@dataclass
class CertParams:
    epsilon: float
    c: float
    tau: float
    gamma: float              # gradient smoothness in the parameters
    gamma_z: float            # gradient Lipschitz constant in the data
    n: int                    # training sample count
    lam: float                # L2 coefficient

    def __post_init__(self):
        for name in ("epsilon", "c", "gamma", "gamma_z", "lam"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.n <= 0:
            raise ValueError("n must be > 0")


@dataclass
class CertificationReport:
    magnitude: float          # M, summed max per-feature change
    z_count: int              # number of affected samples
    sigma: float              # calibrated noise scale
    residual: float
    bound: float
    epsilon: float
    delta: float
    passed: bool
    reason: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def perturbation_magnitude(
    x_old: np.ndarray, x_new: np.ndarray
) -> tuple[float, int]:
    """(M, |Z|): summed max per-feature change and affected-sample count."""
    x_old = np.asarray(x_old, dtype=np.float64)
    x_new = np.asarray(x_new, dtype=np.float64)
    if x_old.shape != x_new.shape:
        raise ValueError(
            f"dataset shapes differ: {x_old.shape} vs {x_new.shape}"
        )
    diff = np.abs(x_new - x_old)
    per_feature_max = diff.max(axis=0) if diff.size else np.zeros(0)
    magnitude = float(per_feature_max.sum())
    z_count = int((diff > 0).any(axis=1).sum())
    return magnitude, z_count


def noise_sigma(p: CertParams, magnitude: float, z_count: int) -> float:
    """Calibrated Gaussian scale c*(1 + tau*gamma_z*n)*gamma_z*M*|Z|/epsilon."""
    if p.epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    return p.c * (1.0 + p.tau * p.gamma_z * p.n) * p.gamma_z * magnitude * z_count / p.epsilon


def residual_bound(p: CertParams, magnitude: float, z_count: int) -> float:
    """Analytic cap on the post-update gradient residual:
    (1 + tau*gamma*n) * gamma_z * M * |Z|."""
    return (1.0 + p.tau * p.gamma * p.n) * p.gamma_z * magnitude * z_count


def delta_from_c(c: float) -> float:
    """Failure probability 1.5*exp(-c^2/2) of the Gaussian mechanism."""
    if c < 0:
        raise ValueError("c must be >= 0")
    return 1.5 * math.exp(-c * c / 2.0)


def gradient_residual(state: FederationState, dataset: VerticalDataset | None = None) -> float:
    """L2 norm of the full training gradient of the perturbed objective,
    concatenated over every client's parameters, on the (corrected) dataset."""
    ds = state.dataset if dataset is None else dataset
    blocks = ds.train_blocks()
    y = ds.train_labels()
    h = sum(
        local_models.forward(state.models[k], blocks[k])
        for k in range(state.n_clients)
    )
    grad = weighted_loss_grad(h, y, ds.loss_weights)
    parts = []
    for k in range(state.n_clients):
        grads = local_models.backward(state.models[k], blocks[k], grad)
        model = state.models[k]
        b = state.perturbations[k]
        offset = 0
        flat = []
        for p, (dw, db) in enumerate(grads):
            w = model.weights[p]
            gw = dw + state.config.l2_lambda * w
            if b is not None:
                gw = gw + b[offset:offset + w.size].reshape(w.shape)
            offset += w.size
            flat.append(gw.ravel())
            bias = model.biases[p]
            if bias is not None:
                gb = db + state.config.l2_lambda * bias
                if b is not None:
                    gb = gb + b[offset:offset + bias.size]
                offset += bias.size
                flat.append(gb.ravel())
        parts.append(np.concatenate(flat))
    return float(np.linalg.norm(np.concatenate(parts)))


def certify(
    state: FederationState,
    x_old_train: np.ndarray,
    x_new_train: np.ndarray,
    p: CertParams,
) -> CertificationReport:
    """Assemble the certification report for a completed unlearning run."""
    magnitude, z_count = perturbation_magnitude(x_old_train, x_new_train)
    sigma = noise_sigma(p, magnitude, z_count)
    residual = gradient_residual(state)
    bound = residual_bound(p, magnitude, z_count)
    delta = delta_from_c(p.c)

    reason = None
    trained_sigma = state.config.noise_sigma
    calibrated = math.isclose(trained_sigma, sigma,
                              rel_tol=SIGMA_MATCH_RTOL, abs_tol=1e-15)
    passed = residual <= bound + PASS_ATOL
    if not calibrated:
        passed = False
        reason = (
            f"uncalibrated noise: trained with sigma={trained_sigma}, "
            f"required sigma={sigma}"
        )
    elif not passed:
        reason = f"residual {residual} exceeds bound {bound}"
    return CertificationReport(
        magnitude=magnitude,
        z_count=z_count,
        sigma=sigma,
        residual=residual,
        bound=bound,
        epsilon=p.epsilon,
        delta=delta,
        passed=passed,
        reason=reason,
    )
