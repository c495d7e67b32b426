"""Dense float64 matrix primitives, seeded random streams, activations and loss.

Everything here is a pure function of its inputs; all arithmetic is 64-bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Stream-id layout: purpose * STREAM_STRIDE + party index. Keeps every
# (party, purpose) pair on its own independent substream of the master seed.
STREAM_STRIDE = 4096
PURPOSE_INIT = 0
PURPOSE_NOISE = 1
PURPOSE_SPLIT = 2
PURPOSE_SYNTH = 3
PURPOSE_SCHEDULE = 4


@dataclass(frozen=True)
class RandomSource:
    """Deterministic random stream keyed by (master_seed, stream_id).

    The same (master_seed, stream_id) always reproduces the same draw
    sequence; distinct stream ids are statistically independent.
    """

    master_seed: int
    stream_id: int = 0

    def stream(self, stream_id: int) -> "RandomSource":
        return RandomSource(self.master_seed, stream_id)

    def party_stream(self, purpose: int, party: int) -> "RandomSource":
        return self.stream(purpose * STREAM_STRIDE + party)

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_id,))
        return np.random.default_rng(seq)


def ensure_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_same_shape(h: np.ndarray, y: np.ndarray) -> None:
    if h.shape != y.shape:
        raise ValueError(
            f"confidence matrix shape {h.shape} does not match label shape {y.shape}"
        )


def cross_entropy_rows(h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row cross entropy of softmax(h) against one-hot rows y (stable)."""
    _check_same_shape(h, y)
    m = h.max(axis=1, keepdims=True)
    lse = np.log(np.exp(h - m).sum(axis=1)) + m[:, 0]
    return lse - (h * y).sum(axis=1)


def cross_entropy_l2(
    h: np.ndarray,
    y: np.ndarray,
    params: np.ndarray,
    l2_lambda: float,
    perturbation: np.ndarray | None = None,
    weights: np.ndarray | None = None,
) -> float:
    """Mean cross entropy plus (l2_lambda/2)*||params||^2 plus perturbation.params.

    `weights` optionally re-weights rows (used to mask removed samples);
    the data term is then a weighted mean.
    """
    if l2_lambda < 0:
        raise ValueError("l2_lambda must be >= 0")
    ce = cross_entropy_rows(h, y)
    if weights is None:
        data = float(ce.mean())
    else:
        total = float(weights.sum())
        if total <= 0:
            raise ValueError("loss weights sum to zero")
        data = float((ce * weights).sum() / total)
    params = np.asarray(params, dtype=np.float64).ravel()
    loss = data + 0.5 * l2_lambda * float(params @ params)
    if perturbation is not None:
        b = np.asarray(perturbation, dtype=np.float64).ravel()
        if b.shape != params.shape:
            raise ValueError(
                f"perturbation shape {b.shape} does not match params shape {params.shape}"
            )
        loss += float(b @ params)
    return loss


def gaussian_vector(source: RandomSource, dim: int, sigma: float) -> np.ndarray:
    """Deterministic i.i.d. N(0, sigma^2) vector from the given stream."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0.0:
        return np.zeros(dim)
    return sigma * source.generator().standard_normal(dim)
