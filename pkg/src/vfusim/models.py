"""Per-client local models (linear and one-hidden-layer MLP) and the
non-trainable global module (summation + softmax).

Models are value-like: forward/backward are pure, apply_update returns a new
model. Parameter layout for flattening is weights then bias, layer by layer,
row-major.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .numerics import RandomSource, softmax_rows

LINEAR = "linear"
MLP = "mlp"

CHECKPOINT_FORMAT = "vfusim-model-v1"


@dataclass
class LocalModel:
    kind: str
    weights: list[np.ndarray]
    biases: list[np.ndarray | None]
    feature_count: int
    class_count: int

    def copy(self) -> "LocalModel":
        return LocalModel(
            kind=self.kind,
            weights=[w.copy() for w in self.weights],
            biases=[None if b is None else b.copy() for b in self.biases],
            feature_count=self.feature_count,
            class_count=self.class_count,
        )

    def param_count(self) -> int:
        total = sum(w.size for w in self.weights)
        total += sum(0 if b is None else b.size for b in self.biases)
        return total

    def flat_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            if b is not None:
                parts.append(b.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)


@dataclass
class GlobalModel:
    """Non-trainable aggregator: softmax over summed client confidences."""

    class_count: int


# gradients mirror the parameter layout: one (dW, db-or-None) pair per layer
Gradients = list[tuple[np.ndarray, np.ndarray | None]]


def init_linear(
    feature_count: int,
    class_count: int,
    source: RandomSource,
    with_bias: bool = False,
) -> LocalModel:
    rng = source.generator()
    bound = 1.0 / np.sqrt(max(feature_count, 1))
    w = rng.uniform(-bound, bound, size=(feature_count, class_count))
    b = np.zeros(class_count) if with_bias else None
    return LocalModel(LINEAR, [w], [b], feature_count, class_count)


def init_mlp(
    feature_count: int,
    class_count: int,
    source: RandomSource,
    hidden: int = 16,
) -> LocalModel:
    rng = source.generator()
    b1 = 1.0 / np.sqrt(max(feature_count, 1))
    w1 = rng.uniform(-b1, b1, size=(feature_count, hidden))
    h1 = rng.uniform(-b1, b1, size=hidden)
    b2 = 1.0 / np.sqrt(hidden)
    w2 = rng.uniform(-b2, b2, size=(hidden, class_count))
    h2 = rng.uniform(-b2, b2, size=class_count)
    return LocalModel(MLP, [w1, w2], [h1, h2], feature_count, class_count)


def _check_input(model: LocalModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.feature_count:
        raise ValueError(
            f"input shape {x.shape} does not match model feature count "
            f"{model.feature_count}"
        )
    return x


def forward(model: LocalModel, x: np.ndarray) -> np.ndarray:
    """Per-class confidence h_k for each row of x."""
    x = _check_input(model, x)
    if model.kind == LINEAR:
        w, b = model.weights[0], model.biases[0]
        h = x @ w
        if b is not None:
            h = h + b
        return h
    a = x
    last = len(model.weights) - 1
    for p, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w
        if b is not None:
            z = z + b
        a = z if p == last else np.where(z >= 0.0, z, 0.0)
    return a


def backward(model: LocalModel, x: np.ndarray, upstream: np.ndarray) -> Gradients:
    """Parameter gradients given dL/dh_k; shapes mirror the parameters."""
    x = _check_input(model, x)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (x.shape[0], model.class_count):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match "
            f"({x.shape[0]}, {model.class_count})"
        )
    if model.kind == LINEAR:
        dw = x.T @ upstream
        db = upstream.sum(axis=0) if model.biases[0] is not None else None
        return [(dw, db)]
    # forward pass caching pre-activations
    acts = [x]
    pre = []
    a = x
    last = len(model.weights) - 1
    for p, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w
        if b is not None:
            z = z + b
        pre.append(z)
        a = z if p == last else np.where(z >= 0.0, z, 0.0)
        acts.append(a)
    grads: Gradients = [None] * len(model.weights)  # type: ignore[list-item]
    delta = upstream
    for p in range(last, -1, -1):
        dw = acts[p].T @ delta
        db = delta.sum(axis=0) if model.biases[p] is not None else None
        grads[p] = (dw, db)
        if p > 0:
            delta = (delta @ model.weights[p].T) * (pre[p - 1] >= 0.0)
    return grads


def apply_update(
    model: LocalModel,
    grads: Gradients,
    eta: float,
    l2_lambda: float = 0.0,
    perturbation: np.ndarray | None = None,
) -> LocalModel:
    """Gradient step: theta <- theta - eta*(grad + l2_lambda*theta + b_slice).

    `perturbation` is the client's fixed flat noise vector (or None when
    certification noise is disabled); it is sliced over the parameter layout.
    """
    if eta <= 0:
        raise ValueError("eta must be > 0")
    out = model.copy()
    offset = 0
    for p, (dw, db) in enumerate(grads):
        w = out.weights[p]
        step = dw + l2_lambda * w
        if perturbation is not None:
            step = step + perturbation[offset:offset + w.size].reshape(w.shape)
        offset += w.size
        out.weights[p] = w - eta * step
        b = out.biases[p]
        if b is not None:
            if db is None:
                raise ValueError("missing bias gradient for a bias-carrying layer")
            bstep = db + l2_lambda * b
            if perturbation is not None:
                bstep = bstep + perturbation[offset:offset + b.size]
            offset += b.size
            out.biases[p] = b - eta * bstep
    return out


def global_predict(h_total: np.ndarray) -> np.ndarray:
    """Softmax probabilities from the aggregated confidence matrix."""
    return softmax_rows(h_total)


def global_loss_grad(h_total: np.ndarray, y: np.ndarray, n: int) -> np.ndarray:
    """dL/dH = (softmax(H) - Y)/n; identical matrix broadcast to every client."""
    y = np.asarray(y, dtype=np.float64)
    if h_total.shape != y.shape:
        raise ValueError(
            f"confidence shape {h_total.shape} does not match labels {y.shape}"
        )
    return (softmax_rows(h_total) - y) / float(n)


def per_sample_update_deltas(
    model: LocalModel, x: np.ndarray, upstream: np.ndarray, eta: float
) -> np.ndarray:
    """Confidence change each sample's own (hypothetical) update would cause.

    For every row s, applies the single-sample data-term step
    theta - eta * grad_s and reports forward(theta', x_s) - forward(theta, x_s).
    Regularization and noise are excluded: they are not attributable to a
    sample. Linear models admit an exact closed form; the generic path updates
    one sample at a time.
    """
    x = _check_input(model, x)
    n = x.shape[0]
    if model.kind == LINEAR:
        # dW_s = x_s upstream_s^T, so x_s . dW_s = ||x_s||^2 upstream_s;
        # a bias adds its own unit coordinate.
        sq = np.einsum("ij,ij->i", x, x)
        if model.biases[0] is not None:
            sq = sq + 1.0
        return -eta * sq[:, None] * upstream
    deltas = np.empty((n, model.class_count))
    for s in range(n):
        xs = x[s:s + 1]
        gs = backward(model, xs, upstream[s:s + 1])
        updated = apply_update(model, gs, eta)
        deltas[s] = (forward(updated, xs) - forward(model, xs))[0]
    return deltas


def save_checkpoint(model: LocalModel, path: str) -> None:
    layers = []
    for w, b in zip(model.weights, model.biases):
        layers.append({
            "weights_shape": list(w.shape),
            "weights": w.ravel().tolist(),
            "bias": None if b is None else b.tolist(),
        })
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "feature_count": model.feature_count,
        "class_count": model.class_count,
        "layers": layers,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path: str) -> LocalModel:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {payload.get('format')!r}")
    weights = []
    biases: list[np.ndarray | None] = []
    for layer in payload["layers"]:
        shape = tuple(layer["weights_shape"])
        weights.append(np.asarray(layer["weights"], dtype=np.float64).reshape(shape))
        b = layer["bias"]
        biases.append(None if b is None else np.asarray(b, dtype=np.float64))
    return LocalModel(
        kind=payload["kind"],
        weights=weights,
        biases=biases,
        feature_count=int(payload["feature_count"]),
        class_count=int(payload["class_count"]),
    )
