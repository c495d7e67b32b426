"""Dataset ingestion, vertical partitioning, normalization and synthesis.

Normalization is two-stage: per-feature min-max to [0, 1], then one global
division by the largest sample norm, so every full feature vector satisfies
||x||_2 <= 1 (required by the certification analysis).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import PURPOSE_SPLIT, PURPOSE_SYNTH, RandomSource


@dataclass
class ScalingRecord:
    shift: np.ndarray          # per-feature minimum
    scale: np.ndarray          # per-feature (max - min), 1.0 for constants
    norm_divisor: float        # global divisor after min-max

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return ((raw - self.shift) / self.scale) / self.norm_divisor

    def invert(self, scaled: np.ndarray) -> np.ndarray:
        return scaled * self.norm_divisor * self.scale + self.shift

    def to_dict(self) -> dict:
        return {
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "norm_divisor": self.norm_divisor,
        }


@dataclass
class RawTable:
    feature_names: list[str]
    features: np.ndarray       # n x d, float64
    labels: np.ndarray         # n, int class indices
    label_values: list         # class index -> original label value


@dataclass
class VerticalDataset:
    blocks: list[np.ndarray]           # per-client feature slices, n x d_k
    labels_onehot: np.ndarray          # n x C, held by the active party
    train_mask: np.ndarray             # bool, n
    test_mask: np.ndarray              # bool, n
    feature_assignment: list[int]      # global feature index -> client
    scaling: ScalingRecord | None = None
    loss_weights: np.ndarray | None = None   # per train row, defaults to ones

    def __post_init__(self):
        if self.loss_weights is None:
            self.loss_weights = np.ones(int(self.train_mask.sum()))

    @property
    def n_samples(self) -> int:
        return self.blocks[0].shape[0]

    @property
    def n_clients(self) -> int:
        return len(self.blocks)

    @property
    def class_count(self) -> int:
        return self.labels_onehot.shape[1]

    @property
    def client_widths(self) -> list[int]:
        return [b.shape[1] for b in self.blocks]

    def train_blocks(self) -> list[np.ndarray]:
        return [b[self.train_mask] for b in self.blocks]

    def test_blocks(self) -> list[np.ndarray]:
        return [b[self.test_mask] for b in self.blocks]

    def train_labels(self) -> np.ndarray:
        return self.labels_onehot[self.train_mask]

    def test_labels(self) -> np.ndarray:
        return self.labels_onehot[self.test_mask]

    def full_train_matrix(self) -> np.ndarray:
        return np.hstack(self.train_blocks())

    def copy(self) -> "VerticalDataset":
        return VerticalDataset(
            blocks=[b.copy() for b in self.blocks],
            labels_onehot=self.labels_onehot.copy(),
            train_mask=self.train_mask.copy(),
            test_mask=self.test_mask.copy(),
            feature_assignment=list(self.feature_assignment),
            scaling=self.scaling,
            loss_weights=None if self.loss_weights is None else self.loss_weights.copy(),
        )

    def global_to_local(self, feature: int) -> tuple[int, int]:
        """Map a global feature index to (client, column within block)."""
        client = self.feature_assignment[feature]
        offset = sum(w for c, w in enumerate(self.client_widths) if c < client)
        return client, feature - offset


def load_csv(path: str, label_column: str) -> RawTable:
    """Parse a numeric-feature CSV with a header row.

    Raises with the offending line number on parse failure and with
    (line, column) coordinates on a non-numeric feature cell.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file, no header row")
        if label_column not in header:
            raise ValueError(
                f"{path}: label column {label_column!r} not found; "
                f"available columns: {header}"
            )
        label_idx = header.index(label_column)
        feature_names = [h for i, h in enumerate(header) if i != label_idx]
        rows = []
        labels = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(
                    f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}"
                )
            feats = []
            for i, cell in enumerate(row):
                if i == label_idx:
                    labels.append(cell.strip())
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise ValueError(
                        f"{path}:{line_no}: non-numeric value {cell!r} in "
                        f"column {header[i]!r}"
                    ) from None
                if not np.isfinite(value):
                    raise ValueError(
                        f"{path}:{line_no}: non-finite value {cell!r} in "
                        f"column {header[i]!r}"
                    )
                feats.append(value)
            rows.append(feats)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    features = np.asarray(rows, dtype=np.float64)
    label_values = sorted(set(labels), key=_label_sort_key)
    index = {v: i for i, v in enumerate(label_values)}
    y = np.asarray([index[v] for v in labels], dtype=np.int64)
    return RawTable(feature_names, features, y, label_values)


def _label_sort_key(value: str):
    try:
        return (0, float(value), value)
    except ValueError:
        return (1, 0.0, value)


def one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    return np.eye(class_count)[labels]


def normalize_and_partition(
    table: RawTable,
    client_feature_counts: list[int],
    seed: int,
    train_fraction: float = 0.8,
) -> VerticalDataset:
    """Min-max + global-norm scaling, contiguous client blocks, seeded split."""
    n, d = table.features.shape
    if sum(client_feature_counts) != d:
        raise ValueError(
            f"client feature counts {client_feature_counts} sum to "
            f"{sum(client_feature_counts)}, dataset has {d} features"
        )
    lo = table.features.min(axis=0)
    hi = table.features.max(axis=0)
    scale = np.where(hi > lo, hi - lo, 1.0)
    x01 = (table.features - lo) / scale
    divisor = float(np.linalg.norm(x01, axis=1).max())
    if divisor <= 0:
        divisor = 1.0
    x = x01 / divisor
    scaling = ScalingRecord(shift=lo, scale=scale, norm_divisor=divisor)

    source = RandomSource(seed).party_stream(PURPOSE_SPLIT, 0)
    perm = source.generator().permutation(n)
    n_train = int(round(train_fraction * n))
    train_mask = np.zeros(n, dtype=bool)
    train_mask[perm[:n_train]] = True
    test_mask = ~train_mask

    blocks = []
    assignment = []
    offset = 0
    for client, width in enumerate(client_feature_counts):
        blocks.append(x[:, offset:offset + width].copy())
        assignment.extend([client] * width)
        offset += width

    class_count = int(table.labels.max()) + 1
    return VerticalDataset(
        blocks=blocks,
        labels_onehot=one_hot(table.labels, class_count),
        train_mask=train_mask,
        test_mask=test_mask,
        feature_assignment=assignment,
        scaling=scaling,
    )


def from_blocks(
    blocks: list[np.ndarray],
    labels_onehot: np.ndarray,
    train_mask: np.ndarray | None = None,
) -> VerticalDataset:
    """Assemble a dataset from explicit per-client matrices (test fixtures).

    No scaling is applied; callers own the norm convention.
    """
    blocks = [np.asarray(b, dtype=np.float64) for b in blocks]
    n = blocks[0].shape[0]
    if train_mask is None:
        train_mask = np.ones(n, dtype=bool)
    assignment = []
    for client, b in enumerate(blocks):
        assignment.extend([client] * b.shape[1])
    return VerticalDataset(
        blocks=blocks,
        labels_onehot=np.asarray(labels_onehot, dtype=np.float64),
        train_mask=np.asarray(train_mask, dtype=bool),
        test_mask=~np.asarray(train_mask, dtype=bool),
        feature_assignment=assignment,
    )


def synthesize(
    n: int,
    client_feature_counts: list[int],
    class_count: int,
    seed: int,
    margin: float = 0.0,
    train_fraction: float = 0.8,
) -> VerticalDataset:
    """Gaussian features with linearly separable labels of controllable margin.

    Labels come from a ground-truth linear map with orthonormal class
    directions; `margin` shifts each sample along its class direction, so
    margin -> infinity forces perfect linear separability.
    """
    if n < 2:
        raise ValueError("need at least 2 samples")
    if len(client_feature_counts) < 2:
        raise ValueError("need at least 2 clients")
    d = sum(client_feature_counts)
    if d < class_count:
        raise ValueError("need at least as many features as classes")
    rng = RandomSource(seed).party_stream(PURPOSE_SYNTH, 0).generator()
    x = rng.normal(size=(n, d))
    w = rng.normal(size=(d, class_count))
    q, _ = np.linalg.qr(w)            # orthonormal class directions
    labels = np.argmax(x @ q, axis=1)
    if margin > 0:
        x = x + margin * q[:, labels].T
    table = RawTable(
        feature_names=[f"f{j}" for j in range(d)],
        features=x,
        labels=labels,
        label_values=list(range(class_count)),
    )
    return normalize_and_partition(table, client_feature_counts, seed, train_fraction)


def save_manifest(dataset: VerticalDataset, seed: int, path: str) -> None:
    """Record partition, seed and scaling so a run is exactly reproducible."""
    manifest = {
        "n_samples": dataset.n_samples,
        "client_feature_counts": dataset.client_widths,
        "class_count": dataset.class_count,
        "seed": seed,
        "train_rows": int(dataset.train_mask.sum()),
        "test_rows": int(dataset.test_mask.sum()),
        "scaling": None if dataset.scaling is None else dataset.scaling.to_dict(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
