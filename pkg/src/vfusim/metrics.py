"""Fidelity metrics: argmax accuracy and rank-statistic AUC."""
from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import rankdata


def accuracy(probabilities: np.ndarray, labels_onehot: np.ndarray) -> float:
    """Fraction of rows whose argmax matches; ties go to the lowest class."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels_onehot = np.asarray(labels_onehot, dtype=np.float64)
    if probabilities.shape != labels_onehot.shape:
        raise ValueError(
            f"probability shape {probabilities.shape} does not match "
            f"label shape {labels_onehot.shape}"
        )
    if probabilities.shape[0] == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    pred = probabilities.argmax(axis=1)
    true = labels_onehot.argmax(axis=1)
    return float((pred == true).mean())


def _binary_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Mann-Whitney AUC with the tied-rank 1/2 correction."""
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("binary AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    rank_sum = float(ranks[positives].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc(probabilities: np.ndarray, labels_onehot: np.ndarray) -> float:
    """Binary: rank-statistic AUC of the positive-class score. Multiclass:
    unweighted mean of one-vs-rest AUCs, skipping absent classes with a
    warning."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels_onehot = np.asarray(labels_onehot, dtype=np.float64)
    if probabilities.shape != labels_onehot.shape:
        raise ValueError(
            f"probability shape {probabilities.shape} does not match "
            f"label shape {labels_onehot.shape}"
        )
    true = labels_onehot.argmax(axis=1)
    c = probabilities.shape[1]
    if c == 2:
        return _binary_auc(probabilities[:, 1], true == 1)
    parts = []
    for cls in range(c):
        positives = true == cls
        if positives.all() or not positives.any():
            warnings.warn(f"class {cls} absent from labels, skipped in macro AUC")
            continue
        parts.append(_binary_auc(probabilities[:, cls], positives))
    if not parts:
        raise ValueError("no class with both positives and negatives present")
    return float(np.mean(parts))
