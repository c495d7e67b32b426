#!/usr/bin/env python3
"""Regenerate the bundled example datasets (deterministic).

Both files are synthetic stand-ins shaped like common tabular benchmarks:
a 768x8 binary clinical-style table and a ~6400x108 census-style table with
a 27-feature block concentrated on one client. Run from the repo root:

    python scripts/make_datasets.py
"""
import csv
import os

import numpy as np

OUT_DIR = os.path.join(os.path.dirname(__file__), "..", "data")

DIABETES_COLUMNS = [
    "pregnancies", "glucose", "blood_pressure", "skin_thickness",
    "insulin", "bmi", "pedigree", "age",
]


def make_diabetes(path: str, seed: int = 28, n: int = 768) -> None:
    """Two informative columns carried by the first client, six correlated
    companions, noisy binary outcome at roughly a 40% positive rate."""
    rng = np.random.default_rng(seed)
    rho = np.array([0.90, 0.85, 0.55, 0.60, 0.50, 0.45, 0.55, 0.50])
    u = rng.normal(size=n)
    cols = [r * u + np.sqrt(1.0 - r * r) * rng.normal(size=n) for r in rho]
    x = np.stack(cols, axis=1)
    logit = 1.4 * u + 1.0 * rng.normal(size=n) - 0.55
    y = (logit > 0).astype(int)
    flip = rng.random(n) < 0.08
    y = np.where(flip, 1 - y, y)

    shift = np.array([3.8, 120.9, 69.1, 20.5, 79.8, 32.0, 0.47, 33.2])
    scale = np.array([3.4, 32.0, 19.4, 16.0, 115.2, 7.9, 0.33, 11.8])
    raw = x * scale + shift

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(DIABETES_COLUMNS + ["outcome"])
        for row, label in zip(raw, y):
            writer.writerow([f"{v:.4f}" for v in row] + [int(label)])
    print(f"wrote {path}: {n} rows, 8 features, positive rate {y.mean():.3f}")


def make_adult_subset(path: str, seed: int = 41, n: int = 6400) -> None:
    """108 mixed binary/numeric features over 16 clients; the first client's
    27-column block carries the strongest signal share."""
    rng = np.random.default_rng(seed)
    u = rng.normal(size=n)          # primary signal
    v = rng.normal(size=n)          # secondary signal
    cols = []
    names = []

    def add_numeric(name, load_u, load_v):
        noise = np.sqrt(max(1.0 - load_u**2 - load_v**2, 0.05))
        cols.append(load_u * u + load_v * v + noise * rng.normal(size=n))
        names.append(name)

    def add_binary(name, load_u, load_v, rate):
        noise = np.sqrt(max(1.0 - load_u**2 - load_v**2, 0.05))
        z = load_u * u + load_v * v + noise * rng.normal(size=n)
        thresh = np.quantile(z, 1.0 - rate)
        cols.append((z > thresh).astype(float))
        names.append(name)

    # client 0: 27 columns with a modest edge in primary-signal share
    for j in range(27):
        load = 0.55 if j < 4 else 0.40 if j < 12 else 0.20
        rate = 0.15 + 0.4 * ((j * 7) % 10) / 10.0
        if j % 5 == 0:
            add_numeric(f"c0_{j}", load, 0.10)
        else:
            add_binary(f"c0_{j}", load, 0.10, rate)
    # remaining 81 columns: moderate, mixed loads
    for j in range(81):
        load_u = 0.35 if j % 3 == 0 else 0.18
        load_v = 0.45 if j % 4 == 0 else 0.20
        rate = 0.1 + 0.5 * ((j * 3) % 10) / 10.0
        if j % 6 == 0:
            add_numeric(f"r_{j}", load_u, load_v)
        else:
            add_binary(f"r_{j}", load_u, load_v, rate)

    x = np.stack(cols, axis=1)
    logit = 1.6 * u + 0.9 * v + 1.1 * rng.normal(size=n) - 1.0
    y = (logit > 0).astype(int)

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names + ["income"])
        for row, label in zip(x, y):
            writer.writerow([f"{val:.4f}".rstrip("0").rstrip(".") for val in row]
                            + [int(label)])
    print(f"wrote {path}: {n} rows, {x.shape[1]} features, "
          f"positive rate {y.mean():.3f}")


if __name__ == "__main__":
    os.makedirs(OUT_DIR, exist_ok=True)
    make_diabetes(os.path.join(OUT_DIR, "diabetes.csv"))
    make_adult_subset(os.path.join(OUT_DIR, "adult_subset.csv"))
