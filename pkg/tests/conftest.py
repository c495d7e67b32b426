import pathlib

import numpy as np
import pytest

from vfusim import models as lm
from vfusim.data import from_blocks, synthesize
from vfusim.federation import TrainingConfig, init_models, train
from vfusim.numerics import RandomSource, PURPOSE_INIT

REPO_ROOT = pathlib.Path(__file__).resolve().parent.parent
DATA_DIR = REPO_ROOT / "data"


@pytest.fixture(scope="session")
def small_dataset():
    """64-sample, 2-client linear-friendly dataset."""
    return synthesize(64, [2, 3], 2, seed=5, margin=0.5)


@pytest.fixture(scope="session")
def trained_state(small_dataset):
    cfg = TrainingConfig(eta=1.0, l2_lambda=0.01, max_epochs=80, seed=5,
                         early_stop_patience=0)
    models = init_models(small_dataset, cfg)
    return train(small_dataset, models, cfg)


def bias_free_linear_models(dataset, seed):
    """All-client bias-free linear models (exact aggregation fixtures)."""
    source = RandomSource(seed)
    return [
        lm.init_linear(w, dataset.class_count,
                       source.party_stream(PURPOSE_INIT, k), with_bias=False)
        for k, w in enumerate(dataset.client_widths)
    ]


def orthogonal_fixture(n_clients=3, class_count=2, seed=0):
    """Per-sample-orthogonal design: every sample owns its own feature slot in
    each client's block, so cross-sample Gram terms vanish and per-sample
    update algebra is exact."""
    rng = np.random.default_rng(seed)
    n = 8
    blocks = []
    for _ in range(n_clients):
        b = np.zeros((n, n))
        b[np.arange(n), np.arange(n)] = rng.uniform(0.4, 1.0, size=n)
        blocks.append(b)
    labels = rng.integers(0, class_count, size=n)
    y = np.eye(class_count)[labels]
    return from_blocks(blocks, y)
