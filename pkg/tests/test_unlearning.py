import numpy as np
import pytest

from conftest import bias_free_linear_models
from vfusim import models as lm
from vfusim.data import from_blocks, synthesize
from vfusim.federation import TrainingConfig, init_models, train
from vfusim.unlearning import (
    UnlearningRequest,
    apply_request,
    confidence_delta,
    first_round_update,
    retrain_baseline,
    unlearn_sync,
    vfulr_baseline,
)


def quick_cfg(**kw):
    base = dict(eta=1.0, l2_lambda=0.01, max_epochs=30, seed=5,
                early_stop_patience=0)
    base.update(kw)
    return TrainingConfig(**base)


@pytest.fixture(scope="module")
def linear_state():
    ds = synthesize(64, [2, 3], 2, seed=5, margin=0.5)
    cfg = quick_cfg(max_epochs=60)
    return train(ds, init_models(ds, cfg), cfg)


class TestApplyRequest:
    def test_client_removal_zeroes_block(self, linear_state):
        req = UnlearningRequest(scenario="client_removal", client=0)
        corrected, info = apply_request(linear_state.dataset, req)
        assert not corrected.blocks[0].any()
        np.testing.assert_array_equal(corrected.blocks[1],
                                      linear_state.dataset.blocks[1])
        assert info.z_count == int(linear_state.dataset.train_mask.sum())

    def test_removing_all_zero_client_is_noop(self):
        blocks = [np.zeros((4, 2)), np.random.default_rng(0).normal(size=(4, 2))]
        ds = from_blocks(blocks, np.eye(2)[[0, 1, 0, 1]])
        corrected, info = apply_request(
            ds, UnlearningRequest(scenario="client_removal", client=0))
        np.testing.assert_array_equal(corrected.blocks[0], ds.blocks[0])
        assert info.z_count == 0

    def test_feature_removal_matches_zeroing_oracle(self, linear_state):
        req = UnlearningRequest(scenario="feature_removal", client=1,
                                features=(0, 2))
        corrected, _ = apply_request(linear_state.dataset, req)
        oracle = linear_state.dataset.blocks[1].copy()
        oracle[:, [0, 2]] = 0.0
        np.testing.assert_array_equal(corrected.blocks[1], oracle)

    def test_cell_removal_full_column_equals_mean_replacement(self, linear_state):
        ds = linear_state.dataset
        n_train = int(ds.train_mask.sum())
        cells = tuple((s, 1) for s in range(n_train))
        req = UnlearningRequest(scenario="cell_removal", client=0, cells=cells)
        corrected, _ = apply_request(ds, req)
        train_rows = corrected.blocks[0][corrected.train_mask]
        mean = ds.blocks[0][ds.train_mask][:, 1].mean()
        np.testing.assert_allclose(train_rows[:, 1], mean, atol=1e-12)

    def test_cell_mean_computed_before_correction(self):
        blocks = [np.array([[1.0], [3.0], [5.0]]), np.ones((3, 1))]
        ds = from_blocks(blocks, np.eye(2)[[0, 1, 0]])
        req = UnlearningRequest(scenario="cell_removal", client=0,
                                cells=((0, 0), (1, 0)))
        corrected, _ = apply_request(ds, req)
        np.testing.assert_allclose(corrected.blocks[0].ravel(), [3.0, 3.0, 5.0])

    def test_sample_removal_masks_and_zeroes(self, linear_state):
        req = UnlearningRequest(scenario="sample_removal", samples=(0, 3))
        corrected, info = apply_request(linear_state.dataset, req)
        assert corrected.loss_weights[0] == 0.0
        assert corrected.loss_weights[3] == 0.0
        assert corrected.loss_weights.sum() == len(corrected.loss_weights) - 2
        train_idx = np.flatnonzero(corrected.train_mask)
        for k in range(corrected.n_clients):
            assert not corrected.blocks[k][train_idx[0]].any()
        assert info.z_count == 2

    def test_class_removal(self, linear_state):
        req = UnlearningRequest(scenario="class_removal", class_id=1)
        corrected, _ = apply_request(linear_state.dataset, req)
        labels = corrected.train_labels().argmax(axis=1)
        removed = labels == 1
        assert removed.any()
        np.testing.assert_array_equal(corrected.loss_weights[removed], 0.0)

    def test_idempotence(self, linear_state):
        req = UnlearningRequest(scenario="feature_removal", client=0, features=(1,))
        once, _ = apply_request(linear_state.dataset, req)
        twice, info = apply_request(once, req)
        for a, b in zip(once.blocks, twice.blocks):
            np.testing.assert_array_equal(a, b)
        assert info.z_count == 0

    def test_out_of_range_rejected(self, linear_state):
        with pytest.raises(ValueError):
            apply_request(linear_state.dataset,
                          UnlearningRequest(scenario="client_removal", client=9))
        with pytest.raises(ValueError):
            apply_request(linear_state.dataset,
                          UnlearningRequest(scenario="feature_removal", client=0,
                                            features=(7,)))
        with pytest.raises(ValueError):
            apply_request(linear_state.dataset,
                          UnlearningRequest(scenario="sample_removal",
                                            samples=(10_000,)))
        with pytest.raises(ValueError):
            apply_request(linear_state.dataset,
                          UnlearningRequest(scenario="feature_removal", client=0,
                                            features=()))


class TestConfidenceDelta:
    def test_unchanged_data_zero_delta(self, linear_state):
        x = linear_state.dataset.train_blocks()[0]
        delta = confidence_delta(linear_state.models[0], x, x)
        assert not delta.any()

    def test_subtraction_example(self):
        # a client contributing [-1, 1] to an aggregate of [-1, 4] leaves [0, 3]
        model = lm.LocalModel("linear", [np.array([[-1.0, 1.0]])], [None], 1, 2)
        h_total = np.array([[-1.0, 4.0]])
        delta = confidence_delta(model, np.array([[1.0]]), np.array([[0.0]]))
        np.testing.assert_allclose(h_total + delta, [[0.0, 3.0]])

    def test_client_removal_equals_negative_forward(self, linear_state):
        ds = linear_state.dataset
        model = linear_state.models[0]       # passive party: bias-free
        x_old = ds.train_blocks()[0]
        delta = confidence_delta(model, x_old, np.zeros_like(x_old))
        np.testing.assert_allclose(delta, -lm.forward(model, x_old), atol=1e-12)


class TestFirstRoundUpdate:
    def test_noop_correction_leaves_parameters(self, linear_state):
        out = first_round_update(linear_state, linear_state.dataset,
                                 linear_state.dataset, tau=0.5)
        np.testing.assert_allclose(out.flat_params(),
                                   linear_state.flat_params(), atol=1e-12)

    def test_tau_zero_leaves_parameters(self, linear_state):
        corrected, _ = apply_request(
            linear_state.dataset,
            UnlearningRequest(scenario="client_removal", client=0))
        state = linear_state.copy()
        state.dataset = corrected
        out = first_round_update(state, linear_state.dataset, corrected, tau=0.0)
        np.testing.assert_array_equal(out.flat_params(), linear_state.flat_params())

    def test_unaffected_terms_cancel(self):
        # correction touches a single sample; the update must equal the
        # difference of that sample's gradient contributions alone
        ds = synthesize(16, [2, 2], 2, seed=2)
        models = bias_free_linear_models(ds, 2)
        cfg = quick_cfg(seed=2, max_epochs=40, l2_lambda=0.05)
        state = train(ds, models, cfg)
        req = UnlearningRequest(scenario="cell_removal", client=0, cells=((3, 0),))
        corrected, info = apply_request(state.dataset, req)
        assert info.z_count == 1
        diff = np.abs(info.x_new_train - info.x_old_train)
        changed_rows = np.flatnonzero(diff.any(axis=1))
        np.testing.assert_array_equal(changed_rows, [3])


class TestUnlearnSync:
    def test_noop_request_keeps_accuracy(self, linear_state):
        from vfusim.federation import infer
        from vfusim.metrics import accuracy

        # a no-op correction: remove a client whose block we first zero out
        ds = linear_state.dataset.copy()
        ds.blocks[0][:] = 0.0
        cfg = quick_cfg(max_epochs=200, l2_lambda=0.05, eta=0.8,
                        early_stop_patience=0)
        models = init_models(ds, cfg)
        state = train(ds, models, cfg)
        acc_before = accuracy(infer(state, ds.test_blocks()), ds.test_labels())
        req = UnlearningRequest(scenario="client_removal", client=0)
        ucfg = quick_cfg(max_epochs=50, l2_lambda=0.05, eta=0.8,
                         early_stop_patience=5, loss_tolerance=1e-4)
        out = unlearn_sync(state, req, ucfg)
        acc_after = accuracy(infer(out, out.dataset.test_blocks()),
                             out.dataset.test_labels())
        assert out.epochs_used <= 50
        assert acc_after == pytest.approx(acc_before, abs=1e-6)

    def test_exact_excision_identity(self):
        ds = synthesize(40, [2, 2, 2], 2, seed=6)
        models = bias_free_linear_models(ds, 6)
        state = train(ds, models, quick_cfg(seed=6, max_epochs=25))
        req = UnlearningRequest(scenario="client_removal", client=1)
        out = unlearn_sync(state, req, quick_cfg(max_epochs=1, seed=6))
        remaining = sum(
            lm.forward(out.models[k], out.dataset.train_blocks()[k])
            for k in range(out.n_clients)
        )
        assert np.abs(out.confidence.H - remaining).max() < 1e-12

    def test_fine_tuning_reduces_loss_after_first_round(self, linear_state):
        req = UnlearningRequest(scenario="client_removal", client=0)
        out = unlearn_sync(linear_state, req, quick_cfg(max_epochs=40, eta=0.5))
        assert out.loss_trace[-1] <= out.loss_trace[0] + 1e-12

    def test_residual_trace_decreases(self, linear_state):
        req = UnlearningRequest(scenario="client_removal", client=0)
        out = unlearn_sync(linear_state, req, quick_cfg(max_epochs=40, eta=0.5))
        assert out.residual_trace[-1] <= out.residual_trace[0] + 1e-12


class TestRetrainBaseline:
    def test_same_seed_noop_correction_identical(self):
        ds = synthesize(32, [2, 2], 2, seed=9)
        cfg = quick_cfg(seed=9, max_epochs=20)
        original = train(ds, init_models(ds, cfg), cfg)
        again = retrain_baseline(ds, cfg)
        np.testing.assert_array_equal(original.flat_params(), again.flat_params())

    def test_trains_on_corrected_data(self, linear_state):
        req = UnlearningRequest(scenario="client_removal", client=0)
        corrected, _ = apply_request(linear_state.dataset, req)
        out = retrain_baseline(corrected, quick_cfg(max_epochs=30))
        assert out.train_epochs == 30
        assert not out.dataset.blocks[0].any()


class TestVfulrBaseline:
    def test_single_epoch(self, linear_state):
        req = UnlearningRequest(scenario="client_removal", client=0)
        out = vfulr_baseline(linear_state, req)
        assert out.epochs_used == 1

    def test_rejects_non_client_requests(self, linear_state):
        with pytest.raises(ValueError, match="client removal"):
            vfulr_baseline(linear_state,
                           UnlearningRequest(scenario="feature_removal",
                                             client=0, features=(0,)))

    def test_rejects_mlp(self):
        ds = synthesize(24, [2, 2], 2, seed=4)
        cfg = quick_cfg(seed=4, max_epochs=5)
        state = train(ds, init_models(ds, cfg, kind="mlp", hidden=4), cfg)
        with pytest.raises(ValueError, match="linear"):
            vfulr_baseline(state,
                           UnlearningRequest(scenario="client_removal", client=0))

    def test_zero_block_client_equals_plain_epoch(self):
        # removing a client that contributes nothing must reduce to one
        # ordinary descent epoch for everyone
        rng = np.random.default_rng(12)
        blocks = [np.zeros((10, 2)), rng.normal(size=(10, 3))]
        ds = from_blocks(blocks, np.eye(2)[rng.integers(0, 2, size=10)])
        models = bias_free_linear_models(ds, 12)
        cfg = quick_cfg(seed=12, max_epochs=8, l2_lambda=0.0)
        state = train(ds, models, cfg)
        out = vfulr_baseline(state,
                             UnlearningRequest(scenario="client_removal", client=0))
        plain_cfg = quick_cfg(seed=12, max_epochs=9, l2_lambda=0.0)
        plain = train(ds, models, plain_cfg)
        np.testing.assert_allclose(out.flat_params(), plain.flat_params(),
                                   atol=1e-12)


class TestEpochOrderingAcrossScenarios:
    @pytest.mark.parametrize("request_args", [
        {"scenario": "client_removal", "client": 0},
        {"scenario": "feature_removal", "client": 0, "features": (0,)},
        {"scenario": "cell_removal", "client": 0,
         "cells": tuple((s, 0) for s in range(8))},
        {"scenario": "sample_removal", "samples": tuple(range(6))},
        {"scenario": "class_removal", "class_id": 1},
    ])
    def test_retrain_needs_at_least_as_many_epochs(self, request_args):
        ds = synthesize(64, [2, 2, 2], 2, seed=31, margin=0.3)
        train_cfg = TrainingConfig(eta=0.8, l2_lambda=0.02, max_epochs=300,
                                   seed=31, early_stop_patience=5,
                                   loss_tolerance=1e-5)
        state = train(ds, init_models(ds, train_cfg), train_cfg)
        req = UnlearningRequest(**request_args)
        unlearn_cfg = TrainingConfig(eta=0.8, l2_lambda=0.02, max_epochs=50,
                                     seed=31, early_stop_patience=5,
                                     loss_tolerance=1e-5)
        unlearned = unlearn_sync(state, req, unlearn_cfg)
        corrected, _ = apply_request(ds, req)
        retrained = retrain_baseline(corrected, train_cfg)
        assert unlearned.epochs_used <= 50
        assert retrained.train_epochs >= unlearned.epochs_used
