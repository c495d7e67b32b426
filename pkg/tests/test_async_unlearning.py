import numpy as np
import pytest

from conftest import bias_free_linear_models, orthogonal_fixture
from vfusim import models as lm
from vfusim.async_unlearning import (
    OnlineSchedule,
    estimate_offline,
    reconcile_all,
    reconcile_client,
    run_unlearning_rounds,
    unlearn_async,
)
from vfusim.data import synthesize
from vfusim.federation import (
    ContributionFactors,
    TrainingConfig,
    capture_contribution_factors,
    infer,
    init_models,
    train,
)
from vfusim.unlearning import UnlearningRequest, unlearn_sync


def quick_cfg(**kw):
    base = dict(eta=0.5, l2_lambda=0.01, max_epochs=20, seed=5,
                early_stop_patience=0)
    base.update(kw)
    return TrainingConfig(**base)


def trained_orthogonal(n_clients=3, seed=7, epochs=30, l2=0.0):
    ds = orthogonal_fixture(n_clients=n_clients, seed=seed)
    models = bias_free_linear_models(ds, seed)
    cfg = quick_cfg(seed=seed, max_epochs=epochs, l2_lambda=l2)
    state = train(ds, models, cfg)
    capture_contribution_factors(state)
    return state


class TestOnlineSchedule:
    def test_requires_active_and_requester(self):
        sched = OnlineSchedule([frozenset({0, 1}), frozenset({1, 2})])
        with pytest.raises(ValueError, match="must be online"):
            sched.validate(3, active=2, requester=0, max_rounds=2)

    def test_requires_coverage(self):
        sched = OnlineSchedule.full(3, 5)
        with pytest.raises(ValueError, match="covers"):
            sched.validate(3, active=2, requester=0, max_rounds=6)

    def test_random_dropout_exact_count(self):
        sched = OnlineSchedule.random_dropout(8, 30, 5, seed=3,
                                              always_online=frozenset({0, 7}))
        for online in sched.rounds:
            assert len(online) == 5
            assert {0, 7} <= set(online)

    def test_from_fraction(self):
        sched = OnlineSchedule.from_fraction(16, 10, 0.75, seed=1,
                                             always_online=frozenset({0, 15}))
        assert all(len(r) == 12 for r in sched.rounds)

    def test_deterministic(self):
        a = OnlineSchedule.random_dropout(6, 10, 3, seed=5,
                                          always_online=frozenset({0, 5}))
        b = OnlineSchedule.random_dropout(6, 10, 3, seed=5,
                                          always_online=frozenset({0, 5}))
        assert a.rounds == b.rounds


class TestEstimateOffline:
    def test_all_online_exact_sum(self):
        rng = np.random.default_rng(0)
        deltas = {k: rng.normal(size=(4, 2)) for k in range(3)}
        factors = ContributionFactors(R=np.full((4, 3), 1 / 3), capture_epoch=0)
        total, estimates = estimate_offline(deltas, factors, offline=frozenset())
        np.testing.assert_array_equal(total, sum(deltas.values()))
        assert estimates == {}

    def test_two_client_plug_in(self):
        # factors 2/7 and 5/7; client 1 offline
        delta_i = np.array([[0.7, -0.7]])
        factors = ContributionFactors(R=np.array([[2 / 7, 5 / 7]]), capture_epoch=0)
        total, estimates = estimate_offline({0: delta_i}, factors, offline={1})
        np.testing.assert_allclose(total, delta_i / (2 / 7), atol=1e-12)
        np.testing.assert_allclose(estimates[1], delta_i * (5 / 7) / (2 / 7),
                                   atol=1e-12)

    def test_empty_online_rejected(self):
        factors = ContributionFactors(R=np.ones((2, 2)) / 2, capture_epoch=0)
        with pytest.raises(ValueError, match="non-empty"):
            estimate_offline({}, factors, offline={0})

    def test_degenerate_mass_falls_back(self, caplog):
        import logging

        deltas = {0: np.array([[1.0, -1.0]])}
        factors = ContributionFactors(R=np.array([[0.0, 1.0]]), capture_epoch=0)
        with caplog.at_level(logging.WARNING):
            total, estimates = estimate_offline(deltas, factors, offline={1})
        np.testing.assert_array_equal(total, deltas[0])
        np.testing.assert_array_equal(estimates[1], 0.0)
        assert "online factor mass" in caplog.text

    def test_linear_ground_truth_oracle(self):
        # orthogonal design: run one true descent round with everyone online,
        # then check the formulas recover the held-out client's update
        state = trained_orthogonal()
        from vfusim.federation import weighted_loss_grad
        ds = state.dataset
        blocks = ds.train_blocks()
        grad = weighted_loss_grad(state.confidence.H, ds.train_labels(),
                                  ds.loss_weights)
        deltas = {}
        for k in range(3):
            grads = lm.backward(state.models[k], blocks[k], grad)
            updated = lm.apply_update(state.models[k], grads, eta=0.5)
            deltas[k] = lm.forward(updated, blocks[k]) - lm.forward(
                state.models[k], blocks[k])
        online = {0: deltas[0], 2: deltas[2]}
        _, estimates = estimate_offline(online, state.factors, offline={1})
        denom = np.abs(deltas[1]).max()
        assert np.abs(estimates[1] - deltas[1]).max() / denom < 1e-5

    def test_corrected_rows_carry_staleness_but_others_stay_exact(self):
        # factors are frozen pre-request by design: the corrected sample's row
        # is allowed to drift, every other row stays in the exact regime
        state = trained_orthogonal()
        req = UnlearningRequest(scenario="feature_removal", client=0, features=(0,))
        cfg = quick_cfg(max_epochs=1, l2_lambda=0.0, seed=7)
        truth = run_unlearning_rounds(state, req, cfg, OnlineSchedule.full(3, 1))
        est = run_unlearning_rounds(state, req, cfg,
                                    OnlineSchedule([frozenset({0, 2})]))
        diff = np.abs(truth.confidence.per_client[1] - est.confidence.per_client[1])
        denom = np.abs(truth.confidence.per_client[1]).max()
        assert diff[1:].max() / denom < 1e-5      # unaffected samples exact
        assert diff[0].max() / denom < 0.05       # corrected row bounded


class TestUnlearnAsync:
    def test_degeneracy_bit_identical(self, trained_state):
        capture_contribution_factors(trained_state)
        req = UnlearningRequest(scenario="client_removal", client=0)
        cfg = quick_cfg(max_epochs=15)
        sync = unlearn_sync(trained_state, req, cfg)
        sched = OnlineSchedule.full(trained_state.n_clients, 15)
        async_ = unlearn_async(trained_state, req, sched, cfg)
        assert np.array_equal(sync.confidence.H, async_.confidence.H)
        np.testing.assert_array_equal(sync.flat_params(), async_.flat_params())
        assert sync.loss_trace == async_.loss_trace

    def test_estimation_consistency_over_run(self):
        # 20 rounds with one persistently offline client; cumulative estimated
        # contribution tracks the true one (sample removal keeps the corrected
        # row out of the loss, so the update estimates stay in their regime)
        state = trained_orthogonal(seed=11, epochs=40)
        req = UnlearningRequest(scenario="sample_removal", samples=(3,))
        cfg = quick_cfg(max_epochs=20, l2_lambda=0.0, seed=11, eta=0.3)
        sched_off = OnlineSchedule([frozenset({0, 2})] * 20)
        est = run_unlearning_rounds(state, req, cfg, sched_off)
        truth = run_unlearning_rounds(state, req, cfg, OnlineSchedule.full(3, 20))
        live = np.ones(len(truth.dataset.loss_weights), dtype=bool)
        live[3] = False
        h1_est = est.confidence.per_client[1][live]
        h1_true = truth.confidence.per_client[1][live]
        rel = np.abs(h1_est - h1_true).max() / np.abs(h1_true).max()
        assert rel < 1e-3

    def test_conservation_invariant(self):
        ds = synthesize(40, [2, 2, 2, 2], 2, seed=15)
        cfg = quick_cfg(seed=15, max_epochs=25)
        state = train(ds, init_models(ds, cfg), cfg)
        capture_contribution_factors(state)
        req = UnlearningRequest(scenario="client_removal", client=0)
        ucfg = quick_cfg(seed=15, max_epochs=12)
        sched = OnlineSchedule.random_dropout(
            4, 12, 3, seed=3, always_online=frozenset({0, 3}))
        out = unlearn_async(state, req, sched, ucfg)
        assert out.confidence.consistency_error() < 1e-9
        # clients online every round never accumulate estimates
        for k in (0, 3):
            assert not np.any(out.estimate_accum[k])

    def test_offline_parameters_untouched(self):
        state = trained_orthogonal(seed=13, epochs=25)
        req = UnlearningRequest(scenario="feature_removal", client=0, features=(0,))
        cfg = quick_cfg(max_epochs=10, seed=13)
        sched = OnlineSchedule([frozenset({0, 2})] * 10)
        out = run_unlearning_rounds(state, req, cfg, sched)
        np.testing.assert_array_equal(out.models[1].flat_params(),
                                      state.models[1].flat_params())
        assert out.missed_rounds[1] == list(range(1, 11))

    def test_ledger_counts_only_online_traffic(self):
        state = trained_orthogonal(seed=17, epochs=25)
        req = UnlearningRequest(scenario="feature_removal", client=0, features=(0,))
        cfg = quick_cfg(max_epochs=10, seed=17)
        n, c = state.confidence.H.shape
        sched = OnlineSchedule([frozenset({0, 2})] * 10)
        out = run_unlearning_rounds(state, req, cfg, sched)
        per_epoch = out.ledger.per_epoch_scalars("unlearn")
        # round 1: excision delta + two broadcasts per online client + deltas
        assert per_epoch[1] == (1 + 2 * 2 + 2) * n * c
        for r in range(2, 11):
            assert per_epoch[r] == (2 + 2) * n * c

    def test_requires_factors(self):
        ds = synthesize(24, [2, 2, 2], 2, seed=16)
        cfg = quick_cfg(seed=16, max_epochs=4)
        state = train(ds, init_models(ds, cfg), cfg)
        req = UnlearningRequest(scenario="client_removal", client=0)
        sched = OnlineSchedule([frozenset({0, 2})] * 4)
        state.factors = None
        with pytest.raises(ValueError, match="contribution factors"):
            unlearn_async(state, req, sched, cfg)


class TestReconcile:
    def test_never_offline_is_noop(self, trained_state):
        capture_contribution_factors(trained_state)
        req = UnlearningRequest(scenario="client_removal", client=0)
        cfg = quick_cfg(max_epochs=6)
        out = unlearn_sync(trained_state, req, cfg)
        again = reconcile_client(out, 1)
        assert again is out

    def test_post_reconciliation_matches_synchronous_oracle(self):
        # lambda = 0 keeps replayed updates order-independent; sample removal
        # keeps the factor estimates exact on every live row
        state = trained_orthogonal(seed=19, epochs=30, l2=0.0)
        req = UnlearningRequest(scenario="sample_removal", samples=(2,))
        cfg = quick_cfg(max_epochs=12, l2_lambda=0.0, seed=19, eta=0.3)
        sched = OnlineSchedule(
            [frozenset({0, 2})] * 5 + [frozenset({0, 1, 2})] * 7)
        out = run_unlearning_rounds(state, req, cfg, sched)
        out = reconcile_all(out)
        truth = run_unlearning_rounds(state, req, cfg, OnlineSchedule.full(3, 12))
        assert np.abs(out.confidence.H - truth.confidence.H).max() < 1e-4

    def test_accumulator_reset_and_h_swapped(self):
        state = trained_orthogonal(seed=23, epochs=25)
        req = UnlearningRequest(scenario="feature_removal", client=0, features=(0,))
        cfg = quick_cfg(max_epochs=8, seed=23)
        sched = OnlineSchedule([frozenset({0, 2})] * 8)
        out = run_unlearning_rounds(state, req, cfg, sched)
        assert np.any(out.estimate_accum[1])
        rec = reconcile_client(out, 1)
        assert not np.any(rec.estimate_accum[1])
        true_h = lm.forward(rec.models[1], rec.dataset.train_blocks()[1])
        np.testing.assert_array_equal(rec.confidence.per_client[1], true_h)
        assert rec.missed_rounds[1] == []

    def test_inference_allowed_after_reconcile_all(self):
        state = trained_orthogonal(seed=29, epochs=25)
        req = UnlearningRequest(scenario="feature_removal", client=0, features=(0,))
        cfg = quick_cfg(max_epochs=6, seed=29)
        sched = OnlineSchedule([frozenset({0, 2})] * 6)
        out = reconcile_all(run_unlearning_rounds(state, req, cfg, sched))
        probs = infer(out, out.dataset.test_blocks())
        assert probs.shape[1] == out.dataset.class_count

    def test_reconcile_traffic_in_ledger(self):
        state = trained_orthogonal(seed=31, epochs=25)
        req = UnlearningRequest(scenario="feature_removal", client=0, features=(0,))
        cfg = quick_cfg(max_epochs=5, seed=31)
        sched = OnlineSchedule([frozenset({0, 2})] * 5)
        out = run_unlearning_rounds(state, req, cfg, sched)
        before = out.ledger.total_scalars("reconcile")
        out = reconcile_all(out)
        n, c = out.confidence.H.shape
        # 5 missed rounds (first carries two broadcasts) plus the fresh upload
        expected = (2 + 4) * n * c + n * c
        assert out.ledger.total_scalars("reconcile") - before == expected
