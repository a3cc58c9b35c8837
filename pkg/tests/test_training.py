import math

import numpy as np
import pytest

from dpfair.datasets import GroupedDataset, synth_two_group
from dpfair.models import Model, UnsupportedFamilyError, loss_mean, per_sample_grad
from dpfair.privacy import PrivacySpec
from dpfair.training import (
    ConvergenceError,
    DecompositionMode,
    DivergenceError,
    TrainConfig,
    dpsgd_step,
    sgd_step,
    train,
    train_output_pert,
)


def tiny_ds(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return GroupedDataset(X, np.asarray(y), np.zeros(len(y), dtype=int))


class TestSgdStep:
    def test_hand_gradient(self):
        # squared loss at theta = 0 with (x, y) = ((1,0), 1): g = -2x,
        # so a step of 0.5 lands exactly on (1, 0)
        ds = tiny_ds([[1.0, 0.0]], np.array([1.0]))
        m = Model.init("linear_l2", 2)
        out = sgd_step(m, ds, [0], lr=0.5)
        np.testing.assert_allclose(out.theta, [1.0, 0.0], atol=1e-14)

    def test_zero_learning_rate(self):
        ds = tiny_ds([[1.0, 2.0]], np.array([1.0]))
        m = Model.init("linear_l2", 2)
        np.testing.assert_array_equal(sgd_step(m, ds, [0], lr=0.0).theta, m.theta)

    def test_duplicate_samples_mean_invariance(self):
        ds1 = tiny_ds([[1.0, 2.0]], np.array([3.0]))
        ds2 = tiny_ds([[1.0, 2.0], [1.0, 2.0]], np.array([3.0, 3.0]))
        m = Model.init("linear_l2", 2)
        a = sgd_step(m, ds1, [0], lr=0.1).theta
        b = sgd_step(m, ds2, [0, 1], lr=0.1).theta
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_empty_batch_rejected(self):
        ds = tiny_ds([[1.0]], np.array([1.0]))
        with pytest.raises(ValueError):
            sgd_step(Model.init("linear_l2", 1), ds, [], lr=0.1)


class TestDpsgdStep:
    def test_degenerate_equals_sgd_bitwise(self):
        ds = synth_two_group(40, 40, 5, 2.0, 1.0, seed=1)
        m = Model.init("softmax_linear", 5, K=2)
        batch = np.arange(20)
        plain = sgd_step(m, ds, batch, lr=0.3)
        degen = dpsgd_step(m, ds, batch, lr=0.3, clip_bound=1e9, sigma=0.0,
                           rng=np.random.default_rng(0))
        np.testing.assert_array_equal(plain.theta, degen.theta)

    def test_tiny_clip_bound_caps_update(self):
        ds = synth_two_group(30, 30, 4, 3.0, 1.0, seed=2)
        m = Model.init("softmax_linear", 4, K=2)
        lr, C = 0.5, 1e-4
        out = dpsgd_step(m, ds, np.arange(10), lr=lr, clip_bound=C, sigma=0.0,
                         rng=np.random.default_rng(0))
        assert np.linalg.norm(out.theta - m.theta) <= lr * C * (1 + 1e-12)

    def test_fixed_seed_reproducible(self):
        ds = synth_two_group(30, 30, 4, seed=3)
        m = Model.init("softmax_linear", 4, K=2)
        a = dpsgd_step(m, ds, np.arange(15), 0.1, 0.1, 5.0, np.random.default_rng(7))
        b = dpsgd_step(m, ds, np.arange(15), 0.1, 0.1, 5.0, np.random.default_rng(7))
        np.testing.assert_array_equal(a.theta, b.theta)

    def test_noise_independence(self):
        # gradients vanish at theta = 0 when y = 0, so each update exposes the
        # injected noise; cross-coordinate and lag-1 correlations stay small
        n, d, T = 4, 2, 10_000
        ds = tiny_ds(np.ones((n, d)), np.zeros(n))
        m = Model.init("linear_l2", d)
        rng = np.random.default_rng(123)
        lr, C, sigma = 1.0, 1.0, 1.0
        draws = np.empty((T, d))
        for t in range(T):
            out = dpsgd_step(m, ds, np.arange(n), lr, C, sigma, rng)
            draws[t] = (m.theta - out.theta) / lr * n  # recover the noise sum
        corr = np.corrcoef(draws[:, 0], draws[:, 1])[0, 1]
        assert abs(corr) <= 0.05
        for j in range(d):
            lag1 = np.corrcoef(draws[:-1, j], draws[1:, j])[0, 1]
            assert abs(lag1) <= 0.05
        np.testing.assert_allclose(draws.std(), C * sigma, rtol=0.03)


class TestTrainLoop:
    def base_cfg(self, **kw):
        defaults = dict(family="softmax_linear", d=4, K=2, lr=0.05, iterations=5,
                        seed=9, batch_scheme="poisson", q=0.5)
        defaults.update(kw)
        return TrainConfig(**defaults)

    def test_single_iteration_single_record(self):
        ds = synth_two_group(40, 40, 4, seed=5)
        result = train(self.base_cfg(iterations=1), ds)
        assert len(result.trace.steps) == 1
        assert result.trace.steps[0].iteration == 0

    def test_nonprivate_accountant_empty(self):
        ds = synth_two_group(40, 40, 4, seed=5)
        result = train(self.base_cfg(), ds)
        assert result.accountant is None

    def test_deterministic_trajectories(self):
        ds = synth_two_group(50, 50, 4, seed=5)
        cfg = self.base_cfg(privacy=PrivacySpec(delta=1e-5, sigma=2.0, clip_bound=0.5))
        r1, r2 = train(cfg, ds), train(cfg, ds)
        np.testing.assert_array_equal(r1.model.theta, r2.model.theta)
        for s1, s2 in zip(r1.trace.steps, r2.trace.steps):
            assert (s1.loss_population, s1.batch_size, s1.epsilon_so_far) == \
                   (s2.loss_population, s2.batch_size, s2.epsilon_so_far)
        assert [r[4] for r in r1.accountant.rows] == [r[4] for r in r2.accountant.rows]

    def test_dpsgd_degenerate_equals_sgd_trajectory(self):
        ds = synth_two_group(60, 60, 4, 2.0, 1.0, seed=8)
        cfg_plain = self.base_cfg(iterations=20)
        cfg_degen = self.base_cfg(
            iterations=20, privacy=PrivacySpec(delta=1e-5, sigma=0.0, clip_bound=1e9)
        )
        plain, degen = train(cfg_plain, ds), train(cfg_degen, ds)
        np.testing.assert_array_equal(plain.model.theta, degen.model.theta)
        for b1, b2 in zip(plain.trace.batches, degen.trace.batches):
            np.testing.assert_array_equal(b1, b2)

    def test_empty_batches_skipped_and_flagged(self):
        ds = synth_two_group(3, 3, 2, seed=1)
        cfg = self.base_cfg(d=2, q=0.01, iterations=30, seed=4)
        result = train(cfg, ds)
        flagged = [s for s in result.trace.steps if s.skipped]
        assert flagged, "expected at least one empty Poisson batch"
        assert all(s.batch_size == 0 for s in flagged)

    def test_divergence_guard_names_iteration(self):
        ds = tiny_ds([[1e4]], np.array([1.0]))
        cfg = self.base_cfg(family="linear_l2", d=1, lr=10.0, q=1.0, iterations=50)
        with np.errstate(over="ignore"), pytest.raises(DivergenceError, match="iteration"):
            train(cfg, ds)

    def test_appendix_style_defaults_run_fast(self):
        # |B| = 32 fixed, lr = 1e-4, C = 0.1, sigma = 5.0 on 1000 rows
        import time

        ds = synth_two_group(500, 500, 10, 2.0, 1.0, seed=0)
        cfg = TrainConfig(
            family="mlp1", d=10, K=2, H=16, lr=1e-4, iterations=100, seed=0,
            batch_scheme="fixed", batch_size=32,
            privacy=PrivacySpec(delta=1e-5, sigma=5.0, clip_bound=0.1),
        )
        t0 = time.monotonic()
        result = train(cfg, ds)
        assert time.monotonic() - t0 < 60.0
        assert math.isfinite(result.trace.steps[-1].loss_population)
        assert result.accountant.epsilon > 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(iterations=0)
        with pytest.raises(ValueError):
            DecompositionMode("sometimes")
        assert DecompositionMode.parse("mc:8").mc_batches == 8


class TestOutputPerturbation:
    def test_one_dimensional_closed_form(self):
        # objective (theta - 1)^2 + (lam/2) theta^2 with lam = 2 -> theta* = 1/2
        ds = tiny_ds([[1.0]], np.array([1.0]))
        star, _ = train_output_pert(ds, lam=2.0, epsilon=1.0, delta=1e-5, seed=0)
        assert star.theta[0] == pytest.approx(0.5, abs=1e-8)

    def test_zero_noise_returns_optimum(self):
        ds = synth_two_group(50, 50, 3, seed=2)
        star, tilde = train_output_pert(ds, 1.0, 1.0, 1e-5, seed=3,
                                        family="linear_l2", sigma=0.0)
        np.testing.assert_array_equal(star.theta, tilde.theta)

    def test_optimum_is_stationary_and_stable(self):
        ds = synth_two_group(80, 80, 4, 1.5, 1.0, seed=6)
        lam = 0.5
        star, _ = train_output_pert(ds, lam, 1.0, 1e-5, seed=0,
                                    family="softmax_linear", sigma=0.0)
        grad = per_sample_grad(star, ds).mean() + lam * star.theta
        assert np.linalg.norm(grad) <= 1e-8
        again, _ = train_output_pert(ds, lam, 1.0, 1e-5, seed=0,
                                     family="softmax_linear", sigma=0.0)
        assert np.linalg.norm(star.theta - again.theta) < 1e-8

    def test_noise_standard_deviation(self):
        # 200 releases x 50 coordinates = 1e4 draws; per-coordinate std must
        # match sensitivity * sigma within 3%
        rng_targets = np.random.default_rng(1)
        X = rng_targets.standard_normal((4, 50))
        ds = tiny_ds(X, rng_targets.standard_normal(4))
        lam, sigma = 1.0, 2.0
        sens = 2.0 / (ds.n * lam)
        draws = []
        for seed in range(200):
            star, tilde = train_output_pert(ds, lam, 1.0, 1e-5, seed=seed,
                                            family="linear_l2", sigma=sigma)
            draws.append(tilde.theta - star.theta)
        sample_std = np.concatenate(draws).std()
        assert abs(sample_std - sens * sigma) / (sens * sigma) <= 0.03

    def test_nonconvex_family_rejected(self):
        ds = synth_two_group(10, 10, 2, seed=0)
        with pytest.raises(UnsupportedFamilyError):
            train_output_pert(ds, 1.0, 1.0, 1e-5, seed=0, family="mlp1")

    def test_invalid_regularization(self):
        ds = synth_two_group(10, 10, 2, seed=0)
        with pytest.raises(ValueError):
            train_output_pert(ds, 0.0, 1.0, 1e-5, seed=0)
