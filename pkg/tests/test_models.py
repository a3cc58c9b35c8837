import itertools

import numpy as np
import pytest

from dpfair.datasets import GroupedDataset, synth_two_group
from dpfair.models import (
    Model,
    UnsupportedFamilyError,
    boundary_score,
    boundary_score_grad,
    forward,
    hessian_trace,
    hvp,
    load_checkpoint,
    loss_mean,
    per_sample_grad,
    per_sample_loss,
    save_checkpoint,
)


def tiny_ds(X, y, groups=None):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y)
    g = np.zeros(len(y), dtype=int) if groups is None else np.asarray(groups)
    return GroupedDataset(X, y, g)


def random_model(family, d, K=3, H=5, activation="tanh", seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    m = Model.init(family, d, K=K, H=H, activation=activation, seed=seed)
    return m.with_theta(scale * rng.standard_normal(m.param_count))


def fd_gradient(m, ds, i, h=1e-5):
    out = np.zeros(m.param_count)
    for p in range(m.param_count):
        e = np.zeros(m.param_count)
        e[p] = h
        lp = per_sample_loss(m.with_theta(m.theta + e), ds, [i])[0]
        lm = per_sample_loss(m.with_theta(m.theta - e), ds, [i])[0]
        out[p] = (lp - lm) / (2 * h)
    return out


def fd_trace(m, ds, idx, h=1e-4):
    l0 = per_sample_loss(m, ds, idx).mean()
    total = 0.0
    for p in range(m.param_count):
        e = np.zeros(m.param_count)
        e[p] = h
        lp = per_sample_loss(m.with_theta(m.theta + e), ds, idx).mean()
        lm = per_sample_loss(m.with_theta(m.theta - e), ds, idx).mean()
        total += (lp - 2 * l0 + lm) / h**2
    return total


class TestForward:
    def test_softmax_zero_params_uniform(self):
        m = Model.init("softmax_linear", 3, K=4)
        F = forward(m, np.random.default_rng(0).standard_normal((5, 3)))
        np.testing.assert_allclose(F, 0.25, atol=1e-12)

    def test_linear_basis_vector(self):
        m = Model("linear_l2", np.array([1.0, 0.0, 0.0]), d=3)
        assert forward(m, np.array([[3.0, 9.0, -2.0]]))[0] == 3.0

    def test_mlp_zero_output_weights_uniform(self):
        m = Model.init("mlp1", 3, K=2, H=4, seed=1)
        theta = np.array(m.theta)
        theta[3 * 4:] = 0.0  # output-layer block
        F = forward(m.with_theta(theta), np.random.default_rng(1).standard_normal((6, 3)))
        np.testing.assert_allclose(F, 0.5, atol=1e-12)

    def test_shape_error(self):
        m = Model.init("softmax_linear", 3)
        with pytest.raises(ValueError):
            forward(m, np.zeros((2, 5)))

    def test_rows_sum_to_one(self):
        for family in ("softmax_linear", "mlp1"):
            m = random_model(family, 6, K=4, seed=3)
            F = forward(m, np.random.default_rng(2).standard_normal((50, 6)))
            np.testing.assert_allclose(F.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(np.isfinite(F))


class TestLoss:
    def test_uniform_binary_cross_entropy(self):
        ds = tiny_ds([[0.4, -1.0]], [0])
        m = Model.init("softmax_linear", 2, K=2)
        assert loss_mean(m, ds) == pytest.approx(np.log(2), abs=1e-12)

    def test_squared_error_at_zero(self):
        ds = tiny_ds([[1.0]], np.array([2.0]))
        m = Model.init("linear_l2", 1)
        assert loss_mean(m, ds) == 4.0

    def test_mean_of_two(self):
        ds = tiny_ds([[1.0], [2.0]], np.array([1.0, 5.0]))
        m = Model.init("linear_l2", 1)
        a, b = per_sample_loss(m, ds)
        assert loss_mean(m, ds) == pytest.approx((a + b) / 2)

    def test_empty_subset_rejected(self):
        ds = tiny_ds([[1.0]], [0])
        m = Model.init("softmax_linear", 1)
        with pytest.raises(ValueError):
            loss_mean(m, ds, [])


class TestPerSampleGrad:
    def test_softmax_zero_param_half_entries(self):
        ds = tiny_ds([[1.0, 0.0]], [0])
        m = Model.init("softmax_linear", 2, K=2)
        g = per_sample_grad(m, ds).per_sample[0].reshape(2, 2)
        # g = x (f - y)^T with f = (1/2, 1/2), y = (1, 0)
        np.testing.assert_allclose(g, [[-0.5, 0.5], [0.0, 0.0]], atol=1e-12)

    def test_linear_closed_form(self):
        ds = tiny_ds([[1.0, 1.0]], np.array([1.0]))
        m = Model.init("linear_l2", 2)
        g = per_sample_grad(m, ds).per_sample[0]
        np.testing.assert_allclose(g, [-2.0, -2.0], atol=1e-14)

    @pytest.mark.parametrize("family,act", [
        ("linear_l2", "tanh"), ("softmax_linear", "tanh"),
        ("mlp1", "sigmoid"), ("mlp1", "tanh"),
    ])
    def test_matches_finite_differences(self, family, act):
        # 50 random (theta, x, y) states per family; rel error <= 1e-5
        rng = np.random.default_rng(17)
        ds = synth_two_group(50, 50, 4, 1.5, 0.8, seed=6)
        worst = 0.0
        for trial in range(50):
            m = random_model(family, 4, K=2, H=3, activation=act, seed=trial)
            i = int(rng.integers(ds.n))
            g = per_sample_grad(m, ds, [i]).per_sample[0]
            g_fd = fd_gradient(m, ds, i)
            rel = np.linalg.norm(g - g_fd) / max(np.linalg.norm(g_fd), 1e-12)
            worst = max(worst, rel)
        assert worst <= 1e-5

    def test_input_scaling_scales_gradient_exactly(self):
        # at theta = 0 the prediction is pinned uniform, so ||g(c x)|| = c ||g(x)||
        rng = np.random.default_rng(5)
        X = rng.standard_normal((10, 3))
        m = Model.init("softmax_linear", 3, K=3)
        for c in (2.0, 5.0, 0.25):
            g1 = per_sample_grad(m, tiny_ds(X, np.zeros(10, dtype=int)))
            g2 = per_sample_grad(m, tiny_ds(c * X, np.zeros(10, dtype=int)))
            np.testing.assert_allclose(g2.norms(), c * g1.norms(), rtol=1e-12)


class TestHessianTrace:
    def test_softmax_uniform_value(self):
        # f = (1/2, 1/2) and ||x||^2 = 2 -> (1 - 1/2) * 2 = 1
        ds = tiny_ds([[1.0, 1.0]], [0])
        m = Model.init("softmax_linear", 2, K=2)
        assert hessian_trace(m, ds) == pytest.approx(1.0, abs=1e-12)

    def test_linear_value(self):
        ds = tiny_ds([[1.0, 1.0]], np.array([0.0]))
        m = Model.init("linear_l2", 2)
        assert hessian_trace(m, ds) == pytest.approx(4.0, abs=1e-12)

    @pytest.mark.parametrize("family,act,tol", [
        ("linear_l2", "tanh", 1e-6),
        ("softmax_linear", "tanh", 1e-4),
        ("mlp1", "sigmoid", 1e-3),
        ("mlp1", "tanh", 1e-3),
    ])
    def test_matches_fd_diagonal(self, family, act, tol):
        ds = synth_two_group(12, 12, 3, 1.5, 1.0, seed=2)
        m = random_model(family, 3, K=2, H=4, activation=act, seed=33)
        closed = hessian_trace(m, ds, np.arange(8))
        fd = fd_trace(m, ds, np.arange(8))
        assert abs(closed - fd) / abs(fd) <= tol


class TestHvp:
    def test_zero_vector(self):
        ds = synth_two_group(10, 10, 3, seed=1)
        for family in ("linear_l2", "softmax_linear", "mlp1"):
            m = random_model(family, 3, K=2, H=4, seed=0)
            np.testing.assert_array_equal(hvp(m, ds, None, np.zeros(m.param_count)), 0.0)

    def test_linearity_exact_path(self):
        ds = synth_two_group(20, 20, 3, seed=1)
        m = random_model("softmax_linear", 3, K=3, seed=4)
        v = np.random.default_rng(9).standard_normal(m.param_count)
        hv = hvp(m, ds, None, v)
        hv3 = hvp(m, ds, None, 3.0 * v)
        np.testing.assert_allclose(hv3, 3.0 * hv, rtol=1e-6)

    def test_analytic_matches_fd(self):
        ds = synth_two_group(25, 25, 4, 1.5, 1.0, seed=3)
        m = random_model("softmax_linear", 4, K=3, seed=7)
        rng = np.random.default_rng(11)
        for _ in range(5):
            v = rng.standard_normal(m.param_count)
            hv = hvp(m, ds, None, v)
            h = 1e-5
            gp = per_sample_grad(m.with_theta(m.theta + h * v), ds).mean()
            gm = per_sample_grad(m.with_theta(m.theta - h * v), ds).mean()
            fd = (gp - gm) / (2 * h)
            assert np.linalg.norm(hv - fd) / np.linalg.norm(fd) <= 1e-4

    def test_shape_mismatch(self):
        ds = synth_two_group(5, 5, 3, seed=0)
        m = Model.init("softmax_linear", 3, K=2)
        with pytest.raises(ValueError):
            hvp(m, ds, None, np.zeros(m.param_count + 1))


def simplex_grid(K, step=0.05):
    ticks = int(round(1.0 / step))
    for combo in itertools.product(range(ticks + 1), repeat=K - 1):
        if sum(combo) <= ticks:
            yield np.array([*(c * step for c in combo),
                            (ticks - sum(combo)) * step])


class TestBoundaryScore:
    def test_uniform_binary(self):
        ds = tiny_ds([[0.0, 0.0]], [0])
        m = Model.init("softmax_linear", 2, K=2)
        scores, mean = boundary_score(m, ds)
        assert scores[0] == pytest.approx(0.5, abs=1e-12)
        assert mean == pytest.approx(0.5, abs=1e-12)

    def test_one_hot_is_zero(self):
        # huge logit gap drives the prediction to a vertex
        m = Model("softmax_linear", np.array([1000.0, -1000.0]), d=1, K=2)
        ds = tiny_ds([[1.0]], [0])
        scores, _ = boundary_score(m, ds)
        assert scores[0] == pytest.approx(0.0, abs=1e-12)

    def test_uniform_four_way(self):
        ds = tiny_ds([[0.0]], [0])
        m = Model.init("softmax_linear", 1, K=4)
        assert boundary_score(m, ds)[1] == pytest.approx(0.75, abs=1e-12)

    def test_regression_family_rejected(self):
        ds = tiny_ds([[1.0]], np.array([0.0]))
        with pytest.raises(UnsupportedFamilyError):
            boundary_score(Model.init("linear_l2", 1), ds)

    def test_range(self):
        ds = synth_two_group(100, 100, 4, 2.0, 1.0, seed=5)
        m = random_model("softmax_linear", 4, K=3, seed=5)
        scores, _ = boundary_score(m, ds)
        assert np.all(scores >= 0.0)
        assert np.all(scores <= 1 - 1 / 3 + 1e-12)

    @pytest.mark.parametrize("K", [2, 3, 4])
    def test_simplex_extremes(self, K):
        # score function on the probability simplex: unique max at uniform,
        # min exactly on the one-hot vertices (grid step 0.05 plus uniform)
        score = lambda f: 1.0 - np.sum(f**2)
        uniform = np.full(K, 1.0 / K)
        s_max = score(uniform)
        for f in simplex_grid(K):
            s = score(f)
            if np.allclose(f, uniform):
                continue
            assert s < s_max
            if np.isclose(s, 0.0, atol=1e-12):
                assert np.isclose(np.max(f), 1.0)
        assert all(score(v) == 0.0 for v in np.eye(K))

    def test_grad_matches_fd(self):
        ds = synth_two_group(15, 15, 3, seed=2)
        for family in ("softmax_linear", "mlp1"):
            m = random_model(family, 3, K=2, H=4, seed=21)
            g = boundary_score_grad(m, ds)
            fd = np.zeros(m.param_count)
            h = 1e-6
            for p in range(m.param_count):
                e = np.zeros(m.param_count)
                e[p] = h
                sp = boundary_score(m.with_theta(m.theta + e), ds)[1]
                sm = boundary_score(m.with_theta(m.theta - e), ds)[1]
                fd[p] = (sp - sm) / (2 * h)
            assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-5


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = random_model("mlp1", 4, K=3, H=5, activation="sigmoid", seed=9)
        path = tmp_path / "model.txt"
        save_checkpoint(m, path)
        loaded = load_checkpoint(path)
        assert loaded.family == m.family
        assert (loaded.d, loaded.K, loaded.H, loaded.activation) == (4, 3, 5, "sigmoid")
        np.testing.assert_array_equal(loaded.theta, m.theta)

    def test_rejects_other_files(self, tmp_path):
        path = tmp_path / "junk.txt"
        path.write_text("not a checkpoint\n")
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestModelType:
    def test_param_shapes_validated(self):
        with pytest.raises(ValueError):
            Model("softmax_linear", np.zeros(5), d=2, K=2)

    def test_theta_immutable(self):
        m = Model.init("softmax_linear", 2, K=2)
        with pytest.raises(ValueError):
            m.theta[0] = 1.0

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            Model("cnn", np.zeros(2), d=2)
