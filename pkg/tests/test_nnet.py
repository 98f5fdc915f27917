"""Tests for the numpy network engine."""

import numpy as np
import pytest

from imgxai import nnet
from imgxai.errors import ConfigError, NumericError, ValidationError


def _spec(widths, activation="relu", keep=1.0):
    n = len(widths) - 1
    return tuple(
        nnet.LayerSpec(widths[l], widths[l + 1], "identity" if l == n - 1 else activation, keep)
        for l in range(n)
    )


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


class TestLayerSpec:
    def test_rejects_bad_widths_and_probabilities(self):
        with pytest.raises(ConfigError):
            nnet.LayerSpec(0, 3)
        with pytest.raises(ConfigError):
            nnet.LayerSpec(2, 3, dropout_keep=1.5)
        with pytest.raises(ConfigError):
            nnet.LayerSpec(2, 3, activation="sigmoid")

    def test_chain_mismatch(self):
        with pytest.raises(ConfigError):
            nnet.init_mlp((nnet.LayerSpec(3, 4), nnet.LayerSpec(5, 1, "identity")), 0)

    def test_final_layer_must_be_scalar_identity(self):
        with pytest.raises(ConfigError):
            nnet.validate_spec((nnet.LayerSpec(3, 2, "identity"),))
        with pytest.raises(ConfigError):
            nnet.validate_spec((nnet.LayerSpec(3, 1, "relu"),))

    def test_build_spec_keep_per_layer(self):
        spec = nnet.build_spec(3, (8, 4), keep=(1.0, 0.9, 0.8))
        assert [l.dropout_keep for l in spec] == [1.0, 0.9, 0.8]
        assert spec[-1].activation == "identity" and spec[-1].width_out == 1
        with pytest.raises(ConfigError):
            nnet.build_spec(3, (8, 4), keep=(0.9, 0.9))


class TestInit:
    def test_shapes_for_single_identity_layer(self):
        p = nnet.init_mlp(_spec([3, 1]), 7)
        assert p.weights[0].shape == (1, 3)
        np.testing.assert_array_equal(p.biases[0], [0.0])

    def test_deterministic(self):
        a = nnet.init_mlp(_spec([3, 16, 1]), 11)
        b = nnet.init_mlp(_spec([3, 16, 1]), 11)
        for x, y in zip(a.weights, b.weights):
            np.testing.assert_array_equal(x, y)

    def test_fan_in_scaling(self):
        # weights have variance 1/width_in; with 400 x 400 entries the
        # sample variance is within a few percent
        p = nnet.init_mlp(_spec([400, 400, 1]), 0)
        assert abs(p.weights[0].var() * 400 - 1.0) < 0.03
        assert abs(p.weights[0].mean()) < 0.01


class TestForward:
    def test_hand_computed_two_layer_relu(self):
        spec = _spec([2, 2, 1])
        W1 = np.array([[1.0, -1.0], [0.5, 2.0]])
        b1 = np.array([0.0, -1.0])
        W2 = np.array([[2.0, -3.0]])
        b2 = np.array([0.5])
        p = nnet.MLPParams((W1, W2), (b1, b2), spec)
        x = np.array([1.0, 1.0])
        # hidden pre-activations: [0, 1.5]; relu -> [0, 1.5]; output 2*0 - 3*1.5 + 0.5
        assert nnet.forward(p, x) == pytest.approx(-4.0)

    def test_tanh_identity_output(self):
        spec = _spec([1, 1, 1], activation="tanh")
        p = nnet.MLPParams((np.array([[2.0]]), np.array([[3.0]])), (np.array([0.1]), np.array([-1.0])), spec)
        assert nnet.forward(p, np.array([0.4])) == pytest.approx(3.0 * np.tanh(0.9) - 1.0)

    def test_mask_zeroes_entries(self):
        spec = _spec([2, 1])
        p = nnet.MLPParams((np.array([[1.0, 2.0]]),), (np.array([3.0]),), spec)
        m = nnet.DropoutMask((np.array([[1.0, 0.0]]),), (np.array([0.0]),))
        assert nnet.forward(p, np.array([5.0, 7.0]), m) == pytest.approx(5.0)

    def test_all_zero_mask_gives_zero(self):
        spec = _spec([3, 8, 1])
        p = nnet.init_mlp(spec, 1)
        out = nnet.forward_batch(p, np.ones((4, 3)), nnet.full_mask(spec, 0.0))
        np.testing.assert_array_equal(out, 0.0)

    def test_batch_matches_rowwise(self):
        spec = _spec([3, 5, 4, 1], activation="tanh")
        p = nnet.init_mlp(spec, 2)
        X = np.random.default_rng(0).normal(size=(6, 3))
        np.testing.assert_allclose(nnet.forward_batch(p, X), [nnet.forward(p, x) for x in X], rtol=1e-14)

    def test_wrong_input_width(self):
        p = nnet.init_mlp(_spec([3, 1]), 0)
        with pytest.raises(ValidationError):
            nnet.forward(p, np.ones(2))

    def test_mask_shape_mismatch(self):
        p = nnet.init_mlp(_spec([3, 1]), 0)
        with pytest.raises(ValidationError):
            nnet.forward(p, np.ones(3), nnet.full_mask(_spec([2, 1])))

    def test_non_finite_input(self):
        p = nnet.init_mlp(_spec([2, 1]), 0)
        with pytest.raises(NumericError):
            nnet.forward(p, np.array([np.nan, 1.0]))


class TestGradient:
    @pytest.mark.parametrize("depth", [1, 2, 3])
    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_matches_finite_differences(self, depth, activation):
        rng = np.random.default_rng(depth * 10 + (activation == "tanh"))
        widths = [3] + list(rng.integers(2, 6, size=depth - 1)) + [1]
        spec = _spec(widths, activation)
        p = nnet.init_mlp(spec, int(rng.integers(1 << 30)))
        X = rng.normal(size=(5, 3))
        up = rng.normal(size=5)
        # relu is tested away from its kink
        _, (_, pre, _) = nnet.forward_batch(p, X, return_cache=True)
        for z in pre[:-1]:
            assert np.abs(z).min() > 1e-4
        g = nnet.grad(p, X, up)
        fd = nnet.finite_diff_grad(p, X, up, 1e-6)
        for a, b in zip(g.weights + g.biases, fd.weights + fd.biases):
            assert _rel_err(a, b).max() < 1e-5

    def test_masked_entries_get_zero_gradient(self):
        spec = _spec([3, 4, 1], keep=0.5)
        p = nnet.init_mlp(spec, 3)
        m = nnet.sample_dropout_mask(spec, 4)
        g = nnet.grad(p, np.ones((2, 3)), np.ones(2), m)
        for gw, mw in zip(g.weights, m.weights):
            assert np.all(gw[mw == 0] == 0)
        fd = nnet.finite_diff_grad(p, np.ones((2, 3)), np.ones(2), mask=m)
        for a, b in zip(g.weights, fd.weights):
            np.testing.assert_allclose(a, b, atol=1e-7)

    def test_relu_subgradient_at_kink_is_zero(self):
        spec = _spec([1, 1, 1])
        p = nnet.MLPParams((np.array([[1.0]]), np.array([[1.0]])), (np.array([0.0]), np.array([0.0])), spec)
        g = nnet.grad(p, np.array([[0.0]]), np.array([1.0]))
        assert g.weights[0][0, 0] == 0.0

    def test_empty_batch(self):
        p = nnet.init_mlp(_spec([2, 1]), 0)
        with pytest.raises(ValidationError):
            nnet.grad(p, np.zeros((0, 2)), np.zeros(0))


class TestSgd:
    def test_zero_gradient_zero_penalty_is_identity(self):
        spec = _spec([3, 4, 1])
        p = nnet.init_mlp(spec, 0)
        zero = nnet.Gradient(tuple(np.zeros_like(w) for w in p.weights), tuple(np.zeros_like(b) for b in p.biases))
        q = nnet.sgd_step(p, zero, 0.1, 0.0, 0.0)
        for a, b in zip(p.weights + p.biases, q.weights + q.biases):
            np.testing.assert_array_equal(a, b)

    def test_penalty_shrinks_geometrically(self):
        # with zero data gradient, w <- w (1 - 2 lr lambda)
        spec = _spec([2, 1])
        p = nnet.MLPParams((np.array([[1.0, -2.0]]),), (np.array([4.0]),), spec)
        zero = nnet.Gradient((np.zeros((1, 2)),), (np.zeros(1),))
        q = nnet.sgd_step(p, zero, 0.1, [0.5], [0.25])
        np.testing.assert_allclose(q.weights[0], [[0.9, -1.8]])
        np.testing.assert_allclose(q.biases[0], [3.8])

    def test_descends_quadratic(self):
        # one linear layer fitted to y = 2x - 1 by repeated steps
        spec = _spec([1, 1])
        p = nnet.MLPParams((np.array([[0.0]]),), (np.array([0.0]),), spec)
        x = np.linspace(-1, 1, 21)[:, None]
        y = 2 * x[:, 0] - 1
        for _ in range(500):
            r = nnet.forward_batch(p, x) - y
            p = nnet.sgd_step(p, nnet.grad(p, x, r / len(y)), 0.5, 0.0, 0.0)
        assert p.weights[0][0, 0] == pytest.approx(2.0, abs=1e-6)
        assert p.biases[0][0] == pytest.approx(-1.0, abs=1e-6)

    def test_rejects_bad_arguments(self):
        p = nnet.init_mlp(_spec([2, 1]), 0)
        g = nnet.grad(p, np.ones((1, 2)), np.ones(1))
        with pytest.raises(ValidationError):
            nnet.sgd_step(p, g, 0.0, 0.0, 0.0)
        with pytest.raises(ValidationError):
            nnet.sgd_step(p, g, 0.1, -1.0, 0.0)


class TestDropoutMask:
    def test_keep_one_and_zero(self):
        assert all(np.all(w == 1) for w in nnet.sample_dropout_mask(_spec([3, 5, 1], keep=1.0), 0).weights)
        assert all(np.all(w == 0) for w in nnet.sample_dropout_mask(_spec([3, 5, 1], keep=0.0), 0).weights)

    def test_empirical_keep_rate(self):
        # 10 000 entries at keep 0.9: SD of the mean is 0.003, so [0.88, 0.92]
        # is more than six SDs wide
        m = nnet.sample_dropout_mask((nnet.LayerSpec(100, 100, "identity", 0.9),), 5)
        assert 0.88 <= m.weights[0].mean() <= 0.92

    def test_deterministic_given_seed(self):
        spec = _spec([3, 5, 1], keep=0.7)
        a, b = nnet.sample_dropout_mask(spec, 9), nnet.sample_dropout_mask(spec, 9)
        for x, y in zip(a.weights + a.biases, b.weights + b.biases):
            np.testing.assert_array_equal(x, y)

    def test_biases_are_masked_too(self):
        spec = (nnet.LayerSpec(1, 5000, "identity", 0.5),)
        m = nnet.sample_dropout_mask(spec, 1)
        assert 0.45 < m.biases[0].mean() < 0.55
