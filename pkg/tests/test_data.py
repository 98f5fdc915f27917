"""Tests for the dataset container and per-ROI standardization."""

import numpy as np
import pytest

from imgxai.data import SpatialDataset, Standardization, standardize
from imgxai.errors import ValidationError


def _dataset(n=30, J=8, Q=2, seed=0):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, 2, size=(J, 3))
    node_of = np.repeat(np.arange(J // 2), 2)
    X = rng.normal(2.0, 3.0, size=(n, J, Q))
    Y = rng.normal(-1.0, 5.0, size=(n, J))
    return SpatialDataset(coords, node_of, X, Y)


class TestSpatialDataset:
    def test_properties(self):
        ds = _dataset()
        assert (ds.n, ds.J, ds.Q, ds.d, ds.V) == (30, 8, 2, 3, 4)
        np.testing.assert_array_equal(ds.J_v, [2, 2, 2, 2])

    def test_rejects_gap_in_nodes(self):
        ds = _dataset()
        with pytest.raises(ValidationError):
            SpatialDataset(ds.coords, np.array([0, 0, 2, 2, 3, 3, 4, 4]), ds.X, ds.Y)

    def test_rejects_shape_mismatch(self):
        ds = _dataset()
        with pytest.raises(ValidationError):
            SpatialDataset(ds.coords, ds.node_of, ds.X, ds.Y[:, :3])
        with pytest.raises(ValidationError):
            SpatialDataset(ds.coords[:, :1], ds.node_of, ds.X, ds.Y)

    def test_rejects_nan(self):
        ds = _dataset()
        Y = ds.Y.copy()
        Y[0, 0] = np.nan
        with pytest.raises(ValidationError):
            SpatialDataset(ds.coords, ds.node_of, ds.X, Y)

    def test_subset(self):
        ds = _dataset()
        sub = ds.subset([3, 5])
        np.testing.assert_array_equal(sub.Y, ds.Y[[3, 5]])


class TestStandardize:
    def test_training_moments(self):
        ds = _dataset()
        tr = np.arange(20)
        std, st = standardize(ds, tr)
        np.testing.assert_allclose(std.Y[tr].mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(std.Y[tr].std(axis=0, ddof=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(std.X[tr].std(axis=0, ddof=1), 1.0, atol=1e-12)
        # held-out subjects use the training statistics
        np.testing.assert_allclose(std.Y[25], (ds.Y[25] - ds.Y[tr].mean(0)) / ds.Y[tr].std(0, ddof=1))

    def test_round_trip(self):
        ds = _dataset()
        std, st = standardize(ds)
        back = st.inverse(std)
        np.testing.assert_allclose(back.Y, ds.Y, atol=1e-12)
        np.testing.assert_allclose(back.X, ds.X, atol=1e-12)

    def test_idempotent(self):
        std, _ = standardize(_dataset())
        again, _ = standardize(std)
        np.testing.assert_allclose(again.Y, std.Y, atol=1e-12)

    def test_constant_column_centered_and_flagged(self):
        ds = _dataset()
        Y = ds.Y.copy()
        Y[:, 2] = 7.0
        std, st = standardize(SpatialDataset(ds.coords, ds.node_of, ds.X, Y))
        np.testing.assert_array_equal(std.Y[:, 2], 0.0)
        assert st.y_constant[2] and st.y_sd[2] == 1.0
        assert st.y_constant.sum() == 1

    def test_beta_back_transform_matches_raw_regression(self):
        # per-ROI OLS slope on raw data equals the standardized slope times sd_y / sd_x
        rng = np.random.default_rng(4)
        n, J = 200, 3
        x = rng.normal(5.0, 2.0, size=(n, J, 1))
        y = 1.5 + np.array([0.5, -2.0, 3.0]) * x[..., 0] + rng.normal(size=(n, J))
        ds = SpatialDataset(rng.uniform(size=(J, 2)), np.zeros(J, int), x, y)
        std, st = standardize(ds)
        slopes_std = np.array([np.polyfit(std.X[:, j, 0], std.Y[:, j], 1)[0] for j in range(J)])
        slopes_raw = np.array([np.polyfit(x[:, j, 0], y[:, j], 1)[0] for j in range(J)])
        np.testing.assert_allclose(st.beta_to_original(slopes_std[None, :]), slopes_raw[None, :], rtol=1e-10)

    def test_pooled_scale_shared(self):
        ds = _dataset()
        std, st = standardize(ds, scale="pooled")
        assert np.all(st.y_sd == st.y_sd[0])
        oracle = np.sqrt(np.mean(ds.Y.var(axis=0, ddof=1)))
        assert st.y_sd[0] == pytest.approx(oracle)
        np.testing.assert_allclose(std.Y.mean(axis=0), 0.0, atol=1e-12)

    def test_dict_round_trip(self):
        _, st = standardize(_dataset())
        st2 = Standardization.from_dict(st.to_dict())
        np.testing.assert_array_equal(st2.x_sd, st.x_sd)

    def test_needs_two_subjects_and_outcomes(self):
        ds = _dataset()
        with pytest.raises(ValidationError):
            standardize(ds, [0])
        with pytest.raises(ValidationError):
            standardize(SpatialDataset(ds.coords, ds.node_of, ds.X))
        with pytest.raises(ValidationError):
            standardize(ds, scale="global")
