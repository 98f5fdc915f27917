"""Tests for metrics, the GLM baseline and the replication harness."""

import numpy as np
import pytest

from imgxai.data import SpatialDataset
from imgxai.errors import ValidationError
from imgxai.metrics import (
    BenchmarkReport, bayes_r2, bayes_r2_by_group, bayes_r2_draws, benchmark, coverage_and_length,
    frequentist_r2, glm_baseline, hpd_bounds, replication_seed, rmspe, run_replication,
)
from imgxai.simgen import get_scenario
from imgxai.xai_model import XaiConfig

SMALL = dict(n=30, n_train=15, n_val=5, n_test=10, J=12, V=3)


class TestPointMetrics:
    def test_rmspe(self):
        assert rmspe([1.0, 2.0, 3.0], [1.0, 0.0, 3.0]) == pytest.approx(np.sqrt(4 / 3))
        with pytest.raises(ValidationError):
            rmspe([1.0], [1.0, 2.0])

    def test_frequentist_r2(self):
        y = np.array([1.0, 2.0, 3.0, 4.0])
        assert frequentist_r2(y, y) == 1.0
        assert frequentist_r2(y, np.full(4, y.mean())) == pytest.approx(0.0)
        with pytest.raises(ValidationError):
            frequentist_r2(np.ones(3), np.ones(3))


class TestIntervals:
    def test_coverage_of_known_intervals(self):
        # draws 0..99 per target: the 95% quantile interval is [2.475, 96.525]
        draws = np.tile(np.arange(100.0)[:, None], (1, 4))
        s = coverage_and_length(draws, [50.0, 1.0, 99.0, 96.0])
        assert s.coverage == 0.5
        assert s.length == pytest.approx(96.525 - 2.475)

    def test_normal_draws_cover_nominally(self):
        # 4000 independent targets: SD of the coverage is about 0.0035
        rng = np.random.default_rng(0)
        draws = rng.normal(size=(400, 4000))
        truth = rng.normal(size=4000)
        s = coverage_and_length(draws, truth)
        assert s.coverage == pytest.approx(0.95, abs=0.02)
        assert s.length == pytest.approx(2 * 1.96, rel=0.03)

    def test_hpd_is_shortest(self):
        rng = np.random.default_rng(1)
        x = rng.exponential(size=(1000, 3))
        lo, hi = hpd_bounds(x, 0.9)
        q_lo, q_hi = np.quantile(x, [0.05, 0.95], axis=0)
        assert np.all(hi - lo <= q_hi - q_lo)
        inside = ((x >= lo) & (x <= hi)).mean(axis=0)
        np.testing.assert_allclose(inside, 0.9, atol=0.002)

    def test_hpd_of_symmetric_sample(self):
        lo, hi = hpd_bounds(np.arange(21.0), 0.9)
        assert hi - lo == 18.0

    def test_needs_enough_draws(self):
        with pytest.raises(ValidationError):
            coverage_and_length(np.zeros((10, 2)), [0.0, 0.0])
        with pytest.raises(ValidationError):
            coverage_and_length(np.zeros((30, 2)), [0.0, 0.0], method="bogus")


class TestBayesR2:
    def test_draw_wise_ratio(self):
        fitted = np.array([[0.0, 2.0], [1.0, 5.0]])
        # sample variances 2 and 8
        np.testing.assert_allclose(bayes_r2_draws(fitted, np.array([2.0, 8.0])), [0.5, 0.5])
        assert bayes_r2(fitted, np.array([6.0, 0.0])) == pytest.approx((0.25 + 1.0) / 2)

    def test_residual_matrix(self):
        rng = np.random.default_rng(0)
        fit = rng.normal(size=(5, 50))
        res = rng.normal(size=(5, 50))
        vf, vr = fit.var(axis=1, ddof=1), res.var(axis=1, ddof=1)
        assert bayes_r2(fit, res) == pytest.approx(np.mean(vf / (vf + vr)))

    def test_by_group(self):
        fit = np.array([[0.0, 2.0, 0.0, 0.0], [0.0, 2.0, 1.0, 1.0]])
        out = bayes_r2_by_group(fit, np.array([2.0, 2.0]), [0, 0, 1, 1])
        assert out[0] == pytest.approx(0.5)
        assert out[1] == pytest.approx(0.0)


class TestGlm:
    def test_matches_lstsq(self):
        rng = np.random.default_rng(0)
        n, J = 40, 4
        X = rng.normal(size=(n, J, 2))
        G = rng.normal(size=(n, 2, 3))
        node_of = np.array([0, 0, 1, 1])
        Y = rng.normal(size=(n, J))
        ds = SpatialDataset(rng.uniform(size=(J, 2)), node_of, X, Y)
        fit = glm_baseline(ds, G)
        for j in range(J):
            D = np.column_stack([np.ones(n), X[:, j], G[:, node_of[j]]])
            np.testing.assert_allclose(fit.coef[j], np.linalg.lstsq(D, Y[:, j], rcond=None)[0], atol=1e-10)
        assert fit.beta.shape == (2, J)
        assert not fit.dropped.any()

    def test_drops_collinear_columns(self):
        # predictors constant across ROIs plus a constant node feature
        rng = np.random.default_rng(1)
        n, J = 30, 3
        X = np.repeat(rng.normal(size=(n, 1, 1)), J, axis=1)
        G = np.concatenate([rng.normal(size=(n, 1, 1)), np.ones((n, 1, 1))], axis=2)
        Y = 2.0 * X[..., 0] + 1.0 + 0.1 * rng.normal(size=(n, J))
        ds = SpatialDataset(rng.uniform(size=(J, 2)), np.zeros(J, int), X, Y)
        fit = glm_baseline(ds, G)
        assert fit.dropped.any(axis=1).all()
        np.testing.assert_allclose(fit.beta[0], 2.0, atol=0.1)
        np.testing.assert_allclose(fit.predict(X, G), Y, atol=0.4)

    def test_noiseless_recovery(self):
        rng = np.random.default_rng(2)
        n, J = 20, 3
        X = rng.normal(size=(n, J, 1))
        G = rng.normal(size=(n, 1, 1))
        Y = 0.5 + 3.0 * X[..., 0] - 2.0 * G[:, [0, 0, 0], 0]
        ds = SpatialDataset(rng.uniform(size=(J, 2)), np.zeros(J, int), X, Y)
        fit = glm_baseline(ds, G)
        np.testing.assert_allclose(fit.beta, 3.0, atol=1e-10)
        np.testing.assert_allclose(fit.h_estimate(G)[:, 0], 0.5 - 2.0 * G[:, 0, 0], atol=1e-10)
        assert fit.r2 == pytest.approx(1.0)

    def test_too_few_subjects(self):
        rng = np.random.default_rng(3)
        ds = SpatialDataset(rng.uniform(size=(2, 2)), np.zeros(2, int), rng.normal(size=(3, 2, 2)),
                            rng.normal(size=(3, 2)))
        with pytest.raises(ValidationError):
            glm_baseline(ds)


class TestReport:
    def test_aggregate_mean_and_se(self):
        rep = BenchmarkReport([
            {"case": "a", "method": "glm", "rmspe": 1.0, "failed": False},
            {"case": "a", "method": "glm", "rmspe": 3.0, "failed": False},
            {"case": "a", "method": "glm", "failed": True, "error": "boom"},
        ])
        row = rep.aggregate()[0]
        assert row["rmspe"] == 2.0
        assert row["rmspe_se"] == pytest.approx(np.sqrt(2.0) / np.sqrt(2))
        assert (row["replications"], row["failed"]) == (2, 1)
        assert rep.partial

    def test_single_replication_has_undefined_se(self):
        row = BenchmarkReport([{"case": "a", "method": "xai", "rmspe": 1.5, "failed": False}]).aggregate()[0]
        assert row["rmspe"] == 1.5
        assert np.isnan(row["rmspe_se"])

    def test_replication_seeds_distinct_and_stable(self):
        seeds = {replication_seed(0, c, r) for c in range(3) for r in range(10)}
        assert len(seeds) == 30
        assert replication_seed(4, 1, 2) == replication_seed(4, 1, 2)


class TestHarness:
    def test_glm_replication(self):
        recs = run_replication(get_scenario("case1", seed=1, **SMALL), ("glm",))
        r = recs[0]
        assert not r["failed"]
        for key in ("rmspe", "r2", "rmse_beta1", "rmse_beta2", "rmse_h"):
            assert np.isfinite(r[key])

    def test_xai_replication_records(self):
        cfg = XaiConfig(beta_hidden=(8,), h_hidden=(8,), epochs=2, n_draws=20)
        recs = run_replication(get_scenario("case1", seed=1, **SMALL), ("xai", "xai-no-network"), cfg)
        assert [r["method"] for r in recs] == ["xai", "xai-no-network"]
        assert 0.0 <= recs[0]["coverage"] <= 1.0
        assert "rmse_h" in recs[0] and "rmse_h" not in recs[1]

    def test_failures_are_recorded(self):
        cfg = XaiConfig(beta_hidden=(8,), h_hidden=(8,), epochs=20, learning_rate=1e8, keep=1.0, n_draws=20)
        with np.errstate(all="ignore"):
            recs = run_replication(get_scenario("case1", seed=1, **SMALL), ("xai", "glm"), cfg)
        assert recs[0]["failed"] and "NumericError" in recs[0]["error"]
        assert not recs[1]["failed"]

    def test_unknown_method(self):
        with pytest.raises(ValidationError):
            benchmark([get_scenario("case1", **SMALL)], ("svm",))

    def test_benchmark_is_reproducible(self):
        specs = [get_scenario("case1", **SMALL)]
        a = benchmark(specs, ("glm",), replications=2, seed=3)
        b = benchmark(specs, ("glm",), replications=2, seed=3)
        assert [r["rmspe"] for r in a.records] == [r["rmspe"] for r in b.records]
        assert a.records[0]["seed"] != a.records[1]["seed"]
