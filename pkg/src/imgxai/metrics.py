"""Evaluation metrics, the per-ROI GLM baseline and the replication harness."""

from __future__ import annotations

import logging
import math
import time
import traceback
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import qr

from .data import SpatialDataset
from .errors import ValidationError

log = logging.getLogger(__name__)

METHODS = ("xai", "glm", "xai-no-network")


def rmspe(pred, truth):
    """Root mean squared difference between two equally long arrays."""
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.size != truth.size or pred.size == 0:
        raise ValidationError(f"length mismatch: {pred.size} predictions vs {truth.size} targets")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


rmse = rmspe


@dataclass
class IntervalSummary:
    lower: np.ndarray
    upper: np.ndarray
    coverage: float
    length: float


def hpd_bounds(samples, level=0.95):
    """Shortest interval holding ``level`` of the samples, per column."""
    s = np.sort(np.asarray(samples, dtype=float), axis=0)
    F = s.shape[0]
    k = max(int(math.ceil(level * F)), 1)
    widths = s[k - 1:] - s[: F - k + 1]
    start = np.argmin(widths, axis=0)
    cols = np.arange(s.shape[1]) if s.ndim > 1 else None
    if cols is None:
        return s[start], s[start + k - 1]
    return s[start, cols], s[start + k - 1, cols]


def coverage_and_length(draws, truth, level=0.95, method="quantile") -> IntervalSummary:
    """Coverage and mean length of pointwise intervals from ``F x targets`` draws.

    ``method`` is ``"quantile"`` (equal-tailed) or ``"hpd"``.
    """
    d = np.asarray(draws, dtype=float)
    d = d.reshape(d.shape[0], -1)
    t = np.asarray(truth, dtype=float).ravel()
    if d.shape[0] < 20:
        raise ValidationError(f"at least 20 draws are needed for {level:.0%} intervals, got {d.shape[0]}")
    if d.shape[1] != t.size:
        raise ValidationError("one truth value per target is required")
    if method == "quantile":
        a = (1 - level) / 2
        lower, upper = np.quantile(d, [a, 1 - a], axis=0)
    elif method == "hpd":
        lower, upper = hpd_bounds(d, level)
    else:
        raise ValidationError(f"unknown interval method {method!r}")
    inside = (t >= lower) & (t <= upper)
    return IntervalSummary(lower, upper, float(inside.mean()), float(np.mean(upper - lower)))


def bayes_r2_draws(fitted, residual):
    """Per-draw ``var(fit) / (var(fit) + var(res))``.

    ``residual`` is either ``F`` residual variances or ``F x targets``
    residuals.
    """
    fit = np.asarray(fitted, dtype=float)
    fit = fit.reshape(fit.shape[0], -1)
    if fit.shape[0] < 2:
        raise ValidationError("at least two draws are needed")
    var_fit = fit.var(axis=1, ddof=1)
    res = np.asarray(residual, dtype=float)
    var_res = res if res.ndim == 1 else res.reshape(res.shape[0], -1).var(axis=1, ddof=1)
    total = var_fit + var_res
    if np.any(total <= 0):
        raise ValidationError("zero total variance")
    return var_fit / total


def bayes_r2(fitted, residual):
    """Posterior mean of the draw-wise R^2."""
    return float(np.mean(bayes_r2_draws(fitted, residual)))


def bayes_r2_by_group(fitted, residual, groups):
    """Bayesian R^2 computed separately for each target group (e.g. node)."""
    fit = np.asarray(fitted, dtype=float)
    fit = fit.reshape(fit.shape[0], -1)
    groups = np.asarray(groups).ravel()
    res = np.asarray(residual, dtype=float)
    out = {}
    for gval in np.unique(groups):
        sel = groups == gval
        r = res if res.ndim == 1 else res.reshape(res.shape[0], -1)[:, sel]
        out[int(gval)] = bayes_r2(fit[:, sel], r)
    return out


def frequentist_r2(y, yhat):
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    sst = np.sum((y - y.mean()) ** 2)
    if sst <= 0:
        raise ValidationError("zero total variance")
    return float(1.0 - np.sum((y - yhat) ** 2) / sst)


@dataclass
class GlmFit:
    """Per-ROI least squares of ``y`` on ``(1, x, g)``.

    ``coef`` is ``J x p`` with columns ``[intercept, x_1..x_Q, g_1..g_k]``;
    dropped collinear columns hold zero and are marked in ``dropped``.
    """

    coef: np.ndarray
    dropped: np.ndarray
    node_of: np.ndarray
    Q: int
    r2: float

    @property
    def beta(self):
        return self.coef[:, 1:1 + self.Q].T

    def _design(self, X, G):
        n, J, _ = X.shape
        parts = [np.ones((n, J, 1)), X]
        if G is not None and self.coef.shape[1] > 1 + self.Q:
            parts.append(np.asarray(G, dtype=float)[:, self.node_of, :])
        return np.concatenate(parts, axis=2)

    def predict(self, X, G=None):
        D = self._design(np.asarray(X, dtype=float), G)
        return np.einsum("ijp,jp->ij", D, self.coef)

    def h_estimate(self, G):
        """Node effect implied by the linear fit: ROI intercept plus ``g`` slope, averaged over each node's ROIs."""
        G = np.asarray(G, dtype=float)
        a = self.coef[:, 0]
        gamma = self.coef[:, 1 + self.Q:]
        per_roi = a[None, :] + np.einsum("ijk,jk->ij", G[:, self.node_of, :], gamma)
        V = int(self.node_of.max()) + 1
        return np.column_stack([per_roi[:, self.node_of == v].mean(axis=1) for v in range(V)])


def _ols_drop_collinear(D, y, tol=1e-10):
    _, R, piv = qr(D, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    keep = np.zeros(D.shape[1], dtype=bool)
    keep[piv[diag > tol * max(diag.max(initial=0.0), 1.0)]] = True
    coef = np.zeros(D.shape[1])
    coef[keep] = np.linalg.lstsq(D[:, keep], y, rcond=None)[0]
    return coef, ~keep


def glm_baseline(dataset: SpatialDataset, features=None, train_index=None) -> GlmFit:
    """Fit one ordinary least squares model per ROI on the training subjects."""
    idx = np.arange(dataset.n) if train_index is None else np.asarray(train_index, dtype=int)
    X, Y = dataset.X[idx], dataset.Y[idx]
    G = None if features is None else np.asarray(features, dtype=float)[idx]
    p = 1 + dataset.Q + (0 if G is None else G.shape[-1])
    if idx.size <= p:
        raise ValidationError(f"GLM needs more than {p} training subjects per ROI, got {idx.size}")
    fit = GlmFit(np.zeros((dataset.J, p)), np.zeros((dataset.J, p), bool), dataset.node_of, dataset.Q, float("nan"))
    D = fit._design(X, G)
    for j in range(dataset.J):
        fit.coef[j], fit.dropped[j] = _ols_drop_collinear(D[:, j, :], Y[:, j])
    if fit.dropped.any():
        log.warning("GLM dropped collinear columns at %d ROIs", int(fit.dropped.any(axis=1).sum()))
    fit.r2 = frequentist_r2(Y, fit.predict(X, G))
    return fit


# --------------------------------------------------------------------------
# replication harness


@dataclass
class BenchmarkReport:
    records: list = field(default_factory=list)

    @property
    def partial(self):
        return any(r.get("failed") for r in self.records)

    def metric_names(self):
        skip = {"case", "method", "rep", "seed", "failed", "error"}
        names = []
        for r in self.records:
            for k, v in r.items():
                if k not in skip and k not in names and isinstance(v, (int, float)) and not isinstance(v, bool):
                    names.append(k)
        return names

    def values(self, case, method, metric):
        return np.array([
            r[metric] for r in self.records
            if r["case"] == case and r["method"] == method and not r.get("failed") and metric in r
        ], dtype=float)

    def aggregate(self):
        """Mean and standard error (SD / sqrt(reps)) per case, method and metric."""
        out = []
        keys = []
        for r in self.records:
            key = (r["case"], r["method"])
            if key not in keys:
                keys.append(key)
        for case, method in keys:
            row = {"case": case, "method": method}
            group = [r for r in self.records if r["case"] == case and r["method"] == method]
            ok = [r for r in group if not r.get("failed")]
            row["replications"] = len(ok)
            row["failed"] = len(group) - len(ok)
            for m in self.metric_names():
                v = self.values(case, method, m)
                row[m] = float(v.mean()) if v.size else float("nan")
                row[m + "_se"] = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
            out.append(row)
        return out


def _xai_record(truth, config, train_idx, test_idx, use_network):
    from dataclasses import replace

    from .xai_model import (beta_normal_refine, beta_original_scale, fit_xai, h_original_scale,
                            infer_h, mc_dropout_draws, posterior_predictive)

    ds, G = truth.dataset, truth.g
    cfg = replace(config, use_network=use_network)
    t0 = time.perf_counter()
    model, ds_std = fit_xai(ds, G if use_network else None, cfg, train_idx)
    t1 = time.perf_counter()
    draws = mc_dropout_draws(model, ds_std, G if use_network else None, train_index=train_idx)
    pred = posterior_predictive(model, draws, ds.X[test_idx], ds.node_of,
                                G[test_idx] if use_network else None)
    t2 = time.perf_counter()
    y_test = ds.Y[test_idx]
    y_test_std = ds_std.Y[test_idx]
    F = draws.F
    cov = coverage_and_length(pred.samples.reshape(F, -1), y_test)
    cov_std = coverage_and_length(pred.samples_std.reshape(F, -1), y_test_std)
    rec = {
        "rmspe": rmspe(pred.point, y_test),
        "coverage": cov.coverage,
        "length": cov_std.length,
        "length_original": cov.length,
        "r2": bayes_r2(pred.means_std.reshape(F, -1), draws.tau2),
        "tau2_hat": float(np.mean(draws.tau2)),
        "time_fit": t1 - t0,
        "time_inference": t2 - t1,
    }
    beta_hat = beta_original_scale(model, beta_normal_refine(draws).mean)
    for q in range(beta_hat.shape[0]):
        rec[f"rmse_beta{q + 1}"] = rmse(beta_hat[q], truth.beta[q])
    if use_network:
        h_hat = h_original_scale(model, infer_h(draws)["mean"], beta_hat, ds.node_of)
        rec["rmse_h"] = rmse(h_hat, truth.h)
    return rec


def _glm_record(truth, train_idx, test_idx):
    ds, G = truth.dataset, truth.g
    t0 = time.perf_counter()
    fit = glm_baseline(ds, G, train_idx)
    yhat = fit.predict(ds.X[test_idx], G[test_idx])
    rec = {
        "rmspe": rmspe(yhat, ds.Y[test_idx]),
        "r2": frequentist_r2(ds.Y[test_idx], yhat),
        "time_fit": time.perf_counter() - t0,
    }
    for q in range(fit.Q):
        rec[f"rmse_beta{q + 1}"] = rmse(fit.beta[q], truth.beta[q])
    rec["rmse_h"] = rmse(fit.h_estimate(G), truth.h)
    return rec


def run_replication(spec, methods=("xai", "glm"), xai_config=None, truth=None):
    """Generate one dataset from ``spec`` and evaluate each method on it.

    Training uses the train and validation subjects together; metrics are
    computed on the test subjects. Failures are recorded, not raised.
    """
    from .simgen import generate_scenario
    from .xai_model import XaiConfig

    config = xai_config or XaiConfig()
    t0 = time.perf_counter()
    truth = truth or generate_scenario(spec)
    t_sim = time.perf_counter() - t0
    train_idx = np.concatenate([truth.splits["train"], truth.splits["val"]])
    test_idx = truth.splits["test"]
    records = []
    for method in methods:
        base = {"case": spec.label, "method": method, "seed": spec.seed, "time_simulate": t_sim}
        try:
            if method == "xai":
                rec = _xai_record(truth, config, train_idx, test_idx, True)
            elif method == "xai-no-network":
                rec = _xai_record(truth, config, train_idx, test_idx, False)
            elif method == "glm":
                rec = _glm_record(truth, train_idx, test_idx)
            else:
                raise ValidationError(f"unknown method {method!r}")
            base.update(rec)
            base["failed"] = False
        except ValidationError:
            raise
        except Exception as exc:  # replication failures are reported, not fatal
            log.error("replication %s/%s seed %s failed: %s", spec.label, method, spec.seed, exc)
            base.update(failed=True, error=f"{type(exc).__name__}: {exc}")
            log.debug(traceback.format_exc())
        records.append(base)
    return records


def replication_seed(master_seed, case_index, rep):
    """Seed of replication ``rep`` of the ``case_index``-th case."""
    return int(np.random.SeedSequence(master_seed, spawn_key=(case_index, rep)).generate_state(1)[0])


def benchmark(scenarios, methods=("xai", "glm"), replications=1, seed=0, xai_config=None,
              seeds=None, workers=1) -> BenchmarkReport:
    """Run ``replications`` simulate-fit-evaluate rounds for every scenario."""
    if replications < 1:
        raise ValidationError("replications must be >= 1")
    bad = set(methods) - set(METHODS)
    if bad:
        raise ValidationError(f"unknown methods {sorted(bad)}; choose from {METHODS}")
    jobs = []
    for c, spec in enumerate(scenarios):
        for rep in range(replications):
            s = seeds[rep] if seeds is not None else replication_seed(seed, c, rep)
            jobs.append((rep, spec.with_overrides(seed=int(s))))
    report = BenchmarkReport()
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(run_replication, spec, tuple(methods), xai_config) for _, spec in jobs]
            results = [f.result() for f in futures]
    else:
        results = [run_replication(spec, tuple(methods), xai_config) for _, spec in jobs]
    for (rep, _), recs in zip(jobs, results):
        for r in recs:
            r["rep"] = rep
            report.records.append(r)
    return report
