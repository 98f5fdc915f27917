"""Command-line interface: simulate, embed, fit, predict and benchmark.

Every subcommand is deterministic given its inputs, configuration and
``--seed``. Exit codes: 0 success, 2 validation error, 3 numeric failure,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import bundle as io
from .errors import ConfigError, NumericError, ValidationError, XaiError
from .latent_network import McmcConfig, NetworkObservation, distance_correlation, embed_network
from .metrics import (METHODS, benchmark, bayes_r2, coverage_and_length, rmse, rmspe)
from .simgen import ScenarioSpec, generate_scenario, get_scenario
from .xai_model import (XaiConfig, beta_normal_refine, beta_original_scale, fit_xai, h_original_scale,
                        infer_h, mc_dropout_draws, posterior_predictive)

log = logging.getLogger("imgxai")

# spawn-key counters of the master seed fan-out
EMBED_STREAM, FIT_STREAM, DRAWS_STREAM, PREDICT_STREAM = 11, 12, 13, 14


def component_seed(master, stream, index=0):
    """Seed of component ``(stream, index)`` derived from the master seed."""
    ss = np.random.SeedSequence(int(master), spawn_key=(stream, index))
    return int(ss.generate_state(1, np.uint32)[0])


def _from_dict(cls, d, section):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


@dataclass
class RunConfig:
    """Structured run configuration.

    ``scenario`` holds ScenarioSpec overrides, ``grid`` maps XaiConfig field
    names to candidate lists tried on the validation split, and
    ``benchmark`` holds defaults for the benchmark subcommand.
    """

    seed: int = 0
    out: str = "out"
    # optional ingestion filter: subjects with any outcome above it are dropped by `fit`
    max_outcome: Optional[float] = None
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    xai: XaiConfig = field(default_factory=XaiConfig)
    scenario: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    benchmark: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        scen = dict(d.get("scenario") or {})
        bad = set(scen) - {f.name for f in fields(ScenarioSpec)} - {"case"}
        if bad:
            raise ConfigError(f"unknown keys in [scenario]: {sorted(bad)}")
        grid = dict(d.get("grid") or {})
        bad = set(grid) - {f.name for f in fields(XaiConfig)}
        if bad:
            raise ConfigError(f"unknown keys in [grid]: {sorted(bad)}")
        bench = dict(d.get("benchmark") or {})
        bad = set(bench) - {"cases", "reps", "methods"}
        if bad:
            raise ConfigError(f"unknown keys in [benchmark]: {sorted(bad)}")
        return cls(
            seed=int(d.get("seed", 0)),
            out=str(d.get("out", "out")),
            max_outcome=None if d.get("max_outcome") is None else float(d["max_outcome"]),
            mcmc=_from_dict(McmcConfig, d.get("mcmc"), "mcmc"),
            xai=_from_dict(XaiConfig, d.get("xai"), "xai"),
            scenario=scen,
            grid=grid,
            benchmark=bench,
        )


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    text = path.read_text()
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path.name}: {exc}") from None
    else:
        import yaml

        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path.name}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path.name}: top level must be a mapping")
    return RunConfig.from_dict(data)


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(case, seed, out, overrides=None, end_to_end=None):
    """Write a simulated bundle with its truth sidecar."""
    overrides = dict(overrides or {})
    overrides.pop("case", None)
    if end_to_end is not None:
        overrides["end_to_end"] = bool(end_to_end)
    try:
        spec = get_scenario(case, seed=int(seed), **overrides)
    except TypeError as exc:
        raise ConfigError(f"invalid scenario override: {exc}") from None
    truth = generate_scenario(spec)
    meta = {
        "case": spec.label,
        "seed": int(seed),
        "scenario": spec.to_dict(),
        "delta2": [g.variance for g in spec.beta_gp] + [spec.h_gp.variance],
        "tau2": spec.tau2,
    }
    b = io.DatasetBundle(
        truth.dataset, {k: v.tolist() for k, v in truth.splits.items()}, spec.R,
        features=None if spec.end_to_end else truth.g,
        networks=truth.networks,
        truth={"beta": truth.beta, "h": truth.h, "g": truth.g},
        meta=meta,
    )
    return io.write_bundle(b, out)


def _embed_one(args):
    i, z, cfg = args
    try:
        net = NetworkObservation(z)
    except ValidationError as exc:
        raise ValidationError(f"subject {i}: {exc}") from None
    feats, result, flags = embed_network(net, cfg)
    diag = {
        "subject": i,
        "acceptance_eta": result.acceptance.get("eta", np.nan),
        "acceptance_u": result.acceptance.get("u", np.nan),
        "acceptance_log_sigma2": result.acceptance.get("log_sigma2", np.nan),
        "max_log_posterior": float(np.max(result.log_posterior)),
        "mean_sigma2": float(np.mean([s.sigma2 for s in result.chain])),
        "alignment_fallbacks": int(np.sum(flags)),
    }
    return feats.as_matrix(), diag, np.asarray(result.log_posterior)


def cmd_embed(bundle_path, mcmc: McmcConfig, seed, out=None, workers=None, trace_thin=10):
    """Fit the latent network model per subject and write ``features.csv``.

    Subject ``i`` uses the seed ``component_seed(seed, EMBED_STREAM, i)``,
    so results do not depend on the worker count.
    """
    b = io.read_bundle(bundle_path)
    if b.networks is None:
        raise ValidationError("bundle has no network matrices to embed")
    out = Path(out or bundle_path)
    jobs = [(i, z, replace(mcmc, seed=component_seed(seed, EMBED_STREAM, i))) for i, z in enumerate(b.networks)]
    workers = workers or io.worker_count()
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_embed_one, jobs))
    else:
        results = [_embed_one(j) for j in jobs]
    G = np.stack([r[0] for r in results])
    io.write_features(out / "features.csv", G)
    diags = [r[1] for r in results]
    io.write_table(out / "embed_diagnostics.csv", list(diags[0]), ([d[k] for k in diags[0]] for d in diags))
    io.write_table(out / "embed_logpost.csv", ["subject", "draw", "log_posterior"], (
        [i, t, lp[t]] for i, (_, _, lp) in enumerate(results) for t in range(0, len(lp), trace_thin)
    ))
    if Path(out) == Path(bundle_path):
        m = io.read_json(out / "manifest.json")
        m["R"] = int(mcmc.R)
        m["has_features"] = True
        io.write_json(out / "manifest.json", m)
    summary = {"subjects": len(results), "R": mcmc.R,
               "mean_acceptance_u": float(np.mean([d["acceptance_u"] for d in diags]))}
    if b.truth is not None and "g" in b.truth and b.truth["g"].shape[-1] - 1 == mcmc.R:
        Ut = b.truth["g"][..., :-1]
        summary["distance_correlation"] = float(np.mean(
            [distance_correlation(G[i, :, :-1], Ut[i]) for i in range(len(G))]))
    return G, summary


def _grid_points(grid):
    if not grid:
        return [{}]
    keys = sorted(grid)
    vals = [grid[k] if isinstance(grid[k], (list, tuple)) else [grid[k]] for k in keys]
    return [dict(zip(keys, combo)) for combo in itertools.product(*vals)]


def _features_for(b: io.DatasetBundle, features_path, config: XaiConfig):
    if not config.use_network:
        return None
    if features_path is not None:
        return io.read_features(features_path, b.dataset.n, b.dataset.V)
    if b.features is None:
        raise ValidationError("bundle has no features.csv; run `embed` first or pass --features")
    return b.features


def select_config(b, G, base: XaiConfig, grid):
    """Pick the grid point with the lowest validation RMSPE (models trained on the train split)."""
    points = _grid_points(grid)
    if len(points) == 1 and not points[0]:
        return base, []
    val = b.split("val")
    if val.size == 0:
        raise ValidationError("a tuning grid needs a non-empty validation split")
    train = b.split("train")
    scores = []
    for p in points:
        cfg = replace(base, **p)
        model, ds_std = fit_xai(b.dataset, G, cfg, train)
        draws = mc_dropout_draws(model, ds_std, G, train_index=train)
        pred = posterior_predictive(model, draws, b.dataset.X[val], b.dataset.node_of,
                                    None if G is None else G[val])
        scores.append({**p, "val_rmspe": rmspe(pred.point, b.dataset.Y[val])})
        log.info("grid point %s: validation RMSPE %.4f", p, scores[-1]["val_rmspe"])
    best = int(np.argmin([s["val_rmspe"] for s in scores]))
    return replace(base, **points[best]), scores


def cmd_fit(bundle_path, config: XaiConfig, seed, out, features_path=None, grid=None, max_outcome=None):
    """Train on train+validation subjects, draw from the posterior and report.

    With a ``grid``, candidate settings are trained on the train split and
    compared on the validation split first; the winner is refit on both.
    ``max_outcome`` drops every subject with an outcome above it before
    fitting; output tables keep the bundle's subject ids.
    """
    t0 = time.perf_counter()
    b = io.read_bundle(bundle_path)
    if b.dataset.Y is None:
        raise ValidationError("bundle has no outcomes to fit")
    config = replace(config, seed=component_seed(seed, FIT_STREAM))
    G = _features_for(b, features_path, config)
    n_bundle = b.dataset.n
    subject_id = np.arange(n_bundle)
    if max_outcome is not None:
        subject_id = io.subjects_within(b.dataset, max_outcome)
        log.info("outcome filter kept %d of %d subjects", subject_id.size, b.dataset.n)
        b = io.subset_subjects(b, subject_id)
        G = None if G is None else G[subject_id]
    config, scores = select_config(b, G, config, grid)
    fit_idx = np.concatenate([b.split("train"), b.split("val")])
    model, ds_std = fit_xai(b.dataset, G, config, fit_idx)
    draws = mc_dropout_draws(model, ds_std, G, train_index=fit_idx, seed=component_seed(seed, DRAWS_STREAM))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_checkpoint(model, out / "checkpoint.json")
    io.save_draws(draws, out, b.dataset.node_of)

    ds = b.dataset
    fitted = posterior_predictive(model, draws, ds.X[fit_idx], ds.node_of,
                                  None if G is None else G[fit_idx], seed=component_seed(seed, PREDICT_STREAM))
    io.write_table(out / "fitted.csv", ["subject", "roi", "fitted"], (
        [int(subject_id[s]), j, fitted.point[a, j]] for a, s in enumerate(fit_idx) for j in range(ds.J)
    ))
    refine = beta_normal_refine(draws)
    lo, hi = refine.interval()
    report = {
        "config": config.to_dict(),
        "grid_scores": scores,
        "n_fit_subjects": int(fit_idx.size),
        "subjects_dropped": [int(i) for i in np.setdiff1d(np.arange(n_bundle), subject_id)],
        "tau2_hat": model.tau2_hat,
        "tau2_draws_mean": float(np.mean(draws.tau2)),
        "loss_trace": model.loss_trace,
        "mse_trace": model.mse_trace,
        "beta_interval_width_mean": float(np.mean(hi - lo)),
        "draws_identical": bool(np.all(draws.beta == draws.beta[0]) and np.all(draws.h == draws.h[0])),
        "bayes_r2_fit": bayes_r2(fitted.means_std.reshape(draws.F, -1), draws.tau2),
    }
    test = b.split("test")
    if test.size:
        pred = posterior_predictive(model, draws, ds.X[test], ds.node_of, None if G is None else G[test],
                                    seed=component_seed(seed, PREDICT_STREAM))
        y = ds.Y[test]
        c = coverage_and_length(pred.samples.reshape(draws.F, -1), y)
        c_std = coverage_and_length(pred.samples_std.reshape(draws.F, -1), model.standardization.transform_Y(y))
        report.update(test_rmspe=rmspe(pred.point, y), test_coverage=c.coverage,
                      test_interval_length=c_std.length, test_interval_length_original=c.length)
    if b.truth is not None:
        beta_hat = beta_original_scale(model, refine.mean)
        report["rmse_beta"] = [rmse(beta_hat[q], b.truth["beta"][q]) for q in range(ds.Q)]
        if G is not None:
            h_hat = h_original_scale(model, infer_h(draws)["mean"], beta_hat, ds.node_of)
            report["rmse_h"] = rmse(h_hat, b.truth["h"])
    report["seconds"] = time.perf_counter() - t0
    io.write_json(out / "fit_report.json", report)
    return model, draws, report


def _parse_subjects(spec, b: io.DatasetBundle):
    if spec in ("train", "val", "test"):
        return b.split(spec)
    if spec == "all":
        return np.arange(b.dataset.n)
    if spec == "fit":
        return np.concatenate([b.split("train"), b.split("val")])
    try:
        idx = np.array([int(s) for s in str(spec).split(",") if s != ""], dtype=int)
    except ValueError:
        raise ValidationError(f"subjects must be a split name or comma-separated indices, got {spec!r}") from None
    if idx.size == 0 or idx.min() < 0 or idx.max() >= b.dataset.n:
        raise ValidationError(f"subject indices out of range 0..{b.dataset.n - 1}")
    return idx


def cmd_predict(checkpoint, bundle_path, out, subjects="test", seed=0, features_path=None,
                draws_path=None, samples=False, level=0.95, interval="quantile", mcmc: Optional[McmcConfig] = None):
    """Composition-sampled predictions on the original outcome scale, one row per (subject, ROI)."""
    from .metrics import hpd_bounds

    model = io.load_checkpoint(checkpoint)
    draws = io.load_draws(draws_path or Path(checkpoint).parent)
    b = io.read_bundle(bundle_path)
    idx = _parse_subjects(subjects, b)
    ds = b.dataset
    if ds.Q != model.Q:
        raise ValidationError(f"bundle has Q={ds.Q} predictors, checkpoint expects {model.Q}")
    G = networks = None
    if model.uses_network:
        if features_path is not None:
            G = io.read_features(features_path, ds.n, ds.V)[idx]
        elif b.features is not None:
            G = b.features[idx]
        elif b.networks is not None:
            networks = [NetworkObservation(b.networks[i]) for i in idx]
        else:
            raise ValidationError("the model needs node features or raw networks for the new subjects")
    pred = posterior_predictive(model, draws, ds.X[idx], ds.node_of, G, networks=networks,
                                mcmc_config=mcmc, seed=component_seed(seed, PREDICT_STREAM))
    F = draws.F
    flat = pred.samples.reshape(F, -1)
    if interval == "hpd":
        lower, upper = hpd_bounds(flat, level)
    elif interval == "quantile":
        a = (1 - level) / 2
        lower, upper = np.quantile(flat, [a, 1 - a], axis=0)
    else:
        raise ValidationError(f"unknown interval type {interval!r}")
    J = ds.J
    header = ["subject", "roi", "point", "lower", "upper"] + ([f"s{f + 1}" for f in range(F)] if samples else [])
    rows = []
    for a, s in enumerate(idx):
        for j in range(J):
            k = a * J + j
            row = [int(s), j, pred.point[a, j], lower[k], upper[k]]
            if samples:
                row.extend(flat[:, k])
            rows.append(row)
    io.write_table(out, header, rows)
    summary = {"rows": len(rows)}
    if ds.Y is not None:
        y = ds.Y[idx].ravel()
        summary.update(rmspe=rmspe(pred.point, y), coverage=float(np.mean((y >= lower) & (y <= upper))))
    return pred, summary


def _write_records(report, out):
    keys = []
    for r in report.records:
        keys.extend(k for k in r if k not in keys)
    io.write_table(out / "records.csv", keys, ([r.get(k, "") for k in keys] for r in report.records))
    agg = report.aggregate()
    if agg:
        akeys = []
        for r in agg:
            akeys.extend(k for k in r if k not in akeys)
        io.write_table(out / "aggregate.csv", akeys, ([r.get(k, "") for k in akeys] for r in agg))
    return agg


def cmd_benchmark(cases, reps, methods, seed, out, config: Optional[XaiConfig] = None, workers=None,
                  overrides=None):
    """Replication sweep; writes ``records.csv`` and ``aggregate.csv``.

    ``overrides`` are ScenarioSpec fields applied to every case.
    """
    overrides = {k: v for k, v in (overrides or {}).items() if k not in ("case", "seed")}
    try:
        specs = [get_scenario(c, **overrides) for c in cases]
    except TypeError as exc:
        raise ConfigError(f"invalid scenario override: {exc}") from None
    config = config or XaiConfig(**BENCHMARK_PRESET)
    report = benchmark(specs, methods, replications=int(reps), seed=int(seed), xai_config=config,
                       workers=workers or io.worker_count())
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    agg = _write_records(report, out)
    return report, agg


def timing_sweep(ns=(300, 1000), Js=(100, 300), V=5, seed=0, config: Optional[XaiConfig] = None, out=None):
    """Wall-clock of ``cmd_fit`` on simulated bundles of each size (60/20/20 splits)."""
    config = config or XaiConfig(epochs=3, batch_size=256, n_draws=20)
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        for n in ns:
            for J in Js:
                n_tr, n_val = int(0.6 * n), int(0.2 * n)
                over = dict(n=n, J=J, V=V, n_train=n_tr, n_val=n_val, n_test=n - n_tr - n_val)
                bdir = Path(tmp) / f"b_{n}_{J}"
                cmd_simulate("case1", seed, bdir, over)
                t0 = time.perf_counter()
                cmd_fit(bdir, config, seed, Path(tmp) / f"fit_{n}_{J}")
                rows.append({"n": n, "J": J, "seconds": time.perf_counter() - t0})
                log.info("timing n=%d J=%d: %.2fs", n, J, rows[-1]["seconds"])
    if out is not None:
        io.write_table(Path(out) / "timing.csv", ["n", "J", "seconds"], ([r["n"], r["J"], r["seconds"]] for r in rows))
    return rows


# chosen on scenario seeds outside the acceptance runs (see README)
BENCHMARK_PRESET = dict(epochs=40, batch_size=128, learning_rate=0.02, lr_final_ratio=0.05, keep=0.99, n_draws=200)


# --------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="imgxai", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic bundle")
    s.add_argument("--case", default=None, help="scenario label, e.g. case1")
    s.add_argument("--end-to-end", action="store_true", help="simulate raw networks instead of features")

    s = sub.add_parser("embed", help="latent network embedding of every subject")
    s.add_argument("--bundle", required=True)

    s = sub.add_parser("fit", help="train the regression and draw from the posterior")
    s.add_argument("--bundle", required=True)
    s.add_argument("--features", help="features table (defaults to the bundle's)")

    s = sub.add_parser("predict", help="posterior predictive for a subject slice")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--bundle", required=True)
    s.add_argument("--subjects", default="test", help="train, val, test, fit, all or comma-separated indices")
    s.add_argument("--features")
    s.add_argument("--draws", help="directory holding the draws tables (defaults to the checkpoint's)")
    s.add_argument("--samples", action="store_true", help="append the raw predictive samples")
    s.add_argument("--interval", choices=("quantile", "hpd"), default="quantile")
    s.add_argument("--level", type=float, default=0.95)

    s = sub.add_parser("benchmark", help="replication study")
    s.add_argument("--case", help="comma-separated scenario labels")
    s.add_argument("--reps", type=int)
    s.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    s.add_argument("--timing-sweep", action="store_true", help="also time fits over n in {300,1000}, J in {100,300}")
    return p


def _run(args):
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out or cfg.out)
    if args.command == "simulate":
        case = args.case or cfg.scenario.get("case")
        if case is None:
            raise ValidationError("simulate needs --case or scenario.case in the config")
        path = cmd_simulate(case, seed, out, cfg.scenario, True if args.end_to_end else None)
        print(f"bundle written to {path}")
    elif args.command == "embed":
        _, summary = cmd_embed(args.bundle, cfg.mcmc, seed, out=args.out)
        print(json.dumps(summary, sort_keys=True))
    elif args.command == "fit":
        _, _, report = cmd_fit(args.bundle, cfg.xai, seed, out, args.features, cfg.grid, cfg.max_outcome)
        keys = ("tau2_hat", "test_rmspe", "test_coverage", "test_interval_length", "rmse_beta", "rmse_h",
                "beta_interval_width_mean", "draws_identical", "seconds")
        print(json.dumps({k: report[k] for k in keys if k in report}, sort_keys=True))
    elif args.command == "predict":
        target = out if out.suffix == ".csv" else out / "predictions.csv"
        _, summary = cmd_predict(args.checkpoint, args.bundle, target, args.subjects, seed, args.features,
                                 args.draws, args.samples, args.level, args.interval, cfg.mcmc)
        print(json.dumps(summary, sort_keys=True))
    elif args.command == "benchmark":
        bench = cfg.benchmark
        cases = (args.case or ",".join(bench.get("cases", ["case1"]))).split(",")
        reps = args.reps if args.reps is not None else int(bench.get("reps", 1))
        methods = (args.methods or ",".join(bench.get("methods", ["xai", "glm"]))).split(",")
        xai = cfg.xai if args.config else XaiConfig(**BENCHMARK_PRESET)
        report, agg = cmd_benchmark(cases, reps, methods, seed, out, xai, overrides=cfg.scenario)
        for row in agg:
            se = "NA" if np.isnan(row.get("rmspe_se", np.nan)) else f"{row['rmspe_se']:.4f}"
            print(f"{row['case']:>10} {row['method']:>15}  RMSPE {row.get('rmspe', float('nan')):.4f} (SE {se})"
                  f"  reps {row['replications']}  failed {row['failed']}")
        if args.timing_sweep:
            for r in timing_sweep(seed=seed, out=out):
                print(f"timing n={r['n']} J={r['J']}: {r['seconds']:.2f}s")
        if report.partial:
            print("warning: some replications failed; see records.csv", file=sys.stderr)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return 4
    except XaiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
