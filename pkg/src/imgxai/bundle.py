"""On-disk dataset bundles, feature tables and model checkpoints.

A bundle is a directory::

    manifest.json       counts, splits, seed, case label, bundle_version = 1
    coords.csv          roi, s1..sd
    nodes.csv           roi, node
    subjects.csv        subject, roi, x1..xQ, y   (long format, y may be empty)
    features.csv        subject, node, g1..g(R+1)   (optional)
    networks/NNNNN.csv  dense V x V edge matrix per subject   (optional)
    truth/              beta.csv, h.csv, g.csv   (optional, simulated data only)

Floats are written in their shortest exact form so files round-trip exactly
and repeated writes of the same data are byte-identical.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nnet
from .data import SpatialDataset, Standardization
from .errors import ValidationError

BUNDLE_VERSION = 1
CHECKPOINT_VERSION = 1


def fmt(x):
    """Shortest exact text form of a float; ``None`` is empty and NaN is ``NA``."""
    if x is None:
        return ""
    x = float(x)
    if np.isnan(x):
        return "NA"
    return repr(x)


def write_table(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_table(path):
    """Header and rows (as lists of strings) of a CSV file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing table {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path.name}: empty table")
    return rows[0], rows[1:]


def _float(v, table, row):
    if v in ("", "NA"):
        return np.nan
    try:
        return float(v)
    except ValueError:
        raise ValidationError(f"{table} row {row}: {v!r} is not a number") from None


def _numeric(path, expected_cols=None):
    header, rows = read_table(path)
    name = Path(path).name
    if expected_cols is not None and header[: len(expected_cols)] != expected_cols:
        raise ValidationError(f"{name}: expected columns starting with {expected_cols}, got {header}")
    out = np.empty((len(rows), len(header)))
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise ValidationError(f"{name} row {r + 1}: {len(row)} fields, header has {len(header)}")
        out[r] = [_float(v, name, r + 1) for v in row]
    return header, out


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=True)
        fh.write("\n")


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path.name}: invalid JSON ({exc})") from None


@dataclass
class DatasetBundle:
    dataset: SpatialDataset
    splits: dict
    R: int = 0
    features: Optional[np.ndarray] = None
    networks: Optional[list] = None
    truth: Optional[dict] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.dataset.n
        seen = np.concatenate([np.asarray(self.splits.get(k, []), dtype=int) for k in ("train", "val", "test")])
        if seen.size != n or not np.array_equal(np.sort(seen), np.arange(n)):
            raise ValidationError("manifest: splits must be disjoint and cover every subject exactly once")
        if self.features is not None:
            G = np.asarray(self.features, dtype=float)
            if G.shape[:2] != (n, self.dataset.V):
                raise ValidationError(f"features.csv: expected {n} subjects x {self.dataset.V} nodes, got {G.shape[:2]}")
            self.features = G
        if self.networks is not None and len(self.networks) != n:
            raise ValidationError(f"networks: expected {n} matrices, got {len(self.networks)}")

    def split(self, name):
        return np.asarray(self.splits[name], dtype=int)

    def manifest(self):
        ds = self.dataset
        m = {
            "bundle_version": BUNDLE_VERSION,
            "n": ds.n, "V": ds.V, "J": ds.J, "Q": ds.Q, "R": int(self.R), "d": ds.d,
            "splits": {k: [int(i) for i in self.splits[k]] for k in ("train", "val", "test")},
            "has_outcomes": ds.Y is not None,
            "has_features": self.features is not None,
            "has_networks": self.networks is not None,
            "has_truth": self.truth is not None,
        }
        m.update(self.meta)
        return m


def subjects_within(dataset: SpatialDataset, max_outcome):
    """Indices of subjects whose outcomes are all at most ``max_outcome``."""
    if dataset.Y is None:
        raise ValidationError("outcome trimming needs outcomes")
    return np.flatnonzero(np.all(dataset.Y <= max_outcome, axis=1))


def subset_subjects(b: DatasetBundle, keep) -> DatasetBundle:
    """Bundle restricted to subjects ``keep`` (renumbered 0..len(keep)-1, splits preserved)."""
    keep = np.asarray(keep, dtype=int)
    if keep.size < 2:
        raise ValidationError(f"only {keep.size} subjects remain after filtering")
    new_of = {int(i): a for a, i in enumerate(keep)}
    splits = {k: [new_of[int(i)] for i in b.splits[k] if int(i) in new_of] for k in ("train", "val", "test")}
    truth = None
    if b.truth is not None:
        truth = {k: (v[keep] if k in ("h", "g") else v) for k, v in b.truth.items()}
    return DatasetBundle(
        b.dataset.subset(keep), splits, b.R,
        None if b.features is None else b.features[keep],
        None if b.networks is None else [b.networks[i] for i in keep],
        truth, dict(b.meta),
    )


def write_features(path, G):
    G = np.asarray(G, dtype=float)
    n, V, k = G.shape
    header = ["subject", "node"] + [f"g{c + 1}" for c in range(k)]
    write_table(path, header, ([i, v, *G[i, v]] for i in range(n) for v in range(V)))


def read_features(path, n=None, V=None):
    header, A = _numeric(path, ["subject", "node"])
    name = Path(path).name
    if A.shape[0] == 0:
        raise ValidationError(f"{name}: no rows")
    subj, node = A[:, 0].astype(int), A[:, 1].astype(int)
    n = int(subj.max()) + 1 if n is None else n
    V = int(node.max()) + 1 if V is None else V
    if A.shape[0] != n * V:
        raise ValidationError(f"{name}: expected {n * V} rows (n={n}, V={V}), got {A.shape[0]}")
    G = np.full((n, V, A.shape[1] - 2), np.nan)
    G[subj, node] = A[:, 2:]
    if np.isnan(G).any():
        bad = np.argwhere(np.isnan(G).any(axis=2))[0]
        raise ValidationError(f"{name}: missing features for subject {bad[0]}, node {bad[1]}")
    return G


def write_bundle(bundle: DatasetBundle, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = bundle.dataset
    write_json(out / "manifest.json", bundle.manifest())
    write_table(out / "coords.csv", ["roi"] + [f"s{c + 1}" for c in range(ds.d)],
                ([j, *ds.coords[j]] for j in range(ds.J)))
    write_table(out / "nodes.csv", ["roi", "node"], ([j, int(ds.node_of[j])] for j in range(ds.J)))
    header = ["subject", "roi"] + [f"x{q + 1}" for q in range(ds.Q)] + ["y"]
    Y = ds.Y
    write_table(out / "subjects.csv", header, (
        [i, j, *ds.X[i, j], (None if Y is None else Y[i, j])] for i in range(ds.n) for j in range(ds.J)
    ))
    if bundle.features is not None:
        write_features(out / "features.csv", bundle.features)
    if bundle.networks is not None:
        for i, z in enumerate(bundle.networks):
            z = np.asarray(getattr(z, "edges", z))
            write_table(out / "networks" / f"{i:05d}.csv", [f"n{v}" for v in range(z.shape[1])], z.tolist())
    if bundle.truth is not None:
        beta = np.asarray(bundle.truth["beta"])
        write_table(out / "truth" / "beta.csv", ["roi"] + [f"beta{q + 1}" for q in range(beta.shape[0])],
                    ([j, *beta[:, j]] for j in range(beta.shape[1])))
        h = np.asarray(bundle.truth["h"])
        write_table(out / "truth" / "h.csv", ["subject", "node", "h"],
                    ([i, v, h[i, v]] for i in range(h.shape[0]) for v in range(h.shape[1])))
        if bundle.truth.get("g") is not None:
            write_features(out / "truth" / "g.csv", bundle.truth["g"])
    return out


def read_bundle(path) -> DatasetBundle:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"bundle directory {path} does not exist")
    m = read_json(path / "manifest.json")
    if m.get("bundle_version") != BUNDLE_VERSION:
        raise ValidationError(f"manifest: unsupported bundle_version {m.get('bundle_version')!r}")
    for key in ("n", "V", "J", "Q", "d", "splits"):
        if key not in m:
            raise ValidationError(f"manifest: missing field {key!r}")
    n, V, J, Q, d = (int(m[k]) for k in ("n", "V", "J", "Q", "d"))

    _, C = _numeric(path / "coords.csv", ["roi"])
    if C.shape != (J, d + 1):
        raise ValidationError(f"coords.csv: expected {J} rows x {d + 1} columns, got {C.shape}")
    if not np.array_equal(C[:, 0], np.arange(J)):
        raise ValidationError(f"coords.csv row {int(np.argmax(C[:, 0] != np.arange(J))) + 1}: ROI ids must be 0..J-1 in order")
    _, N = _numeric(path / "nodes.csv", ["roi", "node"])
    if N.shape[0] != J:
        raise ValidationError(f"nodes.csv: expected {J} rows, got {N.shape[0]}")
    node_of = N[:, 1].astype(int)
    if int(node_of.max()) + 1 != V:
        raise ValidationError(f"nodes.csv: manifest says V={V}, table has {int(node_of.max()) + 1} nodes")

    header, S = _numeric(path / "subjects.csv", ["subject", "roi"])
    if len(header) != Q + 3:
        raise ValidationError(f"subjects.csv: expected {Q + 3} columns, got {len(header)}")
    if S.shape[0] != n * J:
        raise ValidationError(f"subjects.csv: expected n*J = {n * J} rows, got {S.shape[0]}")
    i, j = S[:, 0].astype(int), S[:, 1].astype(int)
    if i.min() < 0 or i.max() >= n or j.min() < 0 or j.max() >= J:
        r = int(np.argmax((i < 0) | (i >= n) | (j < 0) | (j >= J)))
        raise ValidationError(f"subjects.csv row {r + 1}: subject/ROI index out of range")
    X = np.full((n, J, Q), np.nan)
    X[i, j] = S[:, 2:2 + Q]
    if np.isnan(X).any():
        bad = np.argwhere(np.isnan(X).any(axis=2))[0]
        raise ValidationError(f"subjects.csv: missing predictors for subject {bad[0]}, ROI {bad[1]}")
    y = S[:, -1]
    Y = None
    if not np.isnan(y).all():
        Y = np.full((n, J), np.nan)
        Y[i, j] = y
        if np.isnan(Y).any():
            bad = np.argwhere(np.isnan(Y))[0]
            raise ValidationError(f"subjects.csv: missing outcome for subject {bad[0]}, ROI {bad[1]}")
    ds = SpatialDataset(C[:, 1:], node_of, X, Y)

    features = read_features(path / "features.csv", n, V) if (path / "features.csv").exists() else None
    networks = None
    if (path / "networks").is_dir():
        networks = []
        for s in range(n):
            _, z = _numeric(path / "networks" / f"{s:05d}.csv")
            if z.shape != (V, V):
                raise ValidationError(f"networks/{s:05d}.csv: expected {V} x {V}, got {z.shape}")
            networks.append(z)
    truth = None
    if (path / "truth").is_dir():
        _, B = _numeric(path / "truth" / "beta.csv", ["roi"])
        _, H = _numeric(path / "truth" / "h.csv", ["subject", "node", "h"])
        h = np.zeros((n, V))
        h[H[:, 0].astype(int), H[:, 1].astype(int)] = H[:, 2]
        truth = {"beta": B[:, 1:].T, "h": h}
        if (path / "truth" / "g.csv").exists():
            truth["g"] = read_features(path / "truth" / "g.csv", n, V)
    core = {"bundle_version", "n", "V", "J", "Q", "R", "d", "splits",
            "has_outcomes", "has_features", "has_networks", "has_truth"}
    meta = {k: v for k, v in m.items() if k not in core}
    return DatasetBundle(ds, m["splits"], int(m.get("R", 0)), features, networks, truth, meta)


# --------------------------------------------------------------------------
# checkpoints


def _net_to_dict(p: nnet.MLPParams):
    return {
        "spec": [[l.width_in, l.width_out, l.activation, l.dropout_keep] for l in p.spec],
        "weights": [w.tolist() for w in p.weights],
        "biases": [b.tolist() for b in p.biases],
    }


def _net_from_dict(d):
    spec = tuple(nnet.LayerSpec(int(a), int(b), str(c), float(k)) for a, b, c, k in d["spec"])
    return nnet.MLPParams(
        tuple(np.asarray(w, dtype=float).reshape(l.width_out, l.width_in) for w, l in zip(d["weights"], spec)),
        tuple(np.asarray(b, dtype=float).reshape(l.width_out) for b, l in zip(d["biases"], spec)),
        spec,
    )


def _arr(a):
    return None if a is None else np.asarray(a).tolist()


def model_to_dict(model):
    return {
        "checkpoint_version": CHECKPOINT_VERSION,
        "beta_nets": [_net_to_dict(p) for p in model.beta_nets],
        "h_net": None if model.h_net is None else _net_to_dict(model.h_net),
        "beta0": model.beta0,
        "standardization": model.standardization.to_dict(),
        "coord_center": _arr(model.coord_center),
        "coord_scale": _arr(model.coord_scale),
        "g_center": _arr(model.g_center),
        "g_scale": _arr(model.g_scale),
        "config": model.config.to_dict(),
        "n_train": model.n_train,
        "tau2_hat": model.tau2_hat,
        "loss_trace": list(model.loss_trace),
        "mse_trace": list(model.mse_trace),
    }


def model_from_dict(d):
    from .xai_model import TrainedModel, XaiConfig

    version = d.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"checkpoint version {version!r} is not supported (expected {CHECKPOINT_VERSION})")
    opt = lambda a: None if a is None else np.asarray(a, dtype=float)  # noqa: E731
    return TrainedModel(
        tuple(_net_from_dict(p) for p in d["beta_nets"]),
        None if d["h_net"] is None else _net_from_dict(d["h_net"]),
        float(d["beta0"]),
        Standardization.from_dict(d["standardization"]),
        np.asarray(d["coord_center"], dtype=float),
        np.asarray(d["coord_scale"], dtype=float),
        opt(d["g_center"]),
        opt(d["g_scale"]),
        XaiConfig.from_dict(d["config"]),
        int(d["n_train"]),
        float(d["tau2_hat"]),
        list(d["loss_trace"]),
        list(d["mse_trace"]),
    )


def save_checkpoint(model, path):
    write_json(path, model_to_dict(model))


def load_checkpoint(path):
    return model_from_dict(read_json(path))


def save_draws(draws, out, node_of):
    """Export draws as ``draws_beta.csv`` (f, q, v, j, beta), ``draws_h.csv``
    (f, i, v, h), ``draws_tau2.csv`` (f, tau2) and ``draws.json`` (seed)."""
    out = Path(out)
    node_of = np.asarray(node_of, dtype=int)
    F, Q, J = draws.beta.shape
    write_table(out / "draws_beta.csv", ["f", "q", "v", "j", "beta"], (
        [f, q, int(node_of[j]), j, draws.beta[f, q, j]] for f in range(F) for q in range(Q) for j in range(J)
    ))
    _, n, V = draws.h.shape
    write_table(out / "draws_h.csv", ["f", "i", "v", "h"], (
        [f, i, v, draws.h[f, i, v]] for f in range(F) for i in range(n) for v in range(V)
    ))
    write_table(out / "draws_tau2.csv", ["f", "tau2"], ([f, draws.tau2[f]] for f in range(F)))
    write_json(out / "draws.json", {"seed": int(draws.seed), "F": F, "Q": Q, "J": J, "n": n, "V": V})


def _load_matrix(path, ncols):
    if not Path(path).exists():
        raise FileNotFoundError(f"missing draws table {path}")
    A = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if A.shape[1] != ncols:
        raise ValidationError(f"{Path(path).name}: expected {ncols} columns, got {A.shape[1]}")
    return A


def load_draws(out):
    """Inverse of :func:`save_draws`."""
    from .xai_model import PosteriorDraws

    out = Path(out)
    meta = read_json(out / "draws.json")
    F, Q, J, n, V = (int(meta[k]) for k in ("F", "Q", "J", "n", "V"))
    B = _load_matrix(out / "draws_beta.csv", 5)
    H = _load_matrix(out / "draws_h.csv", 4)
    T = _load_matrix(out / "draws_tau2.csv", 2)
    if B.shape[0] != F * Q * J or H.shape[0] != F * n * V or T.shape[0] != F:
        raise ValidationError("draws tables do not match draws.json counts")
    beta = np.zeros((F, Q, J))
    beta[B[:, 0].astype(int), B[:, 1].astype(int), B[:, 3].astype(int)] = B[:, 4]
    h = np.zeros((F, n, V))
    h[H[:, 0].astype(int), H[:, 1].astype(int), H[:, 2].astype(int)] = H[:, 3]
    tau2 = np.zeros(F)
    tau2[T[:, 0].astype(int)] = T[:, 1]
    return PosteriorDraws(beta, h, tau2, int(meta["seed"]))


def worker_count(default=1):
    """Worker processes from the ``XAI_WORKERS`` environment variable."""
    raw = os.environ.get("XAI_WORKERS", "")
    if not raw:
        return default
    try:
        k = int(raw)
    except ValueError:
        raise ValidationError(f"XAI_WORKERS must be an integer, got {raw!r}") from None
    if k < 1:
        raise ValidationError("XAI_WORKERS must be >= 1")
    return k
