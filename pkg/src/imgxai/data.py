"""Spatial dataset container and per-ROI standardization."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpatialDataset:
    """Outcome and predictor images for ``n`` subjects over ``J`` ROIs.

    ``coords`` is ``J x d``, ``node_of`` maps each ROI to its node,
    ``X`` is ``n x J x Q`` and ``Y`` is ``n x J`` (``Y`` may be None for
    subjects whose outcome is to be predicted).
    """

    coords: np.ndarray
    node_of: np.ndarray
    X: np.ndarray
    Y: np.ndarray = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        node_of = np.asarray(self.node_of, dtype=int)
        X = np.asarray(self.X, dtype=float)
        if coords.ndim != 2 or coords.shape[1] not in (2, 3):
            raise ValidationError(f"coords must be J x 2 or J x 3, got {coords.shape}")
        J = coords.shape[0]
        if node_of.shape != (J,):
            raise ValidationError(f"node_of must have one entry per ROI ({J}), got {node_of.shape}")
        if node_of.min(initial=0) < 0:
            raise ValidationError("node indices must be non-negative")
        present = np.unique(node_of)
        if present.size and not np.array_equal(present, np.arange(present.size)):
            raise ValidationError("node indices must be 0..V-1 with every node owning at least one ROI")
        if X.ndim != 3 or X.shape[1] != J:
            raise ValidationError(f"X must be n x J x Q with J={J}, got {X.shape}")
        for name, arr in (("coords", coords), ("X", X)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite values")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "node_of", node_of)
        object.__setattr__(self, "X", X)
        if self.Y is not None:
            Y = np.asarray(self.Y, dtype=float)
            if Y.shape != X.shape[:2]:
                raise ValidationError(f"Y must be n x J = {X.shape[:2]}, got {Y.shape}")
            if not np.all(np.isfinite(Y)):
                raise ValidationError("Y contains non-finite values")
            object.__setattr__(self, "Y", Y)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def J(self):
        return self.coords.shape[0]

    @property
    def Q(self):
        return self.X.shape[2]

    @property
    def d(self):
        return self.coords.shape[1]

    @property
    def V(self):
        return int(self.node_of.max()) + 1

    @property
    def J_v(self):
        return np.bincount(self.node_of, minlength=self.V)

    def subset(self, subjects):
        subjects = np.asarray(subjects, dtype=int)
        Y = None if self.Y is None else self.Y[subjects]
        return SpatialDataset(self.coords, self.node_of, self.X[subjects], Y)


@dataclass
class Standardization:
    """Per-ROI means and SDs of the outcome and each predictor."""

    y_mean: np.ndarray   # J
    y_sd: np.ndarray     # J
    x_mean: np.ndarray   # J x Q
    x_sd: np.ndarray     # J x Q
    y_constant: np.ndarray
    x_constant: np.ndarray

    def transform_X(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_sd

    def transform_Y(self, Y):
        return (np.asarray(Y, dtype=float) - self.y_mean) / self.y_sd

    def inverse_Y(self, Y_std):
        return np.asarray(Y_std, dtype=float) * self.y_sd + self.y_mean

    def inverse_X(self, X_std):
        return np.asarray(X_std, dtype=float) * self.x_sd + self.x_mean

    def transform(self, ds: SpatialDataset) -> SpatialDataset:
        Y = None if ds.Y is None else self.transform_Y(ds.Y)
        return SpatialDataset(ds.coords, ds.node_of, self.transform_X(ds.X), Y)

    def inverse(self, ds: SpatialDataset) -> SpatialDataset:
        Y = None if ds.Y is None else self.inverse_Y(ds.Y)
        return SpatialDataset(ds.coords, ds.node_of, self.inverse_X(ds.X), Y)

    def beta_to_original(self, beta_std):
        """Map coefficients fitted on the standardized scale back (``... x Q x J``)."""
        return np.asarray(beta_std) * (self.y_sd[None, :] / self.x_sd.T)

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in
                ("y_mean", "y_sd", "x_mean", "x_sd", "y_constant", "x_constant")}

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["y_mean"], dtype=float), np.asarray(d["y_sd"], dtype=float),
            np.asarray(d["x_mean"], dtype=float), np.asarray(d["x_sd"], dtype=float),
            np.asarray(d["y_constant"], dtype=bool), np.asarray(d["x_constant"], dtype=bool),
        )


def _moments(A, axis=0):
    mean = A.mean(axis=axis)
    sd = A.std(axis=axis, ddof=1)
    const = ~(sd > 1e-12 * np.maximum(np.abs(mean), 1.0))
    sd = np.where(const, 1.0, sd)
    return mean, sd, const


def _pooled(sd, const):
    var = np.where(const, np.nan, sd ** 2)
    if np.all(np.isnan(var), axis=0).any():
        return np.ones_like(sd)
    return np.broadcast_to(np.sqrt(np.nanmean(var, axis=0)), sd.shape).copy()


def standardize(dataset: SpatialDataset, train_index=None, scale="roi"):
    """Center and scale outcome and predictors ROI by ROI on the training subjects.

    ``scale="roi"`` divides every ROI by its own SD. ``scale="pooled"``
    still centers per ROI but divides by one SD per variable, the root mean
    of the per-ROI variances, so effects shared across ROIs keep a common
    scale. Columns with zero spread are centered only and flagged in the
    returned statistics (their SD is stored as 1).
    """
    if scale not in ("roi", "pooled"):
        raise ValidationError(f"unknown scaling {scale!r}; use 'roi' or 'pooled'")
    idx = np.arange(dataset.n) if train_index is None else np.asarray(train_index, dtype=int)
    if idx.size < 2:
        raise ValidationError("standardization needs at least two training subjects")
    if dataset.Y is None:
        raise ValidationError("standardization needs observed outcomes")
    y_mean, y_sd, y_const = _moments(dataset.Y[idx])
    x_mean, x_sd, x_const = _moments(dataset.X[idx])
    if scale == "pooled":
        y_sd = _pooled(y_sd, y_const)
        x_sd = _pooled(x_sd, x_const)
    if y_const.any() or x_const.any():
        log.warning("%d outcome and %d predictor columns have zero spread; centered only",
                    int(y_const.sum()), int(x_const.sum()))
    stats = Standardization(y_mean, y_sd, x_mean, x_sd, y_const, x_const)
    return stats.transform(dataset), stats
