"""Synthetic image-on-image regression data.

Coefficient surfaces ``beta_q(s)`` and the network effect ``h(g)`` are drawn
from zero-mean Gaussian processes with exponential covariance
``var * exp(-||a - b|| / scale)``. Outcomes are assembled additively:
``y = x^T beta(s) + h(g) + N(0, tau2)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist

from .data import SpatialDataset
from .errors import ConfigError, NumericError, ValidationError
from .latent_network import simulate_network

MAX_CHOLESKY_BLOCK = 5000
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class GpSpec:
    """Exponential kernel parameters. ``variance == 0`` means an exact zero surface."""

    variance: float
    scale: float

    def __post_init__(self):
        if not self.variance >= 0 or not self.scale > 0:
            raise ConfigError(f"invalid GP parameters {self}")


@dataclass(frozen=True)
class ScenarioSpec:
    label: str
    J: int
    beta_gp: tuple
    h_gp: GpSpec
    n: int = 300
    n_train: int = 180
    n_val: int = 60
    n_test: int = 60
    V: int = 30
    Q: int = 2
    d: int = 3
    R: int = 1
    tau2: float = 4.0
    domain: float = 2.0
    seed: int = 0
    # simulate raw networks from the latent distance model instead of
    # drawing g directly
    end_to_end: bool = False
    network_sigma2: float = 0.1

    def __post_init__(self):
        if self.J % self.V:
            raise ConfigError(f"J={self.J} is not divisible by V={self.V}")
        if self.n_train + self.n_val + self.n_test != self.n:
            raise ConfigError("train/val/test sizes must add up to n")
        if len(self.beta_gp) != self.Q:
            raise ConfigError(f"need {self.Q} beta GP specs, got {len(self.beta_gp)}")
        if self.d not in (2, 3):
            raise ConfigError("coordinates must be 2- or 3-dimensional")
        if self.tau2 < 0:
            raise ConfigError("tau2 must be non-negative")

    def with_overrides(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        out = asdict(self)
        out["beta_gp"] = [asdict(g) for g in self.beta_gp]
        out["h_gp"] = asdict(self.h_gp)
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["beta_gp"] = tuple(GpSpec(**g) for g in d["beta_gp"])
        d["h_gp"] = GpSpec(**d["h_gp"])
        return cls(**d)


@dataclass
class SyntheticTruth:
    spec: ScenarioSpec
    dataset: SpatialDataset
    beta: np.ndarray          # Q x J
    h: np.ndarray             # n x V
    g: np.ndarray             # n x V x (R+1)
    splits: dict
    networks: Optional[list] = None
    latent: Optional[dict] = field(default=None, repr=False)

    def signal(self):
        """Noise-free mean surface ``x^T beta + h``, shape ``n x J``."""
        ds = self.dataset
        xb = np.einsum("ijq,qj->ij", ds.X, self.beta)
        return xb + self.h[:, ds.node_of]


def exp_cov(points, spec: GpSpec, other=None):
    """Exponential covariance matrix between rows of ``points`` (and ``other``)."""
    a = np.atleast_2d(np.asarray(points, dtype=float))
    b = a if other is None else np.atleast_2d(np.asarray(other, dtype=float))
    if a.size == 0:
        raise ValidationError("no points given")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValidationError("non-finite coordinates")
    return spec.variance * np.exp(-cdist(a, b) / spec.scale)


def _cholesky(A):
    scale = max(float(np.mean(np.diag(A))), np.finfo(float).tiny)
    eye = np.eye(A.shape[0])
    for jit in _JITTERS:
        try:
            return np.linalg.cholesky(A + jit * scale * eye)
        except np.linalg.LinAlgError:
            continue
    raise NumericError("Cholesky failed even with 1e-6 relative jitter")


def cholesky_factor(cov, max_block=MAX_CHOLESKY_BLOCK):
    """Lower Cholesky factor, blockwise when the matrix is large.

    The blocked factorization conditions each block on all previous ones,
    so it reproduces the full factor exactly (up to per-block jitter).
    """
    cov = np.asarray(cov, dtype=float)
    m = cov.shape[0]
    if m <= max_block:
        return _cholesky(cov)
    L = np.zeros_like(cov)
    for a in range(0, m, max_block):
        e = min(a + max_block, m)
        Lp = L[a:e, :a]
        L[a:e, a:e] = _cholesky(cov[a:e, a:e] - Lp @ Lp.T)
        if e < m:
            rest = cov[e:, a:e] - L[e:, :a] @ Lp.T
            L[e:, a:e] = solve_triangular(L[a:e, a:e], rest.T, lower=True).T
    return L


def gp_draw(cov, seed, max_block=MAX_CHOLESKY_BLOCK):
    """Zero-mean Gaussian vector with covariance ``cov``."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValidationError("covariance must be square")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal(cov.shape[0])
    if not np.any(cov):
        return np.zeros(cov.shape[0])
    return cholesky_factor(cov, max_block) @ z


def gp_draw_many(cov, size, seed):
    """``size`` independent draws as rows of a matrix."""
    rng = np.random.default_rng(seed)
    L = cholesky_factor(cov)
    return rng.standard_normal((size, cov.shape[0])) @ L.T


def _surface(points, spec, rng, max_block=MAX_CHOLESKY_BLOCK):
    if spec.variance == 0:
        return np.zeros(len(points))
    return gp_draw(exp_cov(points, spec), rng, max_block)


def generate_scenario(spec: ScenarioSpec, max_block=MAX_CHOLESKY_BLOCK) -> SyntheticTruth:
    """Draw one synthetic dataset; a pure function of ``spec``."""
    ss = np.random.SeedSequence(spec.seed)
    r_coord, r_x, r_beta, r_g, r_h, r_eps, r_net = (np.random.default_rng(s) for s in ss.spawn(7))
    n, V, J, Q, d = spec.n, spec.V, spec.J, spec.Q, spec.d

    coords = r_coord.uniform(0.0, spec.domain, size=(J, d))
    node_of = np.repeat(np.arange(V), J // V)
    x = r_x.standard_normal((n, Q))
    X = np.repeat(x[:, None, :], J, axis=1)
    beta = np.vstack([_surface(coords, g, r_beta, max_block) for g in spec.beta_gp])

    networks, latent = None, None
    if spec.end_to_end:
        U = r_g.standard_normal((n, V, spec.R))
        eta = r_g.standard_normal(n)
        g = np.concatenate([U - U.mean(axis=1, keepdims=True), np.repeat(eta[:, None, None], V, axis=1)], axis=2)
        net_seeds = r_net.integers(0, 2**63 - 1, size=n)
        networks = [simulate_network(eta[i], U[i], spec.network_sigma2, int(net_seeds[i])) for i in range(n)]
        latent = {"U": U, "eta": eta}
    else:
        g = r_g.standard_normal((n, V, spec.R + 1))

    h = _surface(g.reshape(n * V, -1), spec.h_gp, r_h, max_block).reshape(n, V)
    xb = np.einsum("ijq,qj->ij", X, beta)
    Y = xb + h[:, node_of] + np.sqrt(spec.tau2) * r_eps.standard_normal((n, J))

    idx = np.arange(n)
    splits = {
        "train": idx[: spec.n_train],
        "val": idx[spec.n_train: spec.n_train + spec.n_val],
        "test": idx[spec.n_train + spec.n_val:],
    }
    ds = SpatialDataset(coords, node_of, X, Y)
    return SyntheticTruth(spec, ds, beta, h, g, splits, networks, latent)


def empirical_snr(truth: SyntheticTruth, denominator="outcome"):
    """Signal-to-noise ratio of one synthetic draw.

    ``denominator="outcome"`` gives ``Var(signal) / Var(y)``, the share of
    outcome variance explained by the signal. ``"noise"`` gives
    ``Var(signal) / tau2``.
    """
    var_sig = float(np.var(truth.signal()))
    if denominator == "outcome":
        return var_sig / float(np.var(truth.dataset.Y))
    if denominator == "noise":
        if truth.spec.tau2 == 0:
            raise ValidationError("tau2 is zero; the ratio is undefined")
        return var_sig / truth.spec.tau2
    raise ValidationError(f"unknown denominator {denominator!r}")


_BASE_SCALES = (5.0, 4.0, 6.0)


def _case(label, J, variances, scales=_BASE_SCALES, **kw):
    return ScenarioSpec(
        label=label,
        J=J,
        beta_gp=(GpSpec(variances[0], scales[0]), GpSpec(variances[1], scales[1])),
        h_gp=GpSpec(variances[2], scales[2]),
        **kw,
    )


def scenario_catalog():
    """Named simulation cases with default settings filled in."""
    cases = [
        _case("case1", 150, (2.0, 1.0, 2.5)),
        _case("case2", 300, (2.0, 1.0, 2.5)),
        _case("case3", 600, (2.0, 1.0, 2.5)),
        _case("case4", 1200, (2.0, 1.0, 2.5)),
        _case("case5", 600, (2.0, 1.0, 1.0)),
        _case("case6", 600, (4.0, 3.0, 3.0)),
        _case("case7", 600, (5.0, 6.0, 5.0)),
    ]
    # correlation-scale variants around the case-1 settings
    for tag, factor in (("short", 0.2), ("medium", 0.5), ("long", 2.0)):
        scales = tuple(s * factor for s in _BASE_SCALES)
        cases.append(_case(f"case1-scale-{tag}", 150, (2.0, 1.0, 2.5), scales))
    cases.append(_case("noise", 150, (0.0, 0.0, 0.0)))
    return cases


def get_scenario(label, **overrides) -> ScenarioSpec:
    for spec in scenario_catalog():
        if spec.label == label:
            return spec.with_overrides(**overrides) if overrides else spec
    raise ConfigError(f"unknown case {label!r}; choose from {[s.label for s in scenario_catalog()]}")
