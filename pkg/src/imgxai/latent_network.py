"""Latent distance model for one subject's weighted network.

Edges follow ``z[v, w] = eta - ||u_v - u_w|| + noise`` with Gaussian noise of
variance ``sigma2``. The posterior over ``(eta, U, sigma2)`` is explored by a
random-walk Metropolis-within-Gibbs sampler; draws are then rotated to a
common orientation and averaged into node features ``(u_hat_v, eta_hat)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .errors import ConfigError, ValidationError

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class NetworkObservation:
    edges: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.edges, dtype=float)
        if z.ndim != 2 or z.shape[0] != z.shape[1]:
            raise ValidationError(f"network must be a square matrix, got shape {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValidationError("network contains non-finite entries")
        if not np.allclose(z, z.T, rtol=0.0, atol=1e-12):
            raise ValidationError("network matrix is not symmetric")
        if np.any(np.diag(z) != 0.0):
            raise ValidationError("network matrix has non-zero diagonal (self-loops)")
        object.__setattr__(self, "edges", z)

    @property
    def V(self):
        return self.edges.shape[0]


@dataclass(frozen=True)
class LatentState:
    eta: float
    U: np.ndarray
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValidationError("sigma2 must be positive")


@dataclass(frozen=True)
class NodeFeatures:
    u_hat: np.ndarray
    eta_hat: float

    def as_matrix(self):
        """``V x (R+1)`` array of ``g_v = (u_hat_v, eta_hat)``."""
        V = self.u_hat.shape[0]
        return np.hstack([self.u_hat, np.full((V, 1), self.eta_hat)])


@dataclass
class McmcConfig:
    R: int = 3
    iterations: int = 5000
    burn_in: int = 1000
    step_eta: float = 0.1
    step_u: float = 0.1
    step_log_sigma2: float = 0.2
    prior_ig_alpha: float = 2.0
    prior_ig_beta: float = 1.0
    adapt: bool = True
    adapt_window: int = 50
    # "max_logpost" | "first" | "last"
    reference: str = "max_logpost"
    allow_reflection: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.R < 1:
            raise ConfigError("latent dimension R must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ConfigError("burn_in must satisfy 0 <= burn_in < iterations")
        if min(self.step_eta, self.step_u, self.step_log_sigma2) <= 0:
            raise ConfigError("proposal step sizes must be positive")
        if self.prior_ig_alpha <= 0 or self.prior_ig_beta <= 0:
            raise ConfigError("inverse-gamma hyperparameters must be positive")
        if self.reference not in ("max_logpost", "first", "last"):
            raise ConfigError(f"unknown alignment reference {self.reference!r}")


@dataclass
class McmcResult:
    """Post burn-in chain plus sampler diagnostics."""

    chain: List[LatentState]
    log_posterior: np.ndarray
    acceptance: dict
    step_sizes: dict = field(default_factory=dict)

    @property
    def eta(self):
        return np.array([s.eta for s in self.chain])

    def __len__(self):
        return len(self.chain)


def _log_ig(x, alpha, beta):
    from scipy.special import gammaln

    return alpha * np.log(beta) - gammaln(alpha) - (alpha + 1.0) * np.log(x) - beta / x


def _edge_loglik(resid_ss, m, sigma2):
    return -0.5 * m * (_LOG_2PI + np.log(sigma2)) - 0.5 * resid_ss / sigma2


def log_posterior(state: LatentState, net: NetworkObservation, cfg: McmcConfig) -> float:
    """Unnormalized log posterior density of a latent state."""
    if not state.sigma2 > 0:
        raise ValidationError("sigma2 must be positive")
    U = np.asarray(state.U, dtype=float)
    if U.shape[0] != net.V:
        raise ValidationError(f"U has {U.shape[0]} rows for a network with {net.V} nodes")
    iu = np.triu_indices(net.V, k=1)
    dist = pdist(U) if net.V > 1 else np.zeros(0)
    resid = net.edges[iu] - (state.eta - dist)
    lp = _edge_loglik(float(resid @ resid), resid.size, state.sigma2)
    lp += -0.5 * (_LOG_2PI + state.eta ** 2)
    lp += -0.5 * (U.size * _LOG_2PI + float(np.sum(U * U)))
    lp += _log_ig(state.sigma2, cfg.prior_ig_alpha, cfg.prior_ig_beta)
    return float(lp)


def _mds_init(z, R):
    V = z.shape[0]
    off = z[np.triu_indices(V, k=1)]
    eta0 = float(off.max())
    D = np.maximum(eta0 - z, 0.0)
    np.fill_diagonal(D, 0.0)
    J = np.eye(V) - 1.0 / V
    B = -0.5 * J @ (D ** 2) @ J
    vals, vecs = np.linalg.eigh(B)
    order = np.argsort(vals)[::-1][:R]
    U = vecs[:, order] * np.sqrt(np.maximum(vals[order], 1e-8))
    if U.shape[1] < R:
        U = np.hstack([U, np.zeros((V, R - U.shape[1]))])
    resid = off - (eta0 - pdist(U))
    s2 = max(float(np.mean(resid ** 2)), 1e-3)
    return eta0, U, s2


def mcmc_fit(net: NetworkObservation, cfg: McmcConfig, init: Optional[LatentState] = None) -> McmcResult:
    """Run the sampler and return the post burn-in chain."""
    V, R = net.V, cfg.R
    if V < 2:
        raise ValidationError("network needs at least two nodes")
    rng = np.random.default_rng(cfg.seed)
    z = net.edges
    iu = np.triu_indices(V, k=1)
    z_up = z[iu]
    m = z_up.size
    a, b = cfg.prior_ig_alpha, cfg.prior_ig_beta

    if init is None:
        eta, U, s2 = _mds_init(z, R)
    else:
        eta, U, s2 = float(init.eta), np.array(init.U, dtype=float), float(init.sigma2)
    D = squareform(pdist(U))

    def resid_ss(eta_, D_):
        r = z_up - (eta_ - D_[iu])
        return float(r @ r)

    ss = resid_ss(eta, D)
    steps = {"eta": cfg.step_eta, "u": cfg.step_u, "log_sigma2": cfg.step_log_sigma2}
    window = {k: [0, 0] for k in steps}
    total = {k: [0, 0] for k in steps}
    n_keep = cfg.iterations - cfg.burn_in
    chain, lps = [], np.empty(n_keep)
    others = [np.arange(V) != v for v in range(V)]

    for it in range(cfg.iterations):
        # eta
        prop = eta + steps["eta"] * rng.standard_normal()
        ss_prop = resid_ss(prop, D)
        log_r = (-0.5 * (ss_prop - ss) / s2) - 0.5 * (prop ** 2 - eta ** 2)
        acc = np.log(rng.random()) < log_r
        if acc:
            eta, ss = prop, ss_prop
        _tally(window, total, "eta", acc)

        # rows of U, one node at a time
        for v in range(V):
            u_new = U[v] + steps["u"] * rng.standard_normal(R)
            mask = others[v]
            d_old = D[v, mask]
            d_new = np.sqrt(np.sum((U[mask] - u_new) ** 2, axis=1))
            zv = z[v, mask]
            r_old = zv - (eta - d_old)
            r_new = zv - (eta - d_new)
            delta_ss = float(r_new @ r_new - r_old @ r_old)
            log_r = -0.5 * delta_ss / s2 - 0.5 * (u_new @ u_new - U[v] @ U[v])
            acc = np.log(rng.random()) < log_r
            if acc:
                U[v] = u_new
                D[v, mask] = d_new
                D[mask, v] = d_new
                ss += delta_ss
            _tally(window, total, "u", acc)

        # log sigma2 with Jacobian
        ls_old = np.log(s2)
        ls_new = ls_old + steps["log_sigma2"] * rng.standard_normal()
        s2_new = np.exp(ls_new)
        log_r = (
            _edge_loglik(ss, m, s2_new) + _log_ig(s2_new, a, b) + ls_new
            - _edge_loglik(ss, m, s2) - _log_ig(s2, a, b) - ls_old
        )
        acc = np.log(rng.random()) < log_r
        if acc:
            s2 = float(s2_new)
        _tally(window, total, "log_sigma2", acc)

        if cfg.adapt and it < cfg.burn_in and (it + 1) % cfg.adapt_window == 0:
            for k, (n_acc, n_try) in window.items():
                rate = n_acc / max(n_try, 1)
                if rate < 0.25:
                    steps[k] *= 0.8
                elif rate > 0.40:
                    steps[k] *= 1.25
                window[k] = [0, 0]

        if it >= cfg.burn_in:
            # recompute the sum of squares periodically to stop drift
            if (it - cfg.burn_in) % 500 == 0:
                ss = resid_ss(eta, D)
            state = LatentState(float(eta), U.copy(), float(s2))
            chain.append(state)
            lps[it - cfg.burn_in] = (
                _edge_loglik(ss, m, s2)
                - 0.5 * (_LOG_2PI + eta ** 2)
                - 0.5 * (U.size * _LOG_2PI + float(np.sum(U * U)))
                + _log_ig(s2, a, b)
            )

    acceptance = {k: n_acc / max(n_try, 1) for k, (n_acc, n_try) in total.items()}
    log.debug("mcmc acceptance %s, steps %s", acceptance, steps)
    return McmcResult(chain, lps, acceptance, dict(steps))


def _tally(window, total, key, accepted):
    window[key][1] += 1
    total[key][1] += 1
    if accepted:
        window[key][0] += 1
        total[key][0] += 1


def procrustes_rotation(X, reference, allow_reflection=True):
    """Orthogonal matrix ``Q`` minimizing ``||X Q - reference||_F``.

    Both inputs are assumed centered. Returns ``(Q, ok)`` where ``ok`` is
    False when the cross-covariance is rank deficient and the identity was
    used instead. Centered configurations of ``V`` points have rank at most
    ``V - 1``, so deficiency is judged against ``min(R, V - 1)``.
    """
    M = X.T @ reference
    u, s, vt = np.linalg.svd(M)
    tol = max(M.shape) * np.finfo(float).eps * max(s.max(initial=0.0), 1.0)
    attainable = min(X.shape[1], X.shape[0] - 1)
    if attainable < 1 or int(np.sum(s > tol)) < attainable:
        return np.eye(X.shape[1]), False
    Q = u @ vt
    if not allow_reflection and np.linalg.det(Q) < 0:
        u[:, -1] *= -1.0
        Q = u @ vt
    return Q, True


def procrustes_align(chain, reference, allow_reflection=True):
    """Center each draw and rotate it onto the centered reference.

    Returns ``(aligned_chain, flags)``; ``flags[k]`` is True where draw ``k``
    fell back to the identity rotation.
    """
    ref = np.asarray(reference, dtype=float)
    ref = ref - ref.mean(axis=0)
    aligned, flags = [], []
    for state in chain:
        U = np.asarray(state.U, dtype=float)
        if U.shape != ref.shape:
            raise ValidationError(f"draw has shape {U.shape}, reference has {ref.shape}")
        Uc = U - U.mean(axis=0)
        Q, ok = procrustes_rotation(Uc, ref, allow_reflection)
        if not ok:
            log.debug("rank-deficient cross-covariance; identity rotation used")
        aligned.append(LatentState(state.eta, Uc @ Q, state.sigma2))
        flags.append(not ok)
    return aligned, np.array(flags, dtype=bool)


def select_reference(result: McmcResult, how="max_logpost"):
    if how == "first":
        return result.chain[0].U
    if how == "last":
        return result.chain[-1].U
    return result.chain[int(np.argmax(result.log_posterior))].U


def extract_features(aligned_chain, eta_chain=None) -> NodeFeatures:
    """Posterior means of the aligned positions and of ``eta``."""
    if len(aligned_chain) == 0:
        raise ValidationError("cannot extract features from an empty chain")
    U = np.mean([np.asarray(s.U) - np.asarray(s.U).mean(axis=0) for s in aligned_chain], axis=0)
    etas = [s.eta for s in aligned_chain] if eta_chain is None else list(eta_chain)
    if len(etas) == 0:
        raise ValidationError("empty eta chain")
    return NodeFeatures(U, float(np.mean(etas)))


def embed_network(net: NetworkObservation, cfg: McmcConfig):
    """Full stage-one pipeline for one subject: sample, align, average."""
    result = mcmc_fit(net, cfg)
    ref = select_reference(result, cfg.reference)
    aligned, flags = procrustes_align(result.chain, ref, cfg.allow_reflection)
    if flags.any():
        log.warning("%d of %d draws kept their orientation (rank-deficient alignment)", int(flags.sum()), flags.size)
    return extract_features(aligned), result, flags


def simulate_network(eta, U, sigma2, seed) -> NetworkObservation:
    """Draw one network from the latent distance model."""
    if sigma2 < 0:
        raise ValidationError("sigma2 must be non-negative")
    U = np.asarray(U, dtype=float)
    V = U.shape[0]
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(V, k=1)
    mean = eta - pdist(U)
    vals = mean + np.sqrt(sigma2) * rng.standard_normal(mean.size)
    z = np.zeros((V, V))
    z[iu] = vals
    z = z + z.T
    return NetworkObservation(z)


def distance_correlation(U_a, U_b):
    """Pearson correlation of the two configurations' pairwise distances.

    NaN when there are fewer than two pairs or a distance set is constant.
    """
    a, b = pdist(U_a), pdist(U_b)
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])
