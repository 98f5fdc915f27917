"""Additive varying-coefficient network regression with MC-dropout inference.

The mean outcome at ROI ``j`` (location ``s_j``, node ``v``) of subject ``i``
is ``beta0 + sum_q x_iq(s_j) * beta_q(s_j) + h(g_iv)`` where every
``beta_q`` and ``h`` is a small dropout MLP. Training minimizes the squared
error scaled by ``1/tau2`` plus per-layer L2 penalties ``keep_l / (2N)``,
with a fresh weight-level dropout mask at every SGD step. Posterior draws
are obtained by re-sampling masks on the trained parameters.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import nnet
from .data import SpatialDataset, Standardization, standardize
from .errors import ConfigError, NumericError, ValidationError

log = logging.getLogger(__name__)

# spawn keys of the per-purpose random streams derived from the model seed
TRAIN_STREAM, DRAW_STREAM, PREDICT_STREAM = 1, 2, 3


@dataclass
class XaiConfig:
    beta_hidden: tuple = (64, 64)
    h_hidden: tuple = (64, 64)
    activation: str = "relu"
    # keep (inclusion) probability, scalar or one value per layer
    keep: object = 0.9
    learning_rate: float = 0.01
    # learning rate decays geometrically to learning_rate * lr_final_ratio
    lr_final_ratio: float = 1.0
    epochs: int = 200
    batch_size: int = 64
    n_draws: int = 200
    prior_sigma2: float = 1e-4
    tau2_init: float = 1.0
    profile_tau2: bool = True
    use_network: bool = True
    # "roi": per-ROI outcome SD; "pooled": one outcome SD shared by all ROIs
    standardize: str = "roi"
    seed: int = 0

    def __post_init__(self):
        self.beta_hidden = tuple(int(k) for k in self.beta_hidden)
        self.h_hidden = tuple(int(k) for k in self.h_hidden)
        if isinstance(self.keep, (list, tuple)):
            self.keep = tuple(float(k) for k in self.keep)
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("learning_rate > 0, epochs >= 0 and batch_size >= 1 are required")
        if not 0 < self.lr_final_ratio <= 1:
            raise ConfigError("lr_final_ratio must lie in (0, 1]")
        if self.n_draws < 2:
            raise ConfigError("at least two MC-dropout draws (n_draws >= 2) are needed")
        if self.prior_sigma2 <= 0 or self.tau2_init <= 0:
            raise ConfigError("prior_sigma2 and tau2_init must be positive")
        if self.standardize not in ("roi", "pooled"):
            raise ConfigError("standardize must be 'roi' or 'pooled'")

    def beta_spec(self, d):
        return nnet.build_spec(d, self.beta_hidden, self.activation, self.keep)

    def h_spec(self, width_in):
        return nnet.build_spec(width_in, self.h_hidden, self.activation, self.keep)

    def to_dict(self):
        out = asdict(self)
        out["beta_hidden"] = list(self.beta_hidden)
        out["h_hidden"] = list(self.h_hidden)
        if isinstance(self.keep, tuple):
            out["keep"] = list(self.keep)
        return out

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown xai config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainedModel:
    beta_nets: tuple
    h_net: Optional[nnet.MLPParams]
    beta0: float
    standardization: Standardization
    coord_center: np.ndarray
    coord_scale: np.ndarray
    g_center: Optional[np.ndarray]
    g_scale: Optional[np.ndarray]
    config: XaiConfig
    n_train: int = 0
    tau2_hat: float = float("nan")
    loss_trace: list = field(default_factory=list)
    mse_trace: list = field(default_factory=list)

    @property
    def Q(self):
        return len(self.beta_nets)

    @property
    def uses_network(self):
        return self.h_net is not None

    def scale_coords(self, coords):
        return (np.asarray(coords, dtype=float) - self.coord_center) / self.coord_scale

    def scale_features(self, g):
        return (np.asarray(g, dtype=float) - self.g_center) / self.g_scale


@dataclass
class ModelMasks:
    beta: tuple
    h: Optional[nnet.DropoutMask]


@dataclass
class PosteriorDraws:
    """MC-dropout draws on the standardized scale.

    ``beta`` is ``F x Q x J``, ``h`` is ``F x n x V`` and ``tau2`` has ``F``
    entries. ``seed`` regenerates the masks of every draw, so further
    subjects can be evaluated under the same parameter draws.
    """

    beta: np.ndarray
    h: np.ndarray
    tau2: np.ndarray
    seed: int
    fit_var: Optional[np.ndarray] = None

    @property
    def F(self):
        return self.beta.shape[0]


def penalty_weights(spec: Sequence[nnet.LayerSpec], N):
    """``lambda_l = keep_l / (2N)`` for every layer of a network."""
    return np.array([layer.dropout_keep for layer in spec]) / (2.0 * N)


def _all_nets(model):
    nets = list(model.beta_nets)
    if model.h_net is not None:
        nets.append(model.h_net)
    return nets


def sample_model_masks(model: TrainedModel, rng) -> ModelMasks:
    beta = tuple(nnet.sample_dropout_mask(p.spec, rng) for p in model.beta_nets)
    h = None if model.h_net is None else nnet.sample_dropout_mask(model.h_net.spec, rng)
    return ModelMasks(beta, h)


def draw_rng(seed, f):
    """Generator of MC-dropout draw ``f`` (counter-based, order independent)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(DRAW_STREAM, f)))


def draw_masks(model: TrainedModel, seed, f) -> ModelMasks:
    return sample_model_masks(model, draw_rng(seed, f))


def _mean_components(model, X, S_in, G_in, masks: Optional[ModelMasks]):
    """Per-row beta values (rows x Q) and h values (rows) on scaled inputs."""
    bmasks = (None,) * model.Q if masks is None else masks.beta
    B = np.column_stack([nnet.forward_batch(p, S_in, m) for p, m in zip(model.beta_nets, bmasks)])
    if model.h_net is None:
        h = np.zeros(S_in.shape[0])
    else:
        h = nnet.forward_batch(model.h_net, G_in, None if masks is None else masks.h)
    return B, h


def model_mean(model: TrainedModel, x, s, g=None, masks: Optional[ModelMasks] = None) -> float:
    """Mean outcome (standardized scale) for one subject-ROI pair.

    ``x`` are standardized predictors (length Q), ``s`` the ROI's raw
    coordinates and ``g`` the raw node features of the subject's node.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != model.Q:
        raise ValidationError(f"expected {model.Q} predictors, got {x.size}")
    S_in = model.scale_coords(np.asarray(s, dtype=float).reshape(1, -1))
    G_in = None
    if model.h_net is not None:
        if g is None:
            raise ValidationError("node features are required by this model")
        G_in = model.scale_features(np.asarray(g, dtype=float).reshape(1, -1))
        if G_in.shape[1] != model.h_net.spec[0].width_in:
            raise ValidationError(f"expected {model.h_net.spec[0].width_in} node features, got {G_in.shape[1]}")
    B, h = _mean_components(model, x[None, :], S_in, G_in, masks)
    return float(model.beta0 + B[0] @ x + h[0])


def predict_mean(model: TrainedModel, X, S_in, G_in, masks=None):
    """Vectorized ``model_mean`` over rows of already-scaled inputs."""
    B, h = _mean_components(model, X, S_in, G_in, masks)
    return model.beta0 + np.sum(X * B, axis=1) + h


def _penalty(model, N):
    total = 0.0
    for p in _all_nets(model):
        lam = penalty_weights(p.spec, N)
        sw, sb = nnet.l2_norms(p)
        total += float(lam @ sw + lam @ sb)
    return total


def loss(model: TrainedModel, X, S_in, G_in, Y, tau2, masks=None, N=None):
    """Regularized squared-error objective on a batch of rows.

    The residual sum is rescaled by ``N / batch`` so a mini-batch gives an
    unbiased estimate of the full-data objective.
    """
    if not tau2 > 0:
        raise ValidationError("tau2 must be positive")
    Y = np.asarray(Y, dtype=float)
    B = Y.size
    N = B if N is None else N
    r = Y - predict_mean(model, X, S_in, G_in, masks)
    return float((N / B) * (r @ r) / (2.0 * N * tau2) + _penalty(model, N))


def _bernoulli_entropy(p):
    p = float(p)
    if p in (0.0, 1.0):
        return 0.0
    return -(p * np.log(p) + (1 - p) * np.log(1 - p))


def kl_approximation(model: TrainedModel):
    """Approximate KL(q || p) between the dropout posterior and N(0, 1) priors.

    ``sum_l keep_l / 2 * ||theta_l||^2`` plus a term that depends only on
    the layer sizes, the keep probabilities and ``prior_sigma2``.
    """
    s2 = model.config.prior_sigma2
    total = 0.0
    for p in _all_nets(model):
        sw, sb = nnet.l2_norms(p)
        for l, layer in enumerate(p.spec):
            k = layer.dropout_keep
            size = p.weights[l].size + p.biases[l].size
            total += 0.5 * k * (sw[l] + sb[l])
            total += size * (0.5 * (s2 - 1.0 - np.log(s2)) - _bernoulli_entropy(k))
    return total


def gp_mc_objective(model: TrainedModel, X, S_in, G_in, Y, tau2, masks=None, N=None):
    """Single-sample Monte Carlo estimate of the deep-GP evidence lower bound."""
    Y = np.asarray(Y, dtype=float)
    B = Y.size
    N = B if N is None else N
    r = Y - predict_mean(model, X, S_in, G_in, masks)
    loglik = -0.5 * B * np.log(2 * np.pi * tau2) - 0.5 * (r @ r) / tau2
    return float((N / B) * loglik - kl_approximation(model))


@dataclass
class _Flat:
    """Training rows flattened over (subject, ROI)."""

    i: np.ndarray
    j: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    S_in: np.ndarray
    G_in: Optional[np.ndarray]
    node_of: np.ndarray

    def rows(self, idx):
        i, j = self.i[idx], self.j[idx]
        G = None if self.G_in is None else self.G_in[i, self.node_of[j]]
        return self.X[i, j], self.S_in[j], G, self.Y[i, j]


def _input_scaling(coords, G):
    c_center = coords.mean(axis=0)
    c_scale = coords.std(axis=0)
    c_scale = np.where(c_scale > 0, c_scale, 1.0)
    if G is None:
        return c_center, c_scale, None, None
    flat = G.reshape(-1, G.shape[-1])
    g_center = flat.mean(axis=0)
    g_scale = flat.std(axis=0)
    g_scale = np.where(g_scale > 0, g_scale, 1.0)
    return c_center, c_scale, g_center, g_scale


def _check_features(features, ds):
    if features is None:
        return None
    G = np.asarray(features, dtype=float)
    if G.ndim != 3 or G.shape[:2] != (ds.n, ds.V):
        raise ValidationError(f"features must be n x V x (R+1) = ({ds.n}, {ds.V}, .), got {G.shape}")
    if not np.all(np.isfinite(G)):
        raise ValidationError("missing or non-finite node features")
    return G


def train(dataset: SpatialDataset, features, config: XaiConfig, stats: Optional[Standardization] = None,
          init: Optional[TrainedModel] = None) -> TrainedModel:
    """Fit the networks by mini-batch SGD on an already standardized dataset.

    ``features`` is ``n x V x (R+1)`` (ignored when ``config.use_network``
    is False). ``stats`` is stored on the returned model for
    back-transformation.
    """
    ds = dataset
    if ds.Y is None:
        raise ValidationError("training data must carry outcomes")
    G = _check_features(features, ds) if config.use_network else None
    if config.use_network and G is None:
        raise ValidationError("node features are required when use_network is True")

    c_center, c_scale, g_center, g_scale = _input_scaling(ds.coords, G)
    S_in = (ds.coords - c_center) / c_scale
    G_in = None if G is None else (G - g_center) / g_scale

    n, J = ds.n, ds.J
    N = n * J
    ii, jj = np.divmod(np.arange(N), J)
    flat = _Flat(ii, jj, ds.X, ds.Y, S_in, G_in, ds.node_of)

    ss = np.random.SeedSequence(config.seed, spawn_key=(TRAIN_STREAM,))
    init_seeds = ss.spawn(ds.Q + 1)
    rng = np.random.default_rng(ss.spawn(1)[0])
    if stats is None:
        stats = Standardization(
            np.zeros(J), np.ones(J), np.zeros((J, ds.Q)), np.ones((J, ds.Q)),
            np.zeros(J, bool), np.zeros((J, ds.Q), bool),
        )
    if init is not None:
        beta_nets, h_net = tuple(init.beta_nets), init.h_net
    else:
        beta_nets = tuple(nnet.init_mlp(config.beta_spec(ds.d), init_seeds[q]) for q in range(ds.Q))
        h_net = nnet.init_mlp(config.h_spec(G.shape[-1]), init_seeds[-1]) if G is not None else None
    model = TrainedModel(
        beta_nets, h_net, float(ds.Y.mean()), stats, c_center, c_scale, g_center, g_scale,
        config, n_train=n,
    )

    lam_beta = [penalty_weights(p.spec, N) for p in beta_nets]
    lam_h = None if h_net is None else penalty_weights(h_net.spec, N)
    tau2 = config.tau2_init
    bs = min(config.batch_size, N)
    n_batches = int(np.ceil(N / bs))
    decay = config.lr_final_ratio ** (1.0 / max(config.epochs - 1, 1))
    lr = config.learning_rate
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        perm = rng.permutation(N)
        sse = 0.0
        for b in range(n_batches):
            idx = perm[b * bs:(b + 1) * bs]
            X, S, Gb, Y = flat.rows(idx)
            masks = sample_model_masks(model, rng)
            outs, caches = [], []
            for p, m in zip(model.beta_nets, masks.beta):
                o, c = nnet.forward_batch(p, S, m, return_cache=True)
                outs.append(o)
                caches.append(c)
            pred = model.beta0 + np.sum(X * np.column_stack(outs), axis=1)
            if model.h_net is not None:
                h, cache_h = nnet.forward_batch(model.h_net, Gb, masks.h, return_cache=True)
                pred = pred + h
            r = Y - pred
            batch_sse = float(r @ r)
            if not np.isfinite(batch_sse):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}", epoch=epoch, batch=b)
            sse += batch_sse
            dpred = -r / (len(idx) * tau2)
            new_beta = []
            for q, (p, c, m) in enumerate(zip(model.beta_nets, caches, masks.beta)):
                gq = nnet.backward(c, X[:, q] * dpred, m)
                new_beta.append(nnet.sgd_step(p, gq, lr, lam_beta[q], lam_beta[q]))
            model.beta_nets = tuple(new_beta)
            if model.h_net is not None:
                gh = nnet.backward(cache_h, dpred, masks.h)
                model.h_net = nnet.sgd_step(model.h_net, gh, lr, lam_h, lam_h)
        mse = sse / N
        model.mse_trace.append(mse)
        model.loss_trace.append(mse / (2.0 * tau2) + _penalty(model, N))
        if config.profile_tau2:
            tau2 = max(mse, 1e-12)
        lr *= decay
        log.debug("epoch %d mse %.5f tau2 %.5f lr %.2e", epoch, mse, tau2, lr)
    model.tau2_hat = float(tau2)
    log.info("trained %d epochs on %d rows in %.1fs", config.epochs, N, time.perf_counter() - t0)
    return model


def fit_xai(dataset: SpatialDataset, features, config: XaiConfig, train_index=None):
    """Standardize on ``train_index``, then train on those subjects.

    Returns ``(model, standardized_dataset)`` where the dataset covers every
    subject of the input.
    """
    train_index = np.arange(dataset.n) if train_index is None else np.asarray(train_index, dtype=int)
    ds_std, stats = standardize(dataset, train_index, config.standardize)
    G = None if features is None else np.asarray(features, dtype=float)[train_index]
    model = train(ds_std.subset(train_index), G, config, stats)
    return model, ds_std


def _scaled_inputs(model, ds: SpatialDataset, features):
    S_in = model.scale_coords(ds.coords)
    G_in = None
    if model.h_net is not None:
        G = _check_features(features, ds)
        if G is None:
            raise ValidationError("node features are required by this model")
        G_in = model.scale_features(G)
    return S_in, G_in


def eval_draw(model: TrainedModel, masks: ModelMasks, S_in, G_in):
    """beta values (Q x J) and h values (n x V) under one set of masks."""
    beta = np.vstack([nnet.forward_batch(p, S_in, m) for p, m in zip(model.beta_nets, masks.beta)])
    if model.h_net is None or G_in is None:
        h = None
    else:
        n, V, k = G_in.shape
        h = nnet.forward_batch(model.h_net, G_in.reshape(n * V, k), masks.h).reshape(n, V)
    return beta, h


def compose_mean(model, beta, h, X, node_of):
    """``beta0 + x^T beta(s) + h(g)`` for every subject and ROI (n x J)."""
    mean = model.beta0 + np.einsum("ijq,qj->ij", X, beta)
    if h is not None:
        mean = mean + h[:, node_of]
    return mean


def mc_dropout_draws(model: TrainedModel, dataset: SpatialDataset, features, n_draws=None,
                     train_index=None, seed=None) -> PosteriorDraws:
    """Re-sample dropout masks on the trained parameters ``F`` times.

    ``dataset`` is on the standardized scale. ``tau2`` of each draw is the
    mean squared residual over the ``train_index`` subjects under that
    draw's masks. ``h`` draws are returned for every subject in
    ``dataset``.
    """
    F = model.config.n_draws if n_draws is None else int(n_draws)
    if F < 2:
        raise ValidationError("need at least two draws")
    seed = model.config.seed if seed is None else seed
    ds = dataset
    S_in, G_in = _scaled_inputs(model, ds, features)
    train_index = np.arange(ds.n) if train_index is None else np.asarray(train_index, dtype=int)
    if ds.Y is None:
        raise ValidationError("outcomes are needed to draw tau2")
    Xtr, Ytr = ds.X[train_index], ds.Y[train_index]
    beta = np.empty((F, model.Q, ds.J))
    h = np.zeros((F, ds.n, ds.V))
    tau2 = np.empty(F)
    fit_var = np.empty(F)
    for f in range(F):
        masks = draw_masks(model, seed, f)
        b, hf = eval_draw(model, masks, S_in, G_in)
        beta[f] = b
        if hf is not None:
            h[f] = hf
        mean = compose_mean(model, b, None if hf is None else hf[train_index], Xtr, ds.node_of)
        r = Ytr - mean
        tau2[f] = float(np.mean(r * r))
        fit_var[f] = float(np.var(mean))
    return PosteriorDraws(beta, h, tau2, int(seed), fit_var)


def draw_h(model: TrainedModel, draws: PosteriorDraws, features):
    """``h`` under each stored draw's masks for new node features (F x n x V)."""
    if model.h_net is None:
        G = np.asarray(features) if features is not None else None
        n, V = (0, 0) if G is None else G.shape[:2]
        return np.zeros((draws.F, n, V))
    G_in = model.scale_features(features)
    n, V, k = G_in.shape
    out = np.empty((draws.F, n, V))
    for f in range(draws.F):
        masks = draw_masks(model, draws.seed, f)
        out[f] = nnet.forward_batch(model.h_net, G_in.reshape(n * V, k), masks.h).reshape(n, V)
    return out


def predictive_means(model: TrainedModel, draws: PosteriorDraws, X_std, h_draws, node_of):
    """Per-draw mean surfaces, ``F x n x J`` (standardized scale)."""
    F = draws.F
    n, J, _ = X_std.shape
    out = np.empty((F, n, J))
    for f in range(F):
        out[f] = compose_mean(model, draws.beta[f], None if model.h_net is None else h_draws[f], X_std, node_of)
    return out


@dataclass
class Prediction:
    """Composition-sampled predictive draws for new subjects.

    ``means_std`` and ``samples_std`` are ``F x n x J`` on the standardized
    scale; ``samples`` is on the original outcome scale.
    """

    means_std: np.ndarray
    samples_std: np.ndarray
    samples: np.ndarray
    point: np.ndarray

    def interval(self, level=0.95, original=True):
        a = (1 - level) / 2
        s = self.samples if original else self.samples_std
        return np.quantile(s, a, axis=0), np.quantile(s, 1 - a, axis=0)


def posterior_predictive(model: TrainedModel, draws: PosteriorDraws, X, node_of, features=None,
                         networks=None, mcmc_config=None, seed=None) -> Prediction:
    """Composition sampling of outcomes for new subjects.

    ``X`` is raw (``n* x J x Q``). Node features are either given directly
    (``n* x V x (R+1)``) or computed from raw networks with the stage-one
    sampler when ``networks`` is supplied.
    """
    if model.h_net is not None and features is None:
        if networks is None:
            raise ValidationError("new subjects need node features or raw networks")
        from .latent_network import McmcConfig, embed_network

        cfg = mcmc_config or McmcConfig()
        features = np.stack([embed_network(net, cfg)[0].as_matrix() for net in networks])
    st = model.standardization
    X_std = st.transform_X(X)
    node_of = np.asarray(node_of, dtype=int)
    if model.h_net is not None:
        G = np.asarray(features, dtype=float)
        if G.shape[0] != X_std.shape[0] or G.shape[1] != node_of.max() + 1:
            raise ValidationError("features do not cover every subject and node")
        if not np.all(np.isfinite(G)):
            raise ValidationError("missing node features")
        h = draw_h(model, draws, G)
    else:
        h = None
    means = predictive_means(model, draws, X_std, h, node_of)
    seed = model.config.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(PREDICT_STREAM,)))
    noise = rng.standard_normal(means.shape) * np.sqrt(draws.tau2)[:, None, None]
    samples_std = means + noise
    point = st.inverse_Y(means.mean(axis=0))
    return Prediction(means, samples_std, st.inverse_Y(samples_std), point)


@dataclass
class BetaRefinement:
    """Normal approximation to the posterior of each ``beta_q(s_j)``."""

    mean: np.ndarray
    var: np.ndarray
    degenerate: np.ndarray

    @property
    def sd(self):
        return np.sqrt(self.var)

    def interval(self, level=0.95):
        from scipy.stats import norm

        z = norm.ppf(0.5 + level / 2)
        return self.mean - z * self.sd, self.mean + z * self.sd

    def sample(self, size, seed=None):
        rng = np.random.default_rng(seed)
        return self.mean + self.sd * rng.standard_normal((size,) + self.mean.shape)


def beta_normal_refine(draws) -> BetaRefinement:
    """Fit a normal with the draws' mean and unbiased variance, pointwise."""
    beta = draws.beta if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    if beta.shape[0] < 2:
        raise ValidationError("need at least two draws")
    # identical draws are detected exactly; their floating-point variance
    # can be a few ulps above zero
    degenerate = np.all(beta == beta[0], axis=0)
    mean = np.where(degenerate, beta[0], beta.mean(axis=0))
    var = beta.var(axis=0, ddof=1)
    if degenerate.any():
        log.info("%d beta locations have zero posterior variance", int(degenerate.sum()))
    return BetaRefinement(mean, np.where(degenerate, 0.0, var), degenerate)


def infer_h(draws, level=0.95):
    """Pointwise posterior summaries of ``h`` draws (``F x ...``)."""
    h = draws.h if isinstance(draws, PosteriorDraws) else np.asarray(draws, dtype=float)
    if h.shape[0] < 2:
        raise ValidationError("need at least two draws")
    a = (1 - level) / 2
    return {
        "mean": h.mean(axis=0),
        "sd": h.std(axis=0, ddof=1),
        "lower": np.quantile(h, a, axis=0),
        "upper": np.quantile(h, 1 - a, axis=0),
    }


def beta_original_scale(model: TrainedModel, beta_std):
    """Coefficients per unit of the raw predictor and raw outcome."""
    return model.standardization.beta_to_original(beta_std)


def h_original_scale(model: TrainedModel, h_std, beta_orig, node_of):
    """Non-predictor part of the fitted mean on the raw outcome scale, per (subject, node).

    At ROI ``j`` this is ``ybar_j + sd_j * (beta0 + h) - xbar_j^T beta_j``;
    ROIs of a node are averaged.
    """
    st = model.standardization
    node_of = np.asarray(node_of, dtype=int)
    offset = st.y_mean + st.y_sd * model.beta0 - np.sum(st.x_mean * np.asarray(beta_orig).T, axis=1)
    per_roi = offset[None, :] + st.y_sd[None, :] * np.asarray(h_std)[:, node_of]
    V = node_of.max() + 1
    counts = np.bincount(node_of, minlength=V)
    out = np.zeros((per_roi.shape[0], V))
    for v in range(V):
        out[:, v] = per_roi[:, node_of == v].sum(axis=1) / counts[v]
    return out
