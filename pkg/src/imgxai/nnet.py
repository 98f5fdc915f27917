"""Small feed-forward network engine built on numpy.

Networks here are plain stacks of dense layers. Parameters are immutable
values (``MLPParams``); every operation returns new arrays so the same
parameters can be shared between threads. Dropout is applied to individual
weights and biases through a ``DropoutMask`` rather than to whole units.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ValidationError

ACTIVATIONS = ("relu", "tanh", "identity")


@dataclass(frozen=True)
class LayerSpec:
    width_in: int
    width_out: int
    activation: str = "relu"
    dropout_keep: float = 1.0

    def __post_init__(self):
        if self.width_in < 1 or self.width_out < 1:
            raise ConfigError(f"layer widths must be >= 1, got {self.width_in}->{self.width_out}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_keep <= 1.0:
            raise ConfigError(f"dropout_keep must lie in [0, 1], got {self.dropout_keep}")


@dataclass(frozen=True)
class MLPParams:
    """Weights (``k_out x k_in``) and biases (``k_out``) for every layer."""

    weights: tuple
    biases: tuple
    spec: tuple

    @property
    def n_layers(self):
        return len(self.spec)

    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def masked(self, mask: Optional["DropoutMask"]) -> "MLPParams":
        """Parameters with dropped entries set to zero."""
        if mask is None:
            return self
        _check_mask(self, mask)
        return MLPParams(
            tuple(w * m for w, m in zip(self.weights, mask.weights)),
            tuple(b * m for b, m in zip(self.biases, mask.biases)),
            self.spec,
        )


@dataclass(frozen=True)
class DropoutMask:
    weights: tuple
    biases: tuple


@dataclass(frozen=True)
class Gradient:
    """Derivatives shaped like ``MLPParams``."""

    weights: tuple
    biases: tuple

    def max_abs(self):
        return max(max(np.abs(w).max(), np.abs(b).max()) for w, b in zip(self.weights, self.biases))


def validate_spec(spec: Sequence[LayerSpec], final_scalar=True):
    spec = tuple(spec)
    if not spec:
        raise ConfigError("network spec must contain at least one layer")
    for l in range(1, len(spec)):
        if spec[l].width_in != spec[l - 1].width_out:
            raise ConfigError(
                f"layer {l} expects {spec[l].width_in} inputs but layer {l - 1} "
                f"produces {spec[l - 1].width_out}"
            )
    if final_scalar and (spec[-1].width_out != 1 or spec[-1].activation != "identity"):
        raise ConfigError("final layer must be a 1-unit identity layer")
    return spec


def build_spec(width_in, hidden=(64, 64), activation="relu", keep=0.9):
    """Layer list ``width_in -> hidden... -> 1`` with identity output.

    ``keep`` is either one keep probability for every layer or one value
    per layer (``len(hidden) + 1`` entries).
    """
    widths = [int(width_in), *[int(h) for h in hidden], 1]
    n_layers = len(widths) - 1
    keeps = np.broadcast_to(np.asarray(keep, dtype=float), (n_layers,)) if np.ndim(keep) == 0 \
        else np.asarray(keep, dtype=float)
    if keeps.shape != (n_layers,):
        raise ConfigError(f"expected {n_layers} keep probabilities, got {keeps.size}")
    return tuple(
        LayerSpec(widths[l], widths[l + 1], "identity" if l == n_layers - 1 else activation, float(keeps[l]))
        for l in range(n_layers)
    )


def init_mlp(spec: Sequence[LayerSpec], seed) -> MLPParams:
    """Draw ``N(0, 1/width_in)`` weights and zero biases."""
    spec = validate_spec(spec, final_scalar=False)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for layer in spec:
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(layer.width_in), size=(layer.width_out, layer.width_in)))
        biases.append(np.zeros(layer.width_out))
    return MLPParams(tuple(weights), tuple(biases), spec)


def _check_mask(params, mask):
    if len(mask.weights) != params.n_layers or len(mask.biases) != params.n_layers:
        raise ValidationError("dropout mask has the wrong number of layers")
    for l, (w, b, mw, mb) in enumerate(zip(params.weights, params.biases, mask.weights, mask.biases)):
        if mw.shape != w.shape or mb.shape != b.shape:
            raise ValidationError(f"dropout mask shape mismatch at layer {l}")


def sample_dropout_mask(spec: Sequence[LayerSpec], seed) -> DropoutMask:
    """Independent Bernoulli(keep) entries for every weight and bias."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for layer in spec:
        p = layer.dropout_keep
        weights.append((rng.random((layer.width_out, layer.width_in)) < p).astype(float))
        biases.append((rng.random(layer.width_out) < p).astype(float))
    return DropoutMask(tuple(weights), tuple(biases))


def full_mask(spec: Sequence[LayerSpec], value=1.0) -> DropoutMask:
    return DropoutMask(
        tuple(np.full((s.width_out, s.width_in), float(value)) for s in spec),
        tuple(np.full(s.width_out, float(value)) for s in spec),
    )


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(name, z, a):
    if name == "relu":
        # subgradient 0 at the kink
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def forward_batch(params: MLPParams, inputs, mask: Optional[DropoutMask] = None, return_cache=False):
    """Evaluate the network on the rows of ``inputs``.

    Returns a vector with one output per row. With ``return_cache`` the
    pre-activations and activations of every layer are also returned for
    ``backward``.
    """
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.spec[0].width_in:
        raise ValidationError(f"input has {x.shape[1]} features, network expects {params.spec[0].width_in}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite network input", layer=0)
    p = params.masked(mask)
    acts = [x]
    pre = []
    a = x
    for w, b, layer in zip(p.weights, p.biases, p.spec):
        z = a @ w.T + b
        a = _activate(layer.activation, z)
        pre.append(z)
        acts.append(a)
    out = a[:, 0]
    if return_cache:
        return out, (p, pre, acts)
    return out


def forward(params: MLPParams, input, mask: Optional[DropoutMask] = None) -> float:
    """Scalar output of the network for one input vector."""
    x = np.asarray(input, dtype=float)
    if x.ndim != 1:
        raise ValidationError("forward expects a single input vector")
    return float(forward_batch(params, x, mask)[0])


def backward(cache, upstream, mask: Optional[DropoutMask] = None) -> Gradient:
    """Reverse pass from a ``forward_batch`` cache.

    ``upstream`` holds dL/d(output) per row. Gradients are summed over rows
    and taken with respect to the *unmasked* parameters, so dropped entries
    receive zero gradient.
    """
    p, pre, acts = cache
    delta = np.asarray(upstream, dtype=float).reshape(-1, 1)
    n_layers = len(p.spec)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for l in range(n_layers - 1, -1, -1):
        dz = delta * _activate_grad(p.spec[l].activation, pre[l], acts[l + 1])
        gw[l] = dz.T @ acts[l]
        gb[l] = dz.sum(axis=0)
        if not (np.all(np.isfinite(gw[l])) and np.all(np.isfinite(gb[l]))):
            raise NumericError(f"non-finite gradient at layer {l}", layer=l)
        if l:
            delta = dz @ p.weights[l]
    if mask is not None:
        gw = [g * m for g, m in zip(gw, mask.weights)]
        gb = [g * m for g, m in zip(gb, mask.biases)]
    return Gradient(tuple(gw), tuple(gb))


def grad(params: MLPParams, inputs, upstream, mask: Optional[DropoutMask] = None) -> Gradient:
    """Exact gradient of ``sum_r upstream[r] * f(inputs[r])`` w.r.t. parameters."""
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    g = np.asarray(upstream, dtype=float).reshape(-1)
    if x.shape[0] == 0:
        raise ValidationError("gradient batch is empty")
    if g.shape[0] != x.shape[0]:
        raise ValidationError("one upstream gradient per input row is required")
    _, cache = forward_batch(params, x, mask, return_cache=True)
    return backward(cache, g, mask)


def finite_diff_grad(params: MLPParams, inputs, upstream, epsilon=1e-6, mask: Optional[DropoutMask] = None) -> Gradient:
    """Central-difference estimate of ``grad``, one parameter at a time."""
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    x = np.asarray(inputs, dtype=float)
    g = np.asarray(upstream, dtype=float).reshape(-1)

    def objective(weights, biases):
        p = MLPParams(tuple(weights), tuple(biases), params.spec)
        return float(np.dot(g, forward_batch(p, x, mask)))

    weights = [w.copy() for w in params.weights]
    biases = [b.copy() for b in params.biases]
    out_w, out_b = [], []
    for group, out in ((weights, out_w), (biases, out_b)):
        for arr in group:
            d = np.zeros_like(arr)
            flat, dflat = arr.reshape(-1), d.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + epsilon
                up = objective(weights, biases)
                flat[k] = orig - epsilon
                down = objective(weights, biases)
                flat[k] = orig
                dflat[k] = (up - down) / (2.0 * epsilon)
            out.append(d)
    return Gradient(tuple(out_w), tuple(out_b))


def sgd_step(params: MLPParams, grads: Gradient, learning_rate, l2_weights, l2_biases) -> MLPParams:
    """One plain SGD step on loss + sum_l lambda_l * ||theta_l||^2."""
    if learning_rate <= 0:
        raise ValidationError("learning_rate must be positive")
    lw = np.broadcast_to(np.asarray(l2_weights, dtype=float), (params.n_layers,))
    lb = np.broadcast_to(np.asarray(l2_biases, dtype=float), (params.n_layers,))
    if np.any(lw < 0) or np.any(lb < 0):
        raise ValidationError("L2 penalties must be non-negative")
    weights, biases = [], []
    for l, (w, b, gw, gb) in enumerate(zip(params.weights, params.biases, grads.weights, grads.biases)):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ValidationError(f"gradient shape mismatch at layer {l}")
        weights.append(w - learning_rate * (gw + 2.0 * lw[l] * w))
        biases.append(b - learning_rate * (gb + 2.0 * lb[l] * b))
    return MLPParams(tuple(weights), tuple(biases), params.spec)


def l2_norms(params: MLPParams):
    """Per-layer squared Frobenius norms of weights and biases."""
    return (
        np.array([float(np.sum(w * w)) for w in params.weights]),
        np.array([float(np.sum(b * b)) for b in params.biases]),
    )
