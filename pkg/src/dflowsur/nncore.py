"""Dense feed-forward networks with hand-written reverse-mode derivatives.

Only the two backward passes the package needs are provided: gradients with
respect to the parameters (for training) and the vector-Jacobian product with
respect to the input (for differentiating through an ODE solve).  All routines
accept either a single input vector of shape ``(d,)`` or a batch ``(n, d)``;
rows of a batch never interact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    CheckpointError,
    CheckpointVersionError,
    ConfigurationError,
    NumericError,
    ShapeError,
)

ACTIVATIONS = ("tanh", "identity")
CHECKPOINT_SCHEMA = "dflowsur.network"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkParams:
    """Weights and biases of a dense network.

    ``weights[l]`` has shape ``(layer_sizes[l + 1], layer_sizes[l])``.  With
    ``activation="tanh"`` every hidden layer applies tanh and the output layer
    is affine; ``"identity"`` makes the whole network affine.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        _check_layer_sizes(self.layer_sizes)
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("number of weight/bias arrays does not match layer_sizes")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[l + 1], self.layer_sizes[l])
            if W.shape != expected or b.shape != (expected[0],):
                raise ShapeError(f"layer {l}: got W{W.shape}, b{b.shape}, expected W{expected}")

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def hidden_widths(self):
        return list(self.layer_sizes[1:-1])

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    def copy(self):
        return NetworkParams(
            list(self.layer_sizes),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def arrays(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` in a fixed order."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    @classmethod
    def from_arrays(cls, template, arrays):
        return cls(
            list(template.layer_sizes),
            list(arrays[0::2]),
            list(arrays[1::2]),
            template.activation,
        )

    def to_dict(self):
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                [int(s) for s in data["layer_sizes"]],
                [np.asarray(W, dtype=float) for W in data["weights"]],
                [np.asarray(b, dtype=float) for b in data["biases"]],
                data["activation"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ShapeError):
                raise
            raise CheckpointError(f"malformed network record: {exc}") from exc


@dataclass
class DropoutMask:
    """Per-hidden-layer keep vectors with inverted scaling.

    Each entry of ``keep`` is either ``(width,)`` (shared by the batch) or
    ``(n, width)`` (one mask per row).
    """

    rate: float
    keep: list[np.ndarray]

    @property
    def scale(self):
        return 1.0 / (1.0 - self.rate)


@dataclass
class ForwardCache:
    """Activations recorded by :func:`net_forward`.

    ``activations[0]`` is the input and ``activations[-1]`` the output;
    ``preactivations[l]`` is the affine output of layer ``l``.
    """

    activations: list[np.ndarray]
    preactivations: list[np.ndarray]
    mask: DropoutMask | None = None
    squeeze: bool = False


@dataclass
class OptimizerState:
    """Adaptive-moment optimizer state, one accumulator pair per array."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        arrays = params.arrays()
        return cls(
            [np.zeros_like(a) for a in arrays],
            [np.zeros_like(a) for a in arrays],
            0,
            lr,
            beta1,
            beta2,
            eps,
        )


@dataclass
class ParamGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray] = field(default_factory=list)

    def arrays(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out


def _check_layer_sizes(layer_sizes):
    if layer_sizes is None or len(layer_sizes) < 2:
        raise ConfigurationError(f"need at least input and output sizes, got {layer_sizes!r}")
    for s in layer_sizes:
        if int(s) != s or s <= 0:
            raise ConfigurationError(f"layer sizes must be positive integers, got {layer_sizes!r}")


def net_init(layer_sizes, activation="tanh", seed=0):
    """Zero-mean normal weights with std ``1/sqrt(fan_in)``, zero biases."""
    _check_layer_sizes(layer_sizes)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return NetworkParams([int(s) for s in layer_sizes], weights, biases, activation)


def sample_dropout_mask(rate, widths, rng, n=None):
    """Draw independent keep decisions (probability ``1 - rate``) per hidden unit.

    ``n`` requests one mask per batch row.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    shape = (lambda w: (w,)) if n is None else (lambda w: (n, w))
    if rate == 0.0:
        return DropoutMask(0.0, [np.ones(shape(w)) for w in widths])
    keep = [(rng.random(shape(w)) >= rate).astype(float) for w in widths]
    return DropoutMask(float(rate), keep)


def net_forward(params, x, mask=None):
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    X = x[None, :] if squeeze else x
    if X.ndim != 2 or X.shape[1] != params.n_in:
        raise ShapeError(f"input has shape {x.shape}, network expects width {params.n_in}")
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite network input")
    if mask is not None:
        widths = params.hidden_widths
        if len(mask.keep) != len(widths) or any(
            k.shape[-1] != w for k, w in zip(mask.keep, widths)
        ):
            raise ShapeError("dropout mask does not match hidden-layer widths")

    acts = [X]
    pres = []
    a = X
    last = params.n_layers - 1
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ W.T + b
        pres.append(z)
        if l < last:
            a = np.tanh(z) if params.activation == "tanh" else z
            if mask is not None:
                a = a * (mask.keep[l] * mask.scale)
        else:
            a = z
        acts.append(a)
    out = acts[-1][0] if squeeze else acts[-1]
    return out, ForwardCache(acts, pres, mask, squeeze)


def _as_batch(cache, cotangent, n_out):
    c = np.asarray(cotangent, dtype=float)
    if cache.squeeze:
        c = c[None, :] if c.ndim == 1 else c
    if c.shape != cache.activations[-1].shape or c.shape[1] != n_out:
        raise ShapeError(
            f"cotangent shape {np.shape(cotangent)} does not match output {cache.activations[-1].shape}"
        )
    return c


def _backprop(params, cache, delta, want_params):
    if len(cache.activations) != params.n_layers + 1:
        raise ShapeError("forward cache depth does not match the network")
    gW = [None] * params.n_layers
    gb = [None] * params.n_layers
    for l in range(params.n_layers - 1, -1, -1):
        a_prev = cache.activations[l]
        if a_prev.shape[1] != params.layer_sizes[l]:
            raise ShapeError("stale forward cache")
        if want_params:
            gW[l] = delta.T @ a_prev
            gb[l] = delta.sum(axis=0)
        delta = delta @ params.weights[l]
        if l > 0:
            if cache.mask is not None:
                delta = delta * (cache.mask.keep[l - 1] * cache.mask.scale)
            if params.activation == "tanh":
                h = cache.activations[l] if cache.mask is None else np.tanh(cache.preactivations[l - 1])
                delta = delta * (1.0 - h * h)
    return gW, gb, delta


def net_backward_params(params, cache, output_cotangent):
    """Gradient of ``sum(output * output_cotangent)`` w.r.t. every weight and bias.

    For a batch the contributions of all rows are summed.
    """
    delta = _as_batch(cache, output_cotangent, params.n_out)
    gW, gb, _ = _backprop(params, cache, delta, True)
    return ParamGrads(gW, gb)


def net_vjp_input(params, cache, output_cotangent):
    """Return ``J(x)^T @ output_cotangent`` row by row."""
    delta = _as_batch(cache, output_cotangent, params.n_out)
    _, _, dx = _backprop(params, cache, delta, False)
    return dx[0] if cache.squeeze else dx


def optimizer_step(state, params, grads):
    """One adaptive-moment update; returns ``(new_params, new_state)``."""
    g_arrays = grads.arrays() if hasattr(grads, "arrays") else list(grads)
    p_arrays = params.arrays()
    if len(g_arrays) != len(p_arrays) or len(state.m) != len(p_arrays):
        raise ShapeError("gradient/optimizer state does not match parameters")
    for g, p in zip(g_arrays, p_arrays):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient passed to optimizer", step=state.step)

    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = OptimizerState(new_m, new_v, t, state.lr, b1, b2, state.eps)
    return NetworkParams.from_arrays(params, new_p), new_state


def save_network(params, path, extra=None):
    """Write a self-describing JSON checkpoint.

    Floats are written with ``repr`` precision so loading is value-exact.
    ``extra`` carries caller metadata such as normalization statistics.
    """
    doc = {
        "schema": CHECKPOINT_SCHEMA,
        "version": CHECKPOINT_VERSION,
        "network": params.to_dict(),
        "extra": _jsonable(extra or {}),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_network(path):
    """Inverse of :func:`save_network`; returns ``(params, extra)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: cannot parse checkpoint ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(doc, dict) or doc.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path}: not a network checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint schema version {doc.get('version')} is not supported "
            f"(expected {CHECKPOINT_VERSION}); re-export the model with this version"
        )
    try:
        params = NetworkParams.from_dict(doc["network"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed network section ({exc})") from exc
    return params, doc.get("extra", {})


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
