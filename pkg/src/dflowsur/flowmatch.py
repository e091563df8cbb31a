"""Flow-matching velocity fields and the forward-Euler sampler.

The velocity network sees ``[z, t]`` (or ``[z, t, c]`` when conditional),
where ``z`` is the standardized design, ``t`` the raw time and ``c`` the
standardized condition label.  Noise ``z0 ~ N(0, I)`` lives in standardized
coordinates; terminal states are mapped back to raw designs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import nncore
from .exceptions import ConfigurationError, DomainError, NumericError, ShapeError, TrainingError

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 1000
    learning_rate: float = 1e-3
    seed: int = 0
    hidden: tuple = (128, 128)

    def __post_init__(self):
        if self.batch_size <= 0 or self.epochs <= 0 or self.learning_rate <= 0:
            raise ConfigurationError("batch size, epochs and learning rate must be positive")


@dataclass
class Trajectory:
    """Euler trajectory on the uniform grid ``t_i = i / T``.

    ``states`` has shape ``(T + 1, n, d)`` in standardized coordinates;
    ``terminal`` holds the de-normalized final designs ``(n, d)``.
    """

    times: np.ndarray
    states: np.ndarray
    terminal: np.ndarray
    n_evals: int = 0

    @property
    def T(self):
        return len(self.times) - 1

    @property
    def dt(self):
        return 1.0 / self.T


def interpolate(x0, x1, t):
    """Straight-line probability path ``(1 - t) * x0 + t * x1``."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
        raise DomainError(f"t must lie in [0, 1], got {t}")
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if x0.shape != x1.shape:
        raise ShapeError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    return (1.0 - t_arr) * x0 + t_arr * x1


class FlowMatcher(BaseEstimator):
    """Velocity field ``u(z, t[, c])`` fitted by flow matching.

    Parameters
    ----------
    hidden : tuple of int, default=(128, 128)
    epochs : int, default=1000
        Passes over the training set.
    batch_size : int, default=32
    learning_rate : float, default=1e-3
        Initial Adam step size.
    lr_floor : float, default=0.05
        The step size follows a cosine schedule down to
        ``lr_floor * learning_rate``; 1.0 keeps it constant.
    random_state : int, default=0
    """

    def __init__(
        self,
        hidden=(128, 128),
        epochs=1000,
        batch_size=32,
        learning_rate=1e-3,
        lr_floor=0.05,
        random_state=0,
    ):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_floor = lr_floor
        self.random_state = random_state

    def fit(self, X, y=None, x_mean=None, x_std=None):
        """Fit on designs ``X``; passing labels ``y`` makes the model conditional."""
        X = check_array(X)
        if y is not None:
            y = np.asarray(y, dtype=float).ravel()
            if len(y) != len(X):
                raise ConfigurationError(f"{len(y)} labels for {len(X)} designs")
        if self.batch_size <= 0 or self.epochs <= 0 or self.learning_rate <= 0:
            raise ConfigurationError("batch size, epochs and learning rate must be positive")
        rng = np.random.default_rng(self.random_state)
        n, d = X.shape
        self.n_features_in_ = d
        self.x_mean_ = X.mean(axis=0) if x_mean is None else np.asarray(x_mean, dtype=float)
        std = X.std(axis=0) if x_std is None else np.asarray(x_std, dtype=float)
        self.x_std_ = np.where(std > 0.0, std, 1.0)
        self.conditional_ = y is not None
        if self.conditional_:
            self.y_mean_ = float(y.mean())
            self.y_std_ = float(y.std()) if y.std() > 0 else 1.0
            c = (y - self.y_mean_) / self.y_std_
        Z = (X - self.x_mean_) / self.x_std_

        n_in = d + 1 + int(self.conditional_)
        params = nncore.net_init([n_in, *self.hidden, d], "tanh", seed=int(rng.integers(2**63)))
        state = nncore.OptimizerState.zeros_like(params, lr=self.learning_rate)
        batch = min(self.batch_size, n)
        inp = np.empty((batch, n_in))
        self.loss_history_ = []
        total = self.epochs * (n // batch)
        it = 0
        for epoch in range(self.epochs):
            perm = rng.permutation(n)
            for start in range(0, n - batch + 1, batch):
                idx = perm[start : start + batch]
                x1 = Z[idx]
                x0 = rng.standard_normal((batch, d))
                t = rng.random((batch, 1))  # [0, 1)
                inp[:, :d] = interpolate(x0, x1, t)
                inp[:, d] = t[:, 0]
                if self.conditional_:
                    inp[:, d + 1] = c[idx]
                out, cache = nncore.net_forward(params, inp)
                resid = out - (x1 - x0)
                loss = float(np.mean(np.sum(resid * resid, axis=1)))
                if not np.isfinite(loss):
                    raise TrainingError(f"flow-matching loss became {loss} at iteration {it}", iteration=it)
                self.loss_history_.append(loss)
                grads = nncore.net_backward_params(params, cache, 2.0 * resid / batch)
                cos = 0.5 * (1.0 + np.cos(np.pi * it / total))
                state.lr = self.learning_rate * (self.lr_floor + (1.0 - self.lr_floor) * cos)
                params, state = nncore.optimizer_step(state, params, grads)
                it += 1
        self.network_ = params
        self.n_iter_ = it
        logger.info("flow trained: %d iterations, final loss %.4g", it, self.loss_history_[-1])
        return self

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.x_mean_) / self.x_std_

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * self.x_std_ + self.x_mean_

    def _condition_column(self, condition, n):
        if not self.conditional_:
            if condition is not None:
                raise ConfigurationError("model is unconditional but a condition was supplied")
            return None
        if condition is None:
            raise ConfigurationError("conditional model needs a condition value")
        c = (np.asarray(condition, dtype=float) - self.y_mean_) / self.y_std_
        return np.broadcast_to(c, (n,))

    def _inputs(self, z, t, c):
        n, d = z.shape
        inp = np.empty((n, d + 1 + (c is not None)))
        inp[:, :d] = z
        inp[:, d] = t
        if c is not None:
            inp[:, d + 1] = c
        return inp

    def velocity(self, z, t, condition=None, return_cache=False):
        """Velocity at standardized states ``z`` (``(d,)`` or ``(n, d)``)."""
        check_is_fitted(self, "network_")
        z = np.asarray(z, dtype=float)
        squeeze = z.ndim == 1
        z2 = z[None, :] if squeeze else z
        if z2.shape[1] != self.n_features_in_:
            raise ShapeError(f"state has width {z2.shape[1]}, model expects {self.n_features_in_}")
        c = self._condition_column(condition, len(z2))
        out, cache = nncore.net_forward(self.network_, self._inputs(z2, t, c))
        if squeeze:
            out = out[0]
        return (out, cache) if return_cache else out

    def sample(self, x0=None, n_steps=200, condition=None, n_samples=None, random_state=None):
        """Integrate from ``x0`` (or fresh noise) to ``t = 1``; returns a :class:`Trajectory`."""
        check_is_fitted(self, "network_")
        if x0 is None:
            rng = np.random.default_rng(random_state)
            x0 = rng.standard_normal((n_samples or 1, self.n_features_in_))
        return sample_unconditional(self, n_steps, x0, condition)

    def to_checkpoint(self):
        check_is_fitted(self, "network_")
        extra = {
            "kind": "velocity",
            "x_mean": self.x_mean_,
            "x_std": self.x_std_,
            "conditional": bool(self.conditional_),
        }
        if self.conditional_:
            extra.update(y_mean=self.y_mean_, y_std=self.y_std_)
        return self.network_, extra

    @classmethod
    def from_checkpoint(cls, params, extra):
        model = cls(hidden=tuple(params.hidden_widths))
        model.network_ = params
        model.x_mean_ = np.asarray(extra["x_mean"], dtype=float)
        model.x_std_ = np.asarray(extra["x_std"], dtype=float)
        model.conditional_ = bool(extra.get("conditional", False))
        model.n_features_in_ = params.n_out
        if model.conditional_:
            model.y_mean_ = float(extra["y_mean"])
            model.y_std_ = float(extra["y_std"])
        expected_in = params.n_out + 1 + int(model.conditional_)
        if params.n_in != expected_in or len(model.x_mean_) != params.n_out:
            raise ShapeError(
                f"velocity network input width {params.n_in} inconsistent with design dimension {params.n_out}"
            )
        return model

    @classmethod
    def from_network(cls, params, x_mean=None, x_std=None, conditional=False, y_mean=0.0, y_std=1.0):
        """Wrap hand-built parameters (used for rigged fields in tests)."""
        d = params.n_out
        extra = {
            "x_mean": np.zeros(d) if x_mean is None else x_mean,
            "x_std": np.ones(d) if x_std is None else x_std,
            "conditional": conditional,
            "y_mean": y_mean,
            "y_std": y_std,
        }
        return cls.from_checkpoint(params, extra)


def train_flow(dataset, config=None):
    """Unconditional flow matching on a :class:`~dflowsur.geometry.DesignDataset` or array."""
    config = config or TrainConfig()
    designs, mean, std = _unpack(dataset)
    model = FlowMatcher(config.hidden, config.epochs, config.batch_size, config.learning_rate, random_state=config.seed)
    return model.fit(designs, x_mean=mean, x_std=std)


def train_conditional_flow(dataset, labels, config=None):
    """Flow matching with each design's scalar label appended to the network input."""
    config = config or TrainConfig()
    designs, mean, std = _unpack(dataset)
    labels = np.asarray(labels, dtype=float).ravel()
    if len(labels) != len(designs):
        raise ConfigurationError(f"{len(labels)} labels for {len(designs)} designs")
    model = FlowMatcher(config.hidden, config.epochs, config.batch_size, config.learning_rate, random_state=config.seed)
    return model.fit(designs, labels, x_mean=mean, x_std=std)


def _unpack(dataset):
    if hasattr(dataset, "designs"):
        return dataset.designs, dataset.mean, dataset.std
    return np.asarray(dataset, dtype=float), None, None


def euler_states(model, T, x0, condition=None, keep_caches=False):
    """Run ``T`` Euler steps; returns ``(states, caches)``.

    ``states`` is ``(T + 1, n, d)``.  Caches are kept only when requested
    (they are what the reverse sweep consumes).
    """
    if T < 1 or int(T) != T:
        raise ConfigurationError(f"number of steps must be a positive integer, got {T}")
    z = np.atleast_2d(np.asarray(x0, dtype=float))
    if z.shape[1] != model.n_features_in_:
        raise ShapeError(f"x0 has width {z.shape[1]}, model expects {model.n_features_in_}")
    n, d = z.shape
    dt = 1.0 / T
    c = model._condition_column(condition, n)
    inp = model._inputs(z, 0.0, c)
    states = np.empty((T + 1, n, d))
    states[0] = z
    caches = [] if keep_caches else None
    net = model.network_
    for i in range(T):
        inp[:, :d] = z
        inp[:, d] = i * dt
        u, cache = nncore.net_forward(net, inp)
        z = z + dt * u
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite state at Euler step {i}", step=i)
        states[i + 1] = z
        if keep_caches:
            caches.append(cache)
    return states, caches


def sample_unconditional(model, T, x0, condition=None):
    """Forward-Euler integration of the learned field from ``t = 0`` to ``t = 1``."""
    check_is_fitted(model, "network_")
    x0 = np.asarray(x0, dtype=float)
    states, _ = euler_states(model, T, x0, condition)
    times = np.arange(T + 1) / T
    terminal = model.denormalize(states[-1])
    if x0.ndim == 1:
        return Trajectory(times, states[:, 0, :], terminal[0], T)
    return Trajectory(times, states, terminal, T)
