"""Aerodynamic evaluators and the physical loss.

Two interchangeable evaluators predict the lift coefficient of a design and
its gradient: :class:`OracleEvaluator` (thin-airfoil theory, exact and affine
in the CST coefficients) and :class:`DropoutSurrogate` (a small tanh network
trained on oracle labels that also supports Monte-Carlo dropout).
"""

from __future__ import annotations

import logging
from functools import lru_cache
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import nncore
from .exceptions import ConfigurationError, DomainError, NumericError, ShapeError, TrainingError
from .geometry import glauert_abscissae, shape_slope_basis, split_design

logger = logging.getLogger(__name__)

N_QUADRATURE = 256
DEFAULT_ALPHA = np.deg2rad(2.0)
TARGET_CL = 0.7


@dataclass(frozen=True)
class OperatingPoint:
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not np.isfinite(self.alpha) or abs(self.alpha) >= 0.35:
            raise DomainError(f"angle of attack {self.alpha} rad is outside the thin-airfoil regime")


@dataclass(frozen=True)
class PhysicalTarget:
    y: float = TARGET_CL

    def __post_init__(self):
        if not np.isfinite(self.y):
            raise DomainError("target must be finite")


@dataclass
class UqReport:
    mu: np.ndarray
    sigma: np.ndarray
    n_passes: int


def midpoint_nodes(n_nodes=N_QUADRATURE):
    return (np.arange(n_nodes) + 0.5) * np.pi / n_nodes


def zero_lift_angle(slope_fn, n_nodes=N_QUADRATURE):
    """Glauert integral ``-(1/pi) * int_0^pi dz/dx (cos(theta) - 1) dtheta``.

    ``slope_fn(theta)`` returns camber slopes with the quadrature axis last.
    """
    theta = midpoint_nodes(n_nodes)
    slope = np.asarray(slope_fn(theta), dtype=float)
    if not np.all(np.isfinite(slope)):
        raise NumericError("non-finite camber slope")
    return -np.sum(slope * (np.cos(theta) - 1.0), axis=-1) / n_nodes


def thin_airfoil_cl(slope_fn, op_point=None, n_nodes=N_QUADRATURE):
    op_point = op_point or OperatingPoint()
    return 2.0 * np.pi * (op_point.alpha - zero_lift_angle(slope_fn, n_nodes))


@lru_cache(maxsize=8)
def _slope_basis(n_nodes):
    basis = shape_slope_basis(glauert_abscissae(midpoint_nodes(n_nodes)))
    basis.setflags(write=False)
    return basis


def oracle_cl(design, op_point=None, n_nodes=N_QUADRATURE):
    """Thin-airfoil lift coefficient of one design or a batch ``(n, 16)``."""
    design = np.asarray(design, dtype=float)
    if not np.all(np.isfinite(design)):
        raise NumericError("non-finite design passed to the oracle")
    upper, lower = split_design(design)
    basis = _slope_basis(n_nodes)
    return thin_airfoil_cl(lambda th: 0.5 * (upper + lower) @ basis, op_point, n_nodes)


def oracle_cl_gradient(op_point=None, n_nodes=N_QUADRATURE):
    """Constant gradient of :func:`oracle_cl` with respect to the 16 coefficients.

    The lift is affine in the camber slope, which is linear in the design, so
    the gradient is the quadrature weights pushed through the slope basis.
    """
    theta = midpoint_nodes(n_nodes)
    basis = shape_slope_basis(glauert_abscissae(theta))
    # dCL/dslope_j = 2 * (cos(theta_j) - 1) * pi / n
    w = 2.0 * (np.cos(theta) - 1.0) * np.pi / n_nodes
    half = 0.5 * basis @ w
    return np.concatenate([half, half])


class OracleEvaluator:
    """Exact thin-airfoil evaluator with the ``predict``/``gradient`` protocol."""

    name = "oracle"

    def __init__(self, op_point=None):
        self.op_point = op_point or OperatingPoint()
        self._grad = oracle_cl_gradient(self.op_point)

    def predict(self, designs):
        return oracle_cl(designs, self.op_point)

    def gradient(self, designs):
        designs = np.asarray(designs, dtype=float)
        return np.broadcast_to(self._grad, designs.shape).copy()


def _safe_std(std):
    std = np.asarray(std, dtype=float)
    return np.where(std > 0.0, std, 1.0)


class DropoutSurrogate(RegressorMixin, BaseEstimator):
    """Dense tanh regressor with hidden-layer dropout, trained with Adam.

    Parameters
    ----------
    hidden : tuple of int, default=(64, 64)
        Hidden-layer widths.
    dropout : float, default=0.01
        Dropout rate applied to hidden units during training.
    learning_rate : float, default=1e-3
    max_epochs : int, default=3000
    batch_size : int, default=64
    tol : float, default=1e-5
        Training stops once the validation MSE falls below this value.
    validation_fraction : float, default=0.2
    lr_floor : float, default=0.05
        Cosine decay of the step size per epoch down to
        ``lr_floor * learning_rate``; 1.0 keeps it constant.
    random_state : int, default=0
    """

    def __init__(
        self,
        hidden=(64, 64),
        dropout=0.01,
        learning_rate=1e-3,
        max_epochs=3000,
        batch_size=64,
        tol=1e-5,
        validation_fraction=0.2,
        lr_floor=0.05,
        random_state=0,
    ):
        self.hidden = hidden
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.tol = tol
        self.validation_fraction = validation_fraction
        self.lr_floor = lr_floor
        self.random_state = random_state

    def fit(self, X, y, x_mean=None, x_std=None):
        X, y = check_X_y(X, y, y_numeric=True)
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {self.dropout}")
        rng = np.random.default_rng(self.random_state)
        self.x_mean_ = X.mean(axis=0) if x_mean is None else np.asarray(x_mean, dtype=float)
        self.x_std_ = _safe_std(X.std(axis=0) if x_std is None else x_std)
        self.y_mean_ = float(y.mean())
        self.y_std_ = float(_safe_std(y.std()))
        Z = (X - self.x_mean_) / self.x_std_
        t = ((y - self.y_mean_) / self.y_std_)[:, None]

        order = rng.permutation(len(X))
        n_val = max(1, int(round(self.validation_fraction * len(X))))
        val, train = order[:n_val], order[n_val:]
        if len(train) == 0:
            train = val

        sizes = [X.shape[1], *self.hidden, 1]
        params = nncore.net_init(sizes, "tanh", seed=int(rng.integers(2**63)))
        state = nncore.OptimizerState.zeros_like(params, lr=self.learning_rate)
        self.n_features_in_ = X.shape[1]
        self.val_mse_ = np.inf
        self.history_ = []
        epoch = 0
        for epoch in range(1, self.max_epochs + 1):
            cos = 0.5 * (1.0 + np.cos(np.pi * (epoch - 1) / self.max_epochs))
            state.lr = self.learning_rate * (self.lr_floor + (1.0 - self.lr_floor) * cos)
            perm = train[rng.permutation(len(train))]
            for start in range(0, len(perm), self.batch_size):
                idx = perm[start : start + self.batch_size]
                mask = nncore.sample_dropout_mask(self.dropout, params.hidden_widths, rng, n=len(idx))
                out, cache = nncore.net_forward(params, Z[idx], mask)
                resid = out - t[idx]
                grads = nncore.net_backward_params(params, cache, 2.0 * resid / len(idx))
                params, state = nncore.optimizer_step(state, params, grads)
            pred, _ = nncore.net_forward(params, Z[val])
            mse = float(np.mean(((pred - t[val]) * self.y_std_) ** 2))
            if not np.isfinite(mse):
                raise TrainingError("surrogate validation loss is not finite", iteration=epoch)
            self.history_.append(mse)
            self.val_mse_ = mse
            if mse < self.tol:
                break
        self.n_epochs_ = epoch
        if self.val_mse_ > 1e-2:
            raise TrainingError(
                f"surrogate did not converge: validation MSE {self.val_mse_:.3g} after {epoch} epochs",
                iteration=epoch,
            )
        self.network_ = params
        logger.info("surrogate trained: %d epochs, validation MSE %.3g", epoch, self.val_mse_)
        return self

    def _normalize(self, X):
        X = np.asarray(X, dtype=float)
        squeeze = X.ndim == 1
        X2 = X[None, :] if squeeze else X
        if X2.ndim != 2 or X2.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} features, got shape {X.shape}")
        return (X2 - self.x_mean_) / self.x_std_, squeeze

    def predict(self, X, mask=None):
        check_is_fitted(self, "network_")
        Z, squeeze = self._normalize(X)
        out, _ = nncore.net_forward(self.network_, Z, mask)
        pred = out[:, 0] * self.y_std_ + self.y_mean_
        return pred[0] if squeeze else pred

    def gradient(self, X):
        """Input gradient of the deterministic prediction, one row per design."""
        check_is_fitted(self, "network_")
        Z, squeeze = self._normalize(X)
        out, cache = nncore.net_forward(self.network_, Z)
        g = nncore.net_vjp_input(self.network_, cache, np.ones_like(out)) * (self.y_std_ / self.x_std_)
        return g[0] if squeeze else g

    def predict_uq(self, X, n_passes=20, rate=None, rng=None):
        return surrogate_uq(self, X, n_passes, self.dropout if rate is None else rate, rng)

    def to_checkpoint(self):
        check_is_fitted(self, "network_")
        extra = {
            "kind": "surrogate",
            "x_mean": self.x_mean_,
            "x_std": self.x_std_,
            "y_mean": self.y_mean_,
            "y_std": self.y_std_,
            "dropout": self.dropout,
            "val_mse": self.val_mse_,
        }
        return self.network_, extra

    @classmethod
    def from_checkpoint(cls, params, extra):
        model = cls(hidden=tuple(params.hidden_widths), dropout=float(extra["dropout"]))
        model.network_ = params
        model.x_mean_ = np.asarray(extra["x_mean"], dtype=float)
        model.x_std_ = np.asarray(extra["x_std"], dtype=float)
        model.y_mean_ = float(extra["y_mean"])
        model.y_std_ = float(extra["y_std"])
        model.val_mse_ = float(extra.get("val_mse", np.nan))
        model.n_features_in_ = params.n_in
        return model


class SurrogateEvaluator:
    """Adapts a fitted :class:`DropoutSurrogate` to the evaluator protocol."""

    name = "surrogate"

    def __init__(self, model):
        self.model = model

    def predict(self, designs):
        return self.model.predict(designs)

    def gradient(self, designs):
        return self.model.gradient(designs)


def train_surrogate(dataset, op_point=None, config=None, seed=0):
    """Fit a 16-64-64-1 dropout surrogate to oracle lift labels of ``dataset``."""
    designs = dataset.designs if hasattr(dataset, "designs") else np.asarray(dataset)
    if len(designs) < 64:
        raise ConfigurationError(f"surrogate training needs at least 64 designs, got {len(designs)}")
    labels = oracle_cl(designs, op_point)
    model = DropoutSurrogate(random_state=seed, **(config or {}))
    has_stats = hasattr(dataset, "designs")
    mean = dataset.mean if has_stats else None
    std = dataset.std if has_stats else None
    return model.fit(designs, labels, x_mean=mean, x_std=std)


def surrogate_predict(model, design, mask=None):
    return model.predict(design, mask)


def surrogate_uq(model, design, n_passes=20, rate=0.01, rng=None):
    """Mean and sample standard deviation (divisor ``N - 1``) over dropout passes.

    Every pass draws its masks from its own child stream of ``rng`` so the
    result does not depend on evaluation order.
    """
    if n_passes < 2:
        raise ConfigurationError("UQ needs at least two passes")
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    rng = rng if rng is not None else np.random.default_rng(0)
    design = np.asarray(design, dtype=float)
    n = 1 if design.ndim == 1 else len(design)
    streams = rng.spawn(n_passes)
    widths = model.network_.hidden_widths
    preds = np.empty((n_passes, n))
    for i, stream in enumerate(streams):
        mask = nncore.sample_dropout_mask(rate, widths, stream, n=n)
        preds[i] = np.atleast_1d(model.predict(design, mask))
    mu = preds.mean(axis=0)
    # spread about the first pass: identical passes give exactly zero
    sigma = (preds - preds[0]).std(axis=0, ddof=1)
    if design.ndim == 1:
        return UqReport(mu[0], sigma[0], n_passes)
    return UqReport(mu, sigma, n_passes)


class PhysicalLoss:
    """``loss(x) = (C_L(x) - y)**2`` with gradient, for any evaluator."""

    def __init__(self, evaluator, target=None):
        self.evaluator = evaluator
        self.target = target if isinstance(target, PhysicalTarget) else PhysicalTarget(
            TARGET_CL if target is None else float(target)
        )

    def __call__(self, designs):
        return physical_loss(self.evaluator, designs, self.target)

    def value(self, designs):
        r = self.evaluator.predict(designs) - self.target.y
        return r * r


def physical_loss(evaluator, design, target):
    y = target.y if isinstance(target, PhysicalTarget) else float(target)
    design = np.asarray(design, dtype=float)
    resid = evaluator.predict(design) - y
    grad = 2.0 * np.asarray(resid)[..., None] * evaluator.gradient(design)
    return resid * resid, grad
