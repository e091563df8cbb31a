"""Energy-guided Euler sampling.

After the cutoff time ``t_c`` the drift becomes ``u(z, t) - lam * grad E(z)``
with ``E`` the physical loss.  The loss lives on raw designs, so its gradient
is pulled back through the affine de-normalization (multiplied by the
per-column std) before it enters the standardized dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .exceptions import ConfigurationError
from .flowmatch import Trajectory, euler_states
from .geometry import COEF_BOUND
from .physics import PhysicalTarget


@dataclass
class GuidanceConfig:
    lam: float = 10.0
    t_c: float = 0.0
    T: int = 1000
    target: PhysicalTarget = field(default_factory=PhysicalTarget)

    def __post_init__(self):
        if not self.lam >= 0.0:
            raise ConfigurationError(f"energy coefficient must be >= 0, got {self.lam}")
        if not 0.0 <= self.t_c <= 1.0:
            raise ConfigurationError(f"cutoff time must lie in [0, 1], got {self.t_c}")
        if self.T < 1 or int(self.T) != self.T:
            raise ConfigurationError(f"T must be a positive integer, got {self.T}")


@dataclass
class BudgetReport:
    K: int
    dk: float


@dataclass
class GuidedTrajectory(Trajectory):
    """Trajectory plus per-step records.

    ``loss`` is ``(T + 1, n)``; ``grad_norm``, ``velocity_norm`` and ``active``
    are ``(T, n)`` / ``(T,)`` and describe the step leaving state ``i``.
    """

    loss: np.ndarray = None
    grad_norm: np.ndarray = None
    velocity_norm: np.ndarray = None
    active: np.ndarray = None
    failed: np.ndarray = None
    fail_step: np.ndarray = None


def physics_budget(config):
    """Number of guided steps ``K = (1 - t_c) / dt`` and their size ``dk = dt``."""
    dt = 1.0 / config.T
    active = _active_steps(config.t_c, config.T)
    return BudgetReport(int(active.sum()), dt)


def _active_steps(t_c, T):
    # t_i >= t_c evaluated in integers so K = round((1 - t_c) * T) exactly
    i = np.arange(T)
    return i >= np.ceil(t_c * T - 1e-9)


def sample_energy_guided(model, loss_fn, config, x0, condition=None):
    """Guided Euler integration for a batch of standardized noises ``x0``.

    Rows whose state becomes non-finite, or whose terminal design has a
    coefficient beyond the validity bound, are marked failed; their terminal
    design is NaN and the remaining rows are unaffected.
    """
    x0 = np.asarray(x0, dtype=float)
    squeeze = x0.ndim == 1
    z = np.atleast_2d(x0).copy()
    n, d = z.shape
    T = int(config.T)
    dt = 1.0 / T
    lam = float(config.lam)
    std = model.x_std_
    active = _active_steps(config.t_c, T)
    c = model._condition_column(condition, n)
    inp = model._inputs(z, 0.0, c)
    net = model.network_

    states = np.empty((T + 1, n, d))
    loss = np.empty((T + 1, n))
    gnorm = np.empty((T, n))
    vnorm = np.empty((T, n))
    failed = np.zeros(n, dtype=bool)
    fail_step = np.full(n, -1)
    states[0] = z
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(T):
            L, g_raw = loss_fn(model.denormalize(z))
            loss[i] = L
            g = g_raw * std
            inp[:, :d] = z
            inp[:, d] = i * dt
            u, _ = nncore.net_forward(net, inp)
            drift = u - lam * g if active[i] else u
            gnorm[i] = np.linalg.norm(g, axis=1)
            vnorm[i] = np.linalg.norm(u, axis=1)
            z = z + dt * drift
            bad = ~np.all(np.isfinite(z), axis=1) & ~failed
            if bad.any():
                failed |= bad
                fail_step[bad] = i
            if failed.any():
                # frozen at zero so the network never sees non-finite input
                z[failed] = 0.0
            states[i + 1] = z
        final = model.denormalize(z)
        loss[T] = loss_fn(np.where(failed[:, None], model.x_mean_, final))[0]
    out_of_bounds = np.any(np.abs(final) > COEF_BOUND, axis=1) & ~failed
    fail_step[out_of_bounds] = T
    failed |= out_of_bounds
    final[failed] = np.nan
    if failed.any():
        after = (np.arange(T + 1)[:, None] > fail_step[None, :]) & failed[None, :]
        states[after] = np.nan
        loss[after] = np.nan
        loss[T, failed] = np.nan

    times = np.arange(T + 1) / T
    traj = GuidedTrajectory(
        times,
        states,
        final,
        T,
        loss=loss,
        grad_norm=gnorm,
        velocity_norm=vnorm,
        active=active,
        failed=failed,
        fail_step=fail_step,
    )
    if squeeze:
        traj = _squeeze(traj)
    return traj


def _squeeze(traj):
    return GuidedTrajectory(
        traj.times,
        traj.states[:, 0],
        traj.terminal[0],
        traj.n_evals,
        loss=traj.loss[:, 0],
        grad_norm=traj.grad_norm[:, 0],
        velocity_norm=traj.velocity_norm[:, 0],
        active=traj.active,
        failed=traj.failed[0],
        fail_step=traj.fail_step[0],
    )


def pseudo_loss_curve(model, loss_fn, T, x0, condition=None):
    """Physical loss along an unguided trajectory, ``T + 1`` values per sample."""
    states, _ = euler_states(model, T, x0, condition)
    value = getattr(loss_fn, "value", None)
    raw = model.denormalize(states)
    if value is not None:
        out = value(raw.reshape(-1, raw.shape[-1]))
    else:
        out = loss_fn(raw.reshape(-1, raw.shape[-1]))[0]
    out = np.asarray(out).reshape(states.shape[:-1])
    return out[:, 0] if np.asarray(x0).ndim == 1 else out
