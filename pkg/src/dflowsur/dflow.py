"""Source-point optimization through the unrolled Euler solve.

The physical loss is evaluated only on the terminal design.  Its gradient is
carried back to the initial noise by a reverse sweep over the cached Euler
steps, ``v_i = v_{i+1} + dt * J_i^T v_{i+1}``, and the noise is updated by
plain gradient descent with a fixed step ``tau``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .exceptions import ConfigurationError, ShapeError
from .flowmatch import euler_states
from .physics import PhysicalTarget


@dataclass
class DflowConfig:
    K: int = 200
    tau: float = 0.1
    T: int = 50
    tol: float = 1e-8
    target: PhysicalTarget = field(default_factory=PhysicalTarget)

    def __post_init__(self):
        if self.K < 1 or int(self.K) != self.K:
            raise ConfigurationError(f"K must be a positive integer, got {self.K}")
        if self.T < 1 or int(self.T) != self.T:
            raise ConfigurationError(f"T must be a positive integer, got {self.T}")
        if not self.tau >= 0.0:
            raise ConfigurationError(f"tau must be non-negative, got {self.tau}")
        if not self.tol >= 0.0:
            raise ConfigurationError(f"tol must be non-negative, got {self.tol}")


@dataclass
class DflowResult:
    """Outcome of one optimization run.

    ``x0``/``x1``/``loss`` describe the best iterate; ``first_x1`` is the
    terminal design of the very first solve.  In a batch, ``wall_time`` is
    the batch wall clock divided evenly over its runs.
    """

    x0: np.ndarray
    x1: np.ndarray
    loss: float
    loss_history: list
    iterations: int
    converged: bool
    wall_time: float
    first_x1: np.ndarray = None
    failed: bool = False
    steps_per_solve: int = 0
    tau_final: float = 0.0


def reverse_sweep(model, caches, terminal_cotangent, dt):
    """Pull a cotangent back through cached Euler steps (design coordinates only)."""
    v = np.asarray(terminal_cotangent, dtype=float)
    d = v.shape[-1]
    net = model.network_
    for cache in reversed(caches):
        v = v + dt * nncore.net_vjp_input(net, cache, v)[:, :d]
    return v


def unrolled_vjp(model, T, x0, terminal_cotangent, condition=None, caches=None):
    """``(d x1 / d x0)^T @ terminal_cotangent`` for the ``T``-step Euler map.

    The forward trajectory is recomputed unless ``caches`` from a previous
    solve are supplied.
    """
    x0 = np.asarray(x0, dtype=float)
    squeeze = x0.ndim == 1
    v = np.atleast_2d(np.asarray(terminal_cotangent, dtype=float))
    if v.shape[-1] != model.n_features_in_:
        raise ShapeError(f"cotangent width {v.shape[-1]} != design dimension {model.n_features_in_}")
    if caches is None:
        _, caches = euler_states(model, T, x0, condition, keep_caches=True)
    if len(caches) != T:
        raise ConfigurationError(f"need {T} cached forward steps, got {len(caches)}")
    out = reverse_sweep(model, caches, v, 1.0 / T)
    return out[0] if squeeze else out


def _optimize(model, loss_fn, x0, config, condition=None):
    """Vectorized core: rows are independent runs sharing one iteration loop."""
    z0 = np.array(np.atleast_2d(x0), dtype=float)
    n, d = z0.shape
    T, K = int(config.T), int(config.K)
    std = model.x_std_
    tau = np.full(n, float(config.tau))
    halved = np.zeros(n, dtype=bool)
    running = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    failed = np.zeros(n, dtype=bool)
    used = np.zeros(n, dtype=int)
    history = [[] for _ in range(n)]
    best_loss = np.full(n, np.inf)
    best_x0 = z0.copy()
    best_x1 = np.full((n, d), np.nan)
    first_x1 = np.full((n, d), np.nan)

    for k in range(1, K + 1):
        rows = np.flatnonzero(running)
        if len(rows) == 0:
            break
        states, caches = euler_states(model, T, z0[rows], condition, keep_caches=True)
        x1 = model.denormalize(states[-1])
        L, g_raw = loss_fn(x1)
        L = np.atleast_1d(L)
        used[rows] = k
        for j, r in enumerate(rows):
            history[r].append(float(L[j]))
        if k == 1:
            first_x1[rows] = x1
        better = L < best_loss[rows]
        best_loss[rows[better]] = L[better]
        best_x0[rows[better]] = z0[rows[better]]
        best_x1[rows[better]] = x1[better]

        done = L <= config.tol
        converged[rows[done]] = True
        running[rows[done]] = False
        if k == K:
            break
        step_rows = ~done
        if not step_rows.any():
            continue
        sub = rows[step_rows]
        sub_caches = [_take(c, step_rows) for c in caches] if not step_rows.all() else caches
        grad = reverse_sweep(model, sub_caches, g_raw[step_rows] * std, 1.0 / T)
        with np.errstate(over="ignore", invalid="ignore"):
            cand = z0[sub] - tau[sub, None] * grad
            bad = ~np.all(np.isfinite(cand), axis=1)
            if bad.any():
                # one retry with half the step; a second failure ends the run
                retry = bad & ~halved[sub]
                tau[sub[retry]] *= 0.5
                halved[sub[retry]] = True
                cand[retry] = z0[sub[retry]] - tau[sub[retry], None] * grad[retry]
                still = ~np.all(np.isfinite(cand), axis=1)
                dead = sub[still]
                failed[dead] = True
                running[dead] = False
                cand[still] = z0[dead]
        z0[sub] = cand

    return best_x0, best_x1, best_loss, history, used, converged, failed, first_x1, tau


def _take(cache, keep):
    mask = cache.mask
    return nncore.ForwardCache(
        [a[keep] for a in cache.activations],
        [p[keep] for p in cache.preactivations],
        mask,
        cache.squeeze,
    )


def _results(out, elapsed, T):
    best_x0, best_x1, best_loss, history, used, converged, failed, first_x1, tau = out
    n = len(best_x0)
    return [
        DflowResult(
            x0=best_x0[i],
            x1=best_x1[i],
            loss=float(best_loss[i]),
            loss_history=history[i],
            iterations=int(used[i]),
            converged=bool(converged[i]),
            wall_time=elapsed / n,
            first_x1=first_x1[i],
            failed=bool(failed[i]),
            steps_per_solve=T,
            tau_final=float(tau[i]),
        )
        for i in range(n)
    ]


def dflow_sur(model, loss_fn, x0_init, config=None, condition=None):
    """Optimize one standardized initial noise ``x0_init`` (shape ``(d,)``)."""
    config = config or DflowConfig()
    x0_init = np.asarray(x0_init, dtype=float)
    if x0_init.ndim != 1:
        raise ShapeError("dflow_sur optimizes a single noise vector; use dflow_batch for many")
    start = time.perf_counter()
    out = _optimize(model, loss_fn, x0_init[None, :], config, condition)
    return _results(out, time.perf_counter() - start, config.T)[0]


def initial_noises(n, d, seed):
    """One ``N(0, I)`` draw per run, each from its own child seed stream."""
    if n < 1:
        raise ConfigurationError("batch needs at least one run")
    children = np.random.SeedSequence(seed).spawn(n)
    return np.stack([np.random.default_rng(s).standard_normal(d) for s in children])


def dflow_batch(model, loss_fn, n, config=None, seed=0, condition=None, x0=None):
    """``n`` independent runs from per-run noises; failures are returned, not raised."""
    config = config or DflowConfig()
    x0 = initial_noises(n, model.n_features_in_, seed) if x0 is None else np.atleast_2d(x0)
    start = time.perf_counter()
    out = _optimize(model, loss_fn, x0, config, condition)
    return _results(out, time.perf_counter() - start, config.T)
