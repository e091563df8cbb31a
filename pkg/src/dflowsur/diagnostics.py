"""Analysis instruments for generation runs.

* alignment between the learned velocity and the physics update direction,
* MC-dropout uncertainty of intermediate designs along trajectories,
* the gap between the loss a guided sampler reaches and the loss it was
  asked to reach.

Everything here is a pure function of its inputs and an explicit RNG.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, ShapeError
from .physics import surrogate_uq

NORM_FLOOR = 1e-12

# Sign convention for the physics direction g^p.  "guidance" uses the step
# actually applied by the guided drift (-grad L), so a negative score means
# the velocity pushes against the physics update.  "gradient" uses +grad L.
ALIGN_CONVENTION = "guidance"
_CONVENTIONS = {"guidance": -1.0, "gradient": 1.0}


@dataclass
class AlignmentSeries:
    """Per-step alignment scores, ``(n_steps, n_samples)``; undefined entries are NaN."""

    times: np.ndarray
    scores: np.ndarray
    defined: np.ndarray
    convention: str = ALIGN_CONVENTION

    def fraction_negative(self, t_min=None):
        """Share of defined scores below zero, optionally for ``t > t_min`` only."""
        keep = self.defined.copy()
        if t_min is not None:
            keep &= (self.times > t_min)[:, None]
        if not keep.any():
            return float("nan")
        return float(np.mean(self.scores[keep] < 0.0))

    def rows(self, run_id=0):
        for i, t in enumerate(self.times):
            for j in range(self.scores.shape[1]):
                yield run_id, i, t, self.scores[i, j], bool(self.defined[i, j])


@dataclass
class UqProfile:
    """``sigma[k, j]``: dropout std of sample ``j`` at profiled step ``steps[k]``."""

    steps: np.ndarray
    times: np.ndarray
    sigma: np.ndarray
    reference: float
    n_passes: int

    @property
    def batch_size(self):
        return self.sigma.shape[1]

    def mean_sigma(self, t_max=None):
        keep = np.ones(len(self.times), dtype=bool) if t_max is None else self.times <= t_max
        return float(self.sigma[keep].mean())

    def ratio(self, t_max=None):
        return self.mean_sigma(t_max) / self.reference


@dataclass
class AsyncGapReport:
    L_uncon: float
    L_achieved: float
    L_desired: float
    gap: float
    synchronized: bool
    failed: bool = False


def alignment_score(g_v, g_p):
    """Cosine similarity along the last axis; NaN where either norm < 1e-12."""
    g_v = np.asarray(g_v, dtype=float)
    g_p = np.asarray(g_p, dtype=float)
    if g_v.shape != g_p.shape:
        raise ShapeError(f"gradient shapes differ: {g_v.shape} vs {g_p.shape}")
    nv = np.linalg.norm(g_v, axis=-1)
    npp = np.linalg.norm(g_p, axis=-1)
    ok = (nv >= NORM_FLOOR) & (npp >= NORM_FLOOR)
    with np.errstate(invalid="ignore", divide="ignore"):
        score = np.sum(g_v * g_p, axis=-1) / (nv * npp)
    score = np.where(ok, np.clip(score, -1.0, 1.0), np.nan)
    return float(score) if score.ndim == 0 else score


def trajectory_alignment(model, loss_fn, trajectory, t_c=None, condition=None, convention=None):
    """Alignment of ``u(x_i, t_i)`` with the physics direction at every step.

    Both vectors live in standardized coordinates; the loss gradient is
    mapped there by the per-column std.  With ``t_c`` only the steps with
    ``t_i >= t_c`` are reported.
    """
    convention = convention or ALIGN_CONVENTION
    if convention not in _CONVENTIONS:
        raise ConfigurationError(f"unknown alignment convention {convention!r}")
    states = np.asarray(trajectory.states, dtype=float)
    if states.ndim == 2:
        states = states[:, None, :]
    T = len(states) - 1
    times = np.arange(T) / T
    keep = np.ones(T, dtype=bool) if t_c is None else times >= t_c - 1e-12
    steps = np.flatnonzero(keep)
    scores = np.full((len(steps), states.shape[1]), np.nan)
    sign = _CONVENTIONS[convention]
    for k, i in enumerate(steps):
        z = states[i]
        live = np.all(np.isfinite(z), axis=1)
        if not live.any():
            continue
        u = model.velocity(z[live], times[i], condition)
        _, g_raw = loss_fn(model.denormalize(z[live]))
        scores[k, live] = alignment_score(u, sign * g_raw * model.x_std_)
    return AlignmentSeries(times[steps], scores, np.isfinite(scores), convention)


def profile_steps(T, n_steps=12):
    """``n_steps`` evenly spaced state indices from 0 to ``T`` inclusive."""
    if n_steps < 1:
        raise ConfigurationError("need at least one profiling step")
    return np.unique(np.round(np.linspace(0, T, min(n_steps, T + 1))).astype(int))


def reference_uq(surrogate, designs, n_passes=20, rate=0.01, rng=None):
    """Mean dropout std over reference designs (the dataset baseline)."""
    return float(np.mean(surrogate_uq(surrogate, designs, n_passes, rate, rng).sigma))


def trajectory_uq_profile(
    surrogate, trajectories, n_passes=20, rate=0.01, rng=None, reference_designs=None, steps=12, denormalize=None
):
    """Dropout std of de-normalized intermediates at selected steps.

    Parameters
    ----------
    surrogate : DropoutSurrogate
    trajectories : Trajectory or list of Trajectory
        All must share one time grid; their samples are pooled.
    n_passes, rate : int, float
        MC-dropout settings.
    rng : numpy.random.Generator, optional
        Parent stream; each profiled step and the reference get their own
        spawned child.
    reference_designs : ndarray, optional
        Designs defining the reference line.  Without them the reference is NaN.
    steps : int or array_like
        Number of evenly spaced steps, or explicit state indices.
    denormalize : callable, optional
        Maps standardized states to designs (typically ``model.denormalize``).
    """
    if n_passes < 2:
        raise ConfigurationError("UQ profiling needs at least two passes")
    trajs = trajectories if isinstance(trajectories, (list, tuple)) else [trajectories]
    grid = np.asarray(trajs[0].times)
    for tr in trajs[1:]:
        if len(tr.times) != len(grid) or not np.allclose(tr.times, grid):
            raise ConfigurationError("trajectories do not share a time grid")
    T = len(grid) - 1
    idx = profile_steps(T, steps) if np.isscalar(steps) else np.asarray(steps, dtype=int)
    if np.any(idx < 0) or np.any(idx > T):
        raise ConfigurationError(f"profiling steps must lie in [0, {T}]")
    rng = rng if rng is not None else np.random.default_rng(0)
    ref_rng, *step_rngs = rng.spawn(len(idx) + 1)
    to_design = denormalize if denormalize is not None else (lambda z: z)

    def pooled(i):
        parts = [np.asarray(tr.states)[i] for tr in trajs]
        return np.concatenate([np.atleast_2d(p) for p in parts])

    sigma = np.stack(
        [np.atleast_1d(surrogate_uq(surrogate, to_design(pooled(i)), n_passes, rate, r).sigma) for i, r in zip(idx, step_rngs)]
    )
    ref = float("nan") if reference_designs is None else reference_uq(surrogate, reference_designs, n_passes, rate, ref_rng)
    return UqProfile(idx, grid[idx], sigma, ref, n_passes)


def _median_final(runs):
    """Median terminal loss of a run set, ignoring Fail entries."""
    losses = []
    for r in runs if isinstance(runs, (list, tuple)) else [runs]:
        L = getattr(r, "loss", r)
        L = np.asarray(L, dtype=float)
        # per-step loss records (trajectories) contribute their last row
        if L.ndim == 2 or (hasattr(r, "states") and L.ndim == 1):
            L = L[-1]
        losses.append(np.atleast_1d(L))
    losses = np.concatenate(losses) if losses else np.array([])
    losses = losses[np.isfinite(losses)]
    return float(np.median(losses)) if len(losses) else float("nan")


def _empty(runs):
    return runs is None or (hasattr(runs, "__len__") and len(runs) == 0)


def async_gap(guided_runs, unconditional_runs, desired_loss):
    """Aggregate guided and unconditional terminal losses into a gap report.

    ``guided_runs`` / ``unconditional_runs`` are guided trajectories, Dflow
    results, or plain arrays of terminal losses (NaN marks a Fail).
    """
    if _empty(guided_runs) or _empty(unconditional_runs):
        raise ConfigurationError("both run sets must be non-empty")
    L_u = _median_final(unconditional_runs)
    L_a = _median_final(guided_runs)
    desired = float(desired_loss)
    if not np.isfinite(L_a):
        return AsyncGapReport(L_u, float("nan"), desired, float("nan"), False, failed=True)
    gap = L_a - desired
    return AsyncGapReport(L_u, L_a, desired, gap, bool(gap <= 0.0))


def write_alignment_table(series, path, run_id=0):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "step", "t", "score", "defined"])
        for run, step, t, s, ok in series.rows(run_id) if series is not None else []:
            w.writerow([run, step, f"{t:.6g}", f"{s:.6g}" if ok else "", int(ok)])
    return Path(path)


def write_uq_table(profile, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "sample_id", "sigma"])
        if profile is not None:
            for k, (i, t) in enumerate(zip(profile.steps, profile.times)):
                for j, s in enumerate(profile.sigma[k]):
                    w.writerow([int(i), f"{t:.6g}", j, f"{s:.6g}"])
    return Path(path)


def write_gap_table(reports, path):
    """``reports`` maps strategy name to :class:`AsyncGapReport`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "L_uncon", "L_achieved", "L_desired", "synchronized"])
        for name, r in (reports or {}).items():
            achieved = "Fail" if r.failed else f"{r.L_achieved:.6g}"
            w.writerow([name, f"{r.L_uncon:.6g}", achieved, f"{r.L_desired:.6g}", int(r.synchronized)])
    return Path(path)
