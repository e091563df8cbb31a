"""CST airfoil parameterization and the synthetic design corpus.

A design is 16 numbers: eight Bernstein coefficients for the upper surface
followed by eight for the lower surface.  Both surfaces share the class
function ``psi**0.5 * (1 - psi)`` (round nose, sharp trailing edge, zero
trailing-edge thickness).  Lower-surface coefficients are used as-is, so a
conventional airfoil has negative lower coefficients.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from math import comb
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, DomainError, GenerationError

logger = logging.getLogger(__name__)

N_COEF = 8
N_DESIGN = 2 * N_COEF
ORDER = N_COEF - 1
N1, N2 = 0.5, 1.0
N_CHECK_STATIONS = 128
THICKNESS_BOUNDS = (0.02, 0.30)
COEF_BOUND = 1.5
COLUMNS = [f"upper{i}" for i in range(N_COEF)] + [f"lower{i}" for i in range(N_COEF)]

_BINOM = np.array([comb(ORDER, i) for i in range(N_COEF)], dtype=float)
_BINOM_D = np.array([comb(ORDER - 1, i) for i in range(N_COEF - 1)], dtype=float)

# Hand-picked bases spanning thin/thick sections and low/high camber.
# Rows are (upper coefficients, lower coefficients).
BASE_DESIGNS = np.array(
    [
        # thin symmetric
        [0.14, 0.13, 0.13, 0.12, 0.12, 0.11, 0.10, 0.10,
         -0.14, -0.13, -0.13, -0.12, -0.12, -0.11, -0.10, -0.10],
        # moderate thickness, mild camber
        [0.20, 0.22, 0.23, 0.22, 0.22, 0.20, 0.19, 0.18,
         -0.20, -0.12, -0.10, -0.08, -0.06, -0.05, -0.04, -0.03],
        # thick, moderate camber
        [0.26, 0.30, 0.33, 0.34, 0.34, 0.33, 0.31, 0.28,
         -0.26, -0.14, -0.10, -0.06, -0.04, -0.02, 0.00, 0.02],
        # thin, high camber
        [0.22, 0.28, 0.32, 0.35, 0.36, 0.36, 0.35, 0.33,
         -0.22, 0.00, 0.06, 0.10, 0.13, 0.15, 0.16, 0.16],
        # thick, high camber
        [0.30, 0.38, 0.44, 0.48, 0.50, 0.50, 0.48, 0.45,
         -0.30, -0.04, 0.04, 0.10, 0.14, 0.17, 0.19, 0.20],
    ]
)


@dataclass
class AirfoilSurface:
    stations: np.ndarray
    upper: np.ndarray
    lower: np.ndarray

    @property
    def thickness(self):
        return self.upper - self.lower

    @property
    def camber(self):
        return 0.5 * (self.upper + self.lower)


@dataclass
class ValidityReport:
    valid: bool
    reasons: list[str] = field(default_factory=list)
    max_thickness: float = float("nan")

    def __bool__(self):
        return self.valid


@dataclass
class DesignDataset:
    """Designs with their per-column normalization statistics."""

    designs: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    acceptance_rate: float = 1.0

    def __len__(self):
        return len(self.designs)

    @classmethod
    def from_designs(cls, designs, acceptance_rate=1.0):
        designs = np.asarray(designs, dtype=float)
        mean = designs.mean(axis=0)
        std = designs.std(axis=0)
        return cls(designs, mean, std, acceptance_rate)

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean


def split_design(design):
    design = np.asarray(design, dtype=float)
    if design.shape[-1] != N_DESIGN:
        raise DomainError(f"design must have {N_DESIGN} coefficients, got shape {design.shape}")
    return design[..., :N_COEF], design[..., N_COEF:]


def _check_stations(psi):
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    if np.any(~np.isfinite(psi)) or np.any(psi < 0.0) or np.any(psi > 1.0):
        raise DomainError("chordwise stations must lie in [0, 1]")
    return psi


def bernstein_basis(psi):
    """Degree-7 Bernstein polynomials, shape ``(8, len(psi))``."""
    i = np.arange(N_COEF)[:, None]
    return _BINOM[:, None] * psi[None, :] ** i * (1.0 - psi[None, :]) ** (ORDER - i)


def class_function(psi):
    return psi**N1 * (1.0 - psi) ** N2


def shape_basis(psi):
    """``C(psi) * B_i(psi)``; a surface is ``coefficients @ shape_basis``."""
    psi = _check_stations(psi)
    return class_function(psi)[None, :] * bernstein_basis(psi)


def shape_slope_basis(psi):
    """d/dpsi of :func:`shape_basis`; requires ``0 < psi < 1``."""
    psi = np.asarray(psi, dtype=float)
    if np.any(psi <= 0.0) or np.any(psi >= 1.0):
        raise DomainError("slope is singular at the leading and trailing edge")
    B = bernstein_basis(psi)
    C = class_function(psi)
    dC = N1 * psi ** (N1 - 1.0) * (1.0 - psi) ** N2 - N2 * psi**N1 * (1.0 - psi) ** (N2 - 1.0)
    # dB_i = 7 * (B_{i-1,6} - B_{i,6})
    j = np.arange(N_COEF - 1)[:, None]
    B6 = _BINOM_D[:, None] * psi[None, :] ** j * (1.0 - psi[None, :]) ** (ORDER - 1 - j)
    dB = np.zeros_like(B)
    dB[1:] += ORDER * B6
    dB[:-1] -= ORDER * B6
    return dC[None, :] * B + C[None, :] * dB


def cst_evaluate(design, stations):
    """Upper and lower ordinates of ``design`` at chordwise ``stations``."""
    psi = _check_stations(stations)
    upper, lower = split_design(design)
    basis = shape_basis(psi)
    return AirfoilSurface(psi, upper @ basis, lower @ basis)


def glauert_abscissae(theta):
    return 0.5 * (1.0 - np.cos(theta))


def camber_slope(design, theta_nodes):
    """Analytic camber-line slope ``dz_c/dx`` at ``x = (1 - cos(theta)) / 2``."""
    theta = np.atleast_1d(np.asarray(theta_nodes, dtype=float))
    if np.any(theta <= 0.0) or np.any(theta >= np.pi):
        raise DomainError("theta nodes must lie in the open interval (0, pi)")
    upper, lower = split_design(design)
    return 0.5 * (upper + lower) @ shape_slope_basis(glauert_abscissae(theta))


_CHECK_PSI = 0.5 * (1.0 - np.cos(np.linspace(0.0, np.pi, N_CHECK_STATIONS)))
_CHECK_BASIS = shape_basis(_CHECK_PSI)


def validity_mask(designs):
    """Vectorized validity for a batch ``(n, 16)``; returns ``(valid, max_thickness)``."""
    designs = np.atleast_2d(np.asarray(designs, dtype=float))
    finite = np.all(np.isfinite(designs), axis=1)
    safe = np.where(finite[:, None], designs, 0.0)
    upper, lower = split_design(safe)
    thick = (upper - lower) @ _CHECK_BASIS
    tmax = thick.max(axis=1)
    ok = (
        finite
        & np.all(thick >= 0.0, axis=1)
        & (tmax >= THICKNESS_BOUNDS[0])
        & (tmax <= THICKNESS_BOUNDS[1])
        & np.all(np.abs(safe) <= COEF_BOUND, axis=1)
    )
    return ok, np.where(finite, tmax, np.nan)


def validate_airfoil(design):
    """Check surface ordering, thickness range and coefficient bounds."""
    design = np.asarray(design, dtype=float)
    if design.shape != (N_DESIGN,):
        return ValidityReport(False, [f"expected {N_DESIGN} coefficients, got shape {design.shape}"])
    if not np.all(np.isfinite(design)):
        return ValidityReport(False, ["non-finite coefficients"])
    upper, lower = split_design(design)
    thick = (upper - lower) @ _CHECK_BASIS
    tmax = float(thick.max())
    reasons = []
    if np.any(thick < 0.0):
        reasons.append("upper surface below lower surface")
    if not THICKNESS_BOUNDS[0] <= tmax <= THICKNESS_BOUNDS[1]:
        reasons.append(f"max thickness {tmax:.4g} outside {THICKNESS_BOUNDS}")
    if np.any(np.abs(design) > COEF_BOUND):
        reasons.append(f"coefficient magnitude exceeds {COEF_BOUND}")
    return ValidityReport(not reasons, reasons, tmax)


def synthesize_dataset(n, seed, sigma=0.05, bases=None):
    """Perturb randomly chosen base designs and keep the valid ones."""
    if n < 16:
        raise DomainError(f"dataset needs at least 16 designs, got {n}")
    bases = BASE_DESIGNS if bases is None else np.asarray(bases, dtype=float)
    rng = np.random.default_rng(seed)
    accepted = []
    n_ok = attempts = 0
    max_attempts = 100 * n
    while n_ok < n:
        if attempts >= max_attempts:
            raise GenerationError(
                f"acceptance rate {n_ok / attempts:.2%} after {attempts} draws; check the base designs"
            )
        batch = max(n - n_ok, 16)
        idx = rng.integers(len(bases), size=batch)
        cand = bases[idx] + sigma * rng.standard_normal((batch, N_DESIGN))
        ok, _ = validity_mask(cand)
        attempts += batch
        keep = cand[ok][: n - n_ok]
        accepted.append(keep)
        n_ok += len(keep)
    designs = np.concatenate(accepted)
    rate = n_ok / attempts
    logger.info("synthesized %d designs, acceptance rate %.3f", n, rate)
    return DesignDataset.from_designs(designs, rate)


def stats_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".stats.csv")


def save_dataset(dataset, path):
    """Write designs as CSV and the mean/std rows to a ``.stats.csv`` sidecar."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for row in dataset.designs:
            w.writerow([repr(float(v)) for v in row])
    with open(stats_path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["stat"] + COLUMNS)
        w.writerow(["mean"] + [repr(float(v)) for v in dataset.mean])
        w.writerow(["std"] + [repr(float(v)) for v in dataset.std])


def load_dataset(path):
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != COLUMNS:
            raise CheckpointError(f"{path}: header does not match the 16 CST columns")
        designs = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        if designs.ndim != 2 or designs.shape[1] != N_DESIGN:
            raise CheckpointError(f"{path}: expected {N_DESIGN} columns per row")
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    sidecar = stats_path(path)
    if sidecar.exists():
        with open(sidecar, newline="", encoding="utf-8") as fh:
            stats = {r[0]: np.array([float(v) for v in r[1:]]) for r in list(csv.reader(fh))[1:] if r}
        return DesignDataset(designs, stats["mean"], stats["std"])
    return DesignDataset.from_designs(designs)
