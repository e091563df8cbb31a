"""Seeded experiment runs and their aggregation into report rows."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import diagnostics as diag
from ..dflow import DflowConfig, dflow_batch, initial_noises
from ..exceptions import ConfigurationError
from ..flowmatch import euler_states
from ..geometry import load_dataset, validity_mask
from ..guidance import GuidanceConfig, sample_energy_guided
from ..physics import OperatingPoint, OracleEvaluator, PhysicalLoss, PhysicalTarget, SurrogateEvaluator, oracle_cl
from .checkpoint import load_checkpoint

logger = logging.getLogger(__name__)

ROW_FIELDS = (
    "strategy",
    "lam",
    "t_c",
    "T",
    "K",
    "tau",
    "n",
    "n_fail",
    "loss_mean",
    "loss_std",
    "cl_mean",
    "cl_std",
    "valid_rate",
    "wall_time",
)


@dataclass
class ReportRow:
    """Aggregate of one configured run.

    Loss and C_L statistics are oracle-evaluated and exclude Fail samples.
    ``designs`` keeps the terminal designs (NaN rows for Fail) in memory.
    """

    strategy: str
    params: dict
    n: int
    n_fail: int
    loss_mean: float
    loss_std: float
    cl_mean: float
    cl_std: float
    valid_rate: float
    wall_time: float
    designs: np.ndarray = None
    failed: np.ndarray = None
    losses: np.ndarray = None

    @property
    def label(self):
        inner = ",".join(f"{k}={v:g}" for k, v in self.params.items())
        return f"{self.strategy}({inner})"

    def record(self):
        """Flat mapping in :data:`ROW_FIELDS` order; absent parameters are None."""
        rec = {"strategy": self.strategy}
        for key in ("lam", "t_c", "T", "K", "tau"):
            rec[key] = self.params.get(key)
        rec.update(
            n=self.n,
            n_fail=self.n_fail,
            loss_mean=self.loss_mean,
            loss_std=self.loss_std,
            cl_mean=self.cl_mean,
            cl_std=self.cl_std,
            valid_rate=self.valid_rate,
            wall_time=self.wall_time,
        )
        return rec


@dataclass
class ExperimentReport:
    rows: list
    seed: int
    target: float
    evaluator: str
    tables: dict = field(default_factory=dict)
    gaps: dict = field(default_factory=dict)
    alignment: dict = field(default_factory=dict)
    uq: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)

    @property
    def n_samples(self):
        return sum(r.n for r in self.rows)

    @property
    def n_failed(self):
        return sum(r.n_fail for r in self.rows)

    def row(self, strategy, **params):
        """First row of ``strategy`` whose parameters match ``params``."""
        for r in self.rows:
            if r.strategy == strategy and all(r.params.get(k) == v for k, v in params.items()):
                return r
        raise KeyError(f"no {strategy} row with {params}")


@dataclass
class Resources:
    """Loaded models and the loss used for guidance."""

    model: object = None
    conditional_model: object = None
    surrogate: object = None
    dataset: object = None
    loss_fn: object = None
    op_point: OperatingPoint = None


def _require(path, what):
    if path is None:
        raise ConfigurationError(f"{what} path is not configured")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} file not found: {p}")
    return p


def load_resources(config, d=None):
    """Load only what the configured strategies and diagnostics need."""
    res = Resources(op_point=OperatingPoint(np.deg2rad(config.alpha_deg)))
    kinds = set(config.strategy)
    if kinds & {"uncond", "energy", "dflow"}:
        res.model = load_checkpoint(_require(config.model, "model"), expected_dim=d, kind="velocity")
        d = res.model.n_features_in_
    if "conditional" in kinds:
        res.conditional_model = load_checkpoint(
            _require(config.conditional_model, "conditional model"), expected_dim=d, kind="velocity"
        )
        if not res.conditional_model.conditional_:
            raise ConfigurationError(f"{config.conditional_model} is not a conditional model")
    if config.evaluator == "surrogate" or "uq" in config.diagnostics:
        res.surrogate = load_checkpoint(_require(config.surrogate, "surrogate"), expected_dim=d, kind="surrogate")
    if "uq" in config.diagnostics:
        res.dataset = load_dataset(_require(config.dataset, "dataset"))
    evaluator = OracleEvaluator(res.op_point) if config.evaluator == "oracle" else SurrogateEvaluator(res.surrogate)
    res.loss_fn = PhysicalLoss(evaluator, PhysicalTarget(config.target))
    return res


def _generate(strategy, params, res, x0, target):
    """Terminal designs ``(n, d)`` (NaN for Fail) and the Fail mask, plus extras."""
    if strategy == "energy":
        cfg = GuidanceConfig(lam=params["lam"], t_c=params["t_c"], T=params["T"], target=PhysicalTarget(target))
        tr = sample_energy_guided(res.model, res.loss_fn, cfg, x0)
        return tr.terminal, tr.failed, tr
    if strategy == "dflow":
        cfg = DflowConfig(K=params["K"], tau=params["tau"], T=params["T"], tol=params["tol"], target=PhysicalTarget(target))
        out = dflow_batch(res.model, res.loss_fn, len(x0), cfg, x0=x0)
        failed = np.array([r.failed for r in out])
        x1 = np.array([r.x1 for r in out])
        x1[failed] = np.nan
        return x1, failed, out
    model, condition = (res.model, None) if strategy == "uncond" else (res.conditional_model, target)
    with np.errstate(over="ignore", invalid="ignore"):
        states, _ = euler_states(model, params["T"], x0, condition)
    x1 = model.denormalize(states[-1])
    failed = ~np.all(np.isfinite(x1), axis=1)
    x1[failed] = np.nan
    return x1, failed, states


def _chunk_worker(args):
    strategy, params, res, x0, target = args
    x1, failed, _ = _generate(strategy, params, res, x0, target)
    return x1, failed


def _generate_parallel(strategy, params, res, x0, target, workers):
    chunks = np.array_split(x0, min(workers, len(x0)))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_chunk_worker, [(strategy, params, res, c, target) for c in chunks]))
    # fixed concatenation order keeps the result schedule-independent
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), None


def summarize(strategy, params, designs, failed, wall_time, target, op_point=None, seed=0):
    ok = ~failed
    cl = np.full(len(designs), np.nan)
    if ok.any():
        cl[ok] = oracle_cl(designs[ok], op_point)
    losses = (cl - target) ** 2
    for i in np.flatnonzero(failed):
        logger.warning("%s%s: sample %d (seed %d) failed", strategy, params, i, seed)

    def stat(v, fn):
        v = v[ok]
        return float(fn(v)) if len(v) else float("nan")

    valid, _ = validity_mask(np.where(failed[:, None], 0.0, designs))
    return ReportRow(
        strategy,
        dict(params),
        len(designs),
        int(failed.sum()),
        stat(losses, np.mean),
        stat(losses, np.std),
        stat(cl, np.mean),
        stat(cl, np.std),
        float(np.mean(valid & ok)),
        float(wall_time),
        designs=designs,
        failed=failed,
        losses=losses,
    )


def run_experiment(config, resources=None, write=True):
    """Run every configured strategy from one shared set of initial noises.

    Wall time covers generation only.  With ``write`` the report, the
    terminal designs and any requested diagnostics tables go to the output
    directory.
    """
    res = resources or load_resources(config)
    d = (res.model or res.conditional_model).n_features_in_
    x0 = initial_noises(config.n, d, config.seed)
    rows, extras = [], []
    for strategy, params in config.runs():
        start = time.perf_counter()
        # energy trajectories feed the alignment table, so keep them in-process
        parallel = config.workers > 1 and not (strategy == "energy" and "alignment" in config.diagnostics)
        if parallel:
            designs, failed, extra = _generate_parallel(strategy, params, res, x0, config.target, config.workers)
        else:
            designs, failed, extra = _generate(strategy, params, res, x0, config.target)
        elapsed = time.perf_counter() - start
        rows.append(summarize(strategy, params, designs, failed, elapsed, config.target, res.op_point, config.seed))
        extras.append(extra)
    report = ExperimentReport(rows, config.seed, config.target, config.evaluator)
    for row, extra in zip(rows, extras):
        _keep_records(report, row, extra)
    if config.diagnostics:
        _diagnose(config, res, report, extras, x0)
    if write:
        from .report import emit_report

        emit_report(report, config.output_dir())
    return report


def _finite_rows(a, fn):
    """``fn`` over the finite entries of each row; NaN where a row has none."""
    return np.array([fn(r[np.isfinite(r)]) if np.isfinite(r).any() else np.nan for r in a])


def _keep_records(report, row, extra):
    """Per-step energy records and per-iteration Dflow losses (in-process runs only)."""
    if extra is None:
        return
    if row.strategy == "energy":
        report.traces[row.label] = {
            "t": extra.times,
            "loss": _finite_rows(extra.loss, np.median),
            "grad_norm": np.r_[_finite_rows(extra.grad_norm, np.mean), np.nan],
            "active": np.r_[extra.active, False],
        }
    elif row.strategy == "dflow":
        report.histories[row.label] = [r.loss_history for r in extra]


def _diagnose(config, res, report, extras, x0):
    uncond_cache = {}

    def uncond_losses(T):
        if T not in uncond_cache:
            designs, failed, states = _generate("uncond", {"T": T}, res, x0, config.target)
            row = summarize("uncond", {"T": T}, designs, failed, 0.0, config.target, res.op_point)
            uncond_cache[T] = (row.losses, states)
        return uncond_cache[T]

    for row, extra in zip(report.rows, extras):
        if row.strategy not in ("energy", "dflow"):
            continue
        if "gap" in config.diagnostics:
            base, _ = uncond_losses(row.params["T"])
            report.gaps[row.label] = diag.async_gap(row.losses, base, config.desired_loss)
        if "alignment" in config.diagnostics and row.strategy == "energy" and extra is not None:
            report.alignment[row.label] = diag.trajectory_alignment(res.model, res.loss_fn, extra, t_c=row.params["t_c"])
    if "uq" in config.diagnostics:
        T = max([r.params["T"] for r in report.rows if "T" in r.params] or [200])
        _, states = uncond_losses(T)
        traj = _StateView(states)
        report.uq["uncond"] = diag.trajectory_uq_profile(
            res.surrogate,
            traj,
            20,
            0.01,
            np.random.default_rng(config.seed),
            reference_designs=res.dataset.designs,
            steps=config.uq_steps,
            denormalize=res.model.denormalize,
        )


@dataclass
class _StateView:
    states: np.ndarray

    @property
    def times(self):
        return np.arange(len(self.states)) / (len(self.states) - 1)
