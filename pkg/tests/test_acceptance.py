"""Acceptance criteria, one test each.

Every test records a single ``criterion N [PASS|FAIL] ...`` line (printed in
the terminal summary) before asserting, so a failing criterion still reports
its measured numbers.  Tolerances are the contract values; none are relaxed.
"""

import time

import numpy as np
import pytest

from dflowsur import nncore
from dflowsur.dflow import DflowConfig, dflow_batch, dflow_sur, initial_noises, unrolled_vjp
from dflowsur.diagnostics import trajectory_alignment, trajectory_uq_profile
from dflowsur.flowmatch import euler_states, sample_unconditional
from dflowsur.geometry import validity_mask
from dflowsur.guidance import GuidanceConfig, sample_energy_guided
from dflowsur.harness import ExperimentConfig, run_experiment
from dflowsur.harness.experiment import Resources
from dflowsur.physics import (
    OperatingPoint,
    OracleEvaluator,
    PhysicalLoss,
    oracle_cl,
    oracle_cl_gradient,
    surrogate_uq,
    thin_airfoil_cl,
)

from conftest import ACCEPTANCE_LINES

TARGET = 0.7
OP = OperatingPoint(np.deg2rad(2.0))
ORACLE_LOSS = PhysicalLoss(OracleEvaluator(OP), TARGET)
N_MATCHED = 20
SEED = 0
SWEEP_TC = [0.0, 0.2, 0.6, 0.8]
SWEEP_T = [200, 1000, 2000]


def record(k, ok, title, detail):
    line = f"criterion {k:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)
    return ok


def _resources(model):
    return Resources(model=model, loss_fn=ORACLE_LOSS, op_point=OP)


@pytest.fixture(scope="module")
def x0_matched():
    return initial_noises(N_MATCHED, 16, SEED)


@pytest.fixture(scope="module")
def headline(flow):
    """Energy sweep at lam = 10 plus Dflow-SUR, from one shared noise batch."""
    cfg = ExperimentConfig(
        strategy=["energy", "dflow"],
        n=N_MATCHED,
        seed=SEED,
        params={"energy.lam": [10.0], "energy.t_c": SWEEP_TC, "energy.T": SWEEP_T},
    )
    return run_experiment(cfg, _resources(flow), write=False)


@pytest.fixture(scope="module")
def dflow_runs(flow, x0_matched):
    return dflow_batch(flow, ORACLE_LOSS, N_MATCHED, DflowConfig(), x0=x0_matched)


def _median_loss(row):
    v = row.losses[~row.failed]
    return float(np.median(v)) if len(v) else float("nan")


# 1 -----------------------------------------------------------------------


def _param_fd_rel_err(params, x, cot, rng, per_array=30, h=1e-5):
    _, cache = nncore.net_forward(params, x)
    grads = nncore.net_backward_params(params, cache, cot).arrays()
    arrays = [a.copy() for a in params.arrays()]
    worst = 0.0
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        pick = rng.choice(flat.size, size=min(per_array, flat.size), replace=False)
        fd = np.empty(len(pick))
        for j, i in enumerate(pick):
            old = flat[i]
            flat[i] = old + h
            fp = np.sum(nncore.net_forward(nncore.NetworkParams.from_arrays(params, arrays), x)[0] * cot)
            flat[i] = old - h
            fm = np.sum(nncore.net_forward(nncore.NetworkParams.from_arrays(params, arrays), x)[0] * cot)
            flat[i] = old
            fd[j] = (fp - fm) / (2 * h)
        g = grads[k].reshape(-1)[pick]
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-300))
    return worst


def test_criterion_01_gradient_exactness(flow):
    start = time.perf_counter()
    net_err, vjp_err = 0.0, {10: 0.0, 50: 0.0}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for sizes in ([17, 128, 128, 16], [16, 64, 64, 1]):
            p = nncore.net_init(sizes, seed=seed)
            for b in p.biases:
                b[:] = 0.1 * rng.standard_normal(b.shape)
            x = rng.standard_normal((4, sizes[0]))
            cot = rng.standard_normal((4, sizes[-1]))
            net_err = max(net_err, _param_fd_rel_err(p, x, cot, rng))
        for T in (10, 50):
            z0, v, w = rng.standard_normal((3, 16))
            g = unrolled_vjp(flow, T, z0, v)
            h = 1e-5
            fp = euler_states(flow, T, z0 + h * w)[0][-1].ravel() @ v
            fm = euler_states(flow, T, z0 - h * w)[0][-1].ravel() @ v
            fd = (fp - fm) / (2 * h)
            vjp_err[T] = max(vjp_err[T], abs(g @ w - fd) / abs(fd))
    elapsed = time.perf_counter() - start
    ok = net_err < 1e-4 and max(vjp_err.values()) < 1e-3 and elapsed < 60
    record(
        1,
        ok,
        "gradient exactness",
        f"max per-parameter rel err {net_err:.2e} (<1e-4), unrolled VJP rel err "
        f"T=10 {vjp_err[10]:.2e}, T=50 {vjp_err[50]:.2e} (<1e-3), 20 seeds, {elapsed:.1f} s (<60 s)",
    )
    assert ok


# 2 -----------------------------------------------------------------------


def test_criterion_02_aerodynamic_oracle():
    start = time.perf_counter()
    flat = float(oracle_cl(np.zeros(16), OP))
    eps = 0.02
    parab = thin_airfoil_cl(lambda th: 4 * eps * np.cos(th), OperatingPoint(0.0))
    rng = np.random.default_rng(0)
    X = rng.uniform(-0.5, 0.5, (100, 16))
    A = np.c_[X, np.ones(100)]
    coef, *_ = np.linalg.lstsq(A, oracle_cl(X, OP), rcond=None)
    resid = float(np.max(np.abs(A @ coef - oracle_cl(X, OP))))
    # the fitted slope is the analytic gradient
    slope_err = float(np.max(np.abs(coef[:16] - oracle_cl_gradient(OP))))
    elapsed = time.perf_counter() - start
    ok = abs(flat - 0.219325) <= 1e-6 and abs(parab - 0.251327) <= 1e-4 and resid < 1e-10 and elapsed < 10
    record(
        2,
        ok,
        "aerodynamic oracle",
        f"flat plate {flat:.7f} (0.219325 +- 1e-6), parabolic camber {parab:.6f} (0.251327 +- 1e-4), "
        f"affine residual {resid:.1e} (<1e-10), slope vs gradient {slope_err:.1e}, {elapsed:.2f} s",
    )
    assert ok


# 3 -----------------------------------------------------------------------


def test_criterion_03_flow_quality(flow, dataset):
    S = flow.sample(n_samples=200, n_steps=200, random_state=SEED).terminal
    mu, sd = dataset.designs.mean(0), dataset.designs.std(0)
    # 15% of the mean where it is away from zero, of the spread otherwise
    mean_dev = float(np.max(np.abs(S.mean(0) - mu) / np.maximum(np.abs(mu), sd)))
    std_dev = float(np.max(np.abs(S.std(0) / sd - 1)))
    valid = float(validity_mask(S)[0].mean())
    ok = mean_dev <= 0.15 and std_dev <= 0.15 and valid >= 0.9
    record(
        3,
        ok,
        "flow quality",
        f"max |mean dev| / max(|mu|, sigma) {mean_dev:.3f} (<=0.15), max |std ratio - 1| {std_dev:.3f} (<=0.15), "
        f"validity {valid:.3f} (>=0.90); n=200, T=200, seed {SEED}",
    )
    assert ok


# 4 -----------------------------------------------------------------------


def test_criterion_04_headline_comparison(headline):
    energy = [r for r in headline.rows if r.strategy == "energy"]
    dflow = headline.row("dflow")
    best = min(energy, key=_median_loss)
    L_d, L_e = _median_loss(dflow), _median_loss(best)
    t1000 = [r.wall_time for r in energy if r.params["T"] == 1000]
    t_ref = float(np.mean(t1000))
    ok_loss = L_d <= 1e-6 and L_d * 100 <= L_e
    ok_time = dflow.wall_time <= t_ref
    record(
        4,
        ok_loss and ok_time,
        "headline comparison",
        f"Dflow median L {L_d:.2e} (<=1e-6), best energy {best.label} median L {L_e:.2e} "
        f"(ratio {L_e / L_d:.1e}, >=100); wall time Dflow {dflow.wall_time:.2f} s vs energy T=1000 "
        f"{t_ref:.2f} s (rows {', '.join(f'{t:.2f}' for t in t1000)}) -> loss clause "
        f"{'PASS' if ok_loss else 'FAIL'}, time clause {'PASS' if ok_time else 'FAIL'}",
    )
    assert ok_loss and ok_time


# 5 -----------------------------------------------------------------------


def test_criterion_05_constraint_accuracy(headline):
    row = headline.row("dflow")
    err = abs(row.cl_mean - TARGET)
    ok = err <= 0.005 and row.n_fail == 0
    record(5, ok, "constraint accuracy", f"Dflow mean C_L {row.cl_mean:.5f}, |error| {err:.2e} (<=0.005), fails {row.n_fail}/{row.n}")
    assert ok


# 6 -----------------------------------------------------------------------


def test_criterion_06_gradient_collision(flow, x0_matched):
    tr = sample_energy_guided(flow, ORACLE_LOSS, GuidanceConfig(lam=10.0, t_c=0.0, T=1000), x0_matched)
    series = trajectory_alignment(flow, ORACLE_LOSS, tr, t_c=0.0)
    frac = series.fraction_negative(t_min=0.2)
    ok = frac >= 0.6
    record(
        6,
        ok,
        "gradient collision",
        f"{frac:.1%} of defined scores negative for t>0.2 (>=60%), {int(series.defined.sum())} defined, "
        f"convention {series.convention} (physics direction = -grad L)",
    )
    assert ok


# 7 -----------------------------------------------------------------------


def test_criterion_07_uq_ordering(flow, surrogate, dataset, x0_matched, dflow_runs):
    tr = sample_unconditional(flow, 200, x0_matched)
    prof = trajectory_uq_profile(
        surrogate,
        tr,
        n_passes=20,
        rate=0.01,
        rng=np.random.default_rng(SEED),
        reference_designs=dataset.designs,
        steps=12,
        denormalize=flow.denormalize,
    )
    early = prof.ratio(t_max=0.3)
    rng_first, rng_final = np.random.default_rng(SEED).spawn(2)
    first = np.array([r.first_x1 for r in dflow_runs])
    final = np.array([r.x1 for r in dflow_runs if not r.failed])
    r_first = surrogate_uq(surrogate, first, 20, 0.01, rng_first).sigma.mean() / prof.reference
    r_final = surrogate_uq(surrogate, final, 20, 0.01, rng_final).sigma.mean() / prof.reference
    per_step = ", ".join(f"t={t:.2f}:{s / prof.reference:.2f}" for t, s in zip(prof.times, prof.sigma.mean(1)) if t <= 0.3)
    ok = early >= 2.0 and r_first <= 1.5 and r_final <= 1.5
    record(
        7,
        ok,
        "UQ ordering",
        f"unconditional t<=0.3 sigma / reference {early:.2f} (>=2; per step {per_step}); Dflow first "
        f"{r_first:.2f}, final {r_final:.2f} (<=1.5); reference sigma {prof.reference:.2e}",
    )
    assert ok


# 8 -----------------------------------------------------------------------


def _pairwise_variance(X):
    X = X[np.all(np.isfinite(X), axis=1)]
    # mean squared distance over distinct pairs = 2 * trace of the sample covariance
    return float(2 * np.sum(X.var(axis=0, ddof=1)))


def test_criterion_08_lambda_sensitivity(flow):
    x0 = initial_noises(200, 16, SEED)

    def run(lam):
        return sample_energy_guided(flow, ORACLE_LOSS, GuidanceConfig(lam=lam, t_c=0.6, T=1000), x0)

    lo, hi = run(1.0), run(1000.0)
    med_lo = np.median(np.abs(oracle_cl(lo.terminal[~lo.failed], OP) - TARGET))
    med_hi = np.median(np.abs(oracle_cl(hi.terminal[~hi.failed], OP) - TARGET))
    # The energy's curvature along its only active direction, in standardized
    # coordinates, is h = 2 |grad C_L * std|^2.  lam = 1e4 is rescaled by 1/h so
    # that lam * dt * h > 1 holds in the units the sampler actually steps in.
    h = 2.0 * float(np.sum((oracle_cl_gradient(OP) * flow.x_std_) ** 2))
    raw = run(1e4)
    scaled_lam = 1e4 / h
    scaled = run(scaled_lam)
    fail_raw, fail_scaled = raw.failed.mean(), scaled.failed.mean()
    v_lo, v_hi = _pairwise_variance(lo.terminal), _pairwise_variance(hi.terminal)
    ok = med_lo >= 10 * med_hi and fail_scaled >= 0.5 and v_hi <= 0.5 * v_lo
    record(
        8,
        ok,
        "lambda sensitivity",
        f"median |C_L-0.7| lam=1 {med_lo:.3e} vs lam=1000 {med_hi:.3e} (ratio {med_lo / med_hi:.1f}, >=10); "
        f"Fail share lam=1e4 unscaled {fail_raw:.0%}, scaled to {scaled_lam:.3g} (lam*dt*h={scaled_lam * h / 1000:.1f}) "
        f"{fail_scaled:.0%} (>=50%); pairwise variance lam=1000 / lam=1 {v_hi / v_lo:.2f} (<=0.5)",
    )
    assert ok


# 9 -----------------------------------------------------------------------


def _strip_wall_time(text):
    import csv
    import io

    rows = list(csv.reader(io.StringIO(text)))
    k = rows[0].index("wall_time")
    return [r[:k] + r[k + 1 :] for r in rows]


def test_criterion_09_equivalence_and_determinism(flow, x0_matched, tmp_path):
    import json

    ref = sample_unconditional(flow, 200, x0_matched)
    lam0 = sample_energy_guided(flow, ORACLE_LOSS, GuidanceConfig(lam=0.0, T=200), x0_matched)
    tc1 = sample_energy_guided(flow, ORACLE_LOSS, GuidanceConfig(lam=10.0, t_c=1.0, T=200), x0_matched)
    eq_lam0 = np.array_equal(lam0.states, ref.states)
    eq_tc1 = np.array_equal(tc1.states, ref.states)
    frozen = dflow_sur(flow, ORACLE_LOSS, x0_matched[0], DflowConfig(K=5, tau=0.0))
    eq_tau0 = np.array_equal(frozen.x0, x0_matched[0]) and len(set(frozen.loss_history)) == 1

    cfg = dict(strategy=["uncond", "energy", "dflow"], n=4, seed=7, params={"energy.T": [200], "dflow.K": [20]})
    for name in ("a", "b"):
        run_experiment(ExperimentConfig(output=str(tmp_path / name), **cfg), _resources(flow))
    same = True
    for f in ("designs.csv", "alignment.csv", "uq.csv", "gap.csv"):
        same &= (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    same &= _strip_wall_time((tmp_path / "a" / "report.csv").read_text()) == _strip_wall_time(
        (tmp_path / "b" / "report.csv").read_text()
    )
    docs = [json.loads((tmp_path / n / "report.json").read_text()) for n in ("a", "b")]
    for d in docs:
        for r in d["rows"]:
            r.pop("wall_time")
    same &= docs[0] == docs[1]
    ok = eq_lam0 and eq_tc1 and eq_tau0 and same
    record(
        9,
        ok,
        "equivalence and determinism",
        f"lam=0 bit-identical {eq_lam0}, t_c=1 bit-identical {eq_tc1}, tau=0 freezes x0 {eq_tau0}, "
        f"repeated full run identical minus wall_time {same}",
    )
    assert ok


# 10 ----------------------------------------------------------------------


def test_criterion_10_conditional_row(conditional_flow, headline, x0_matched):
    tr = sample_unconditional(conditional_flow, 200, x0_matched, condition=TARGET)
    designs = tr.terminal
    cl_cond = oracle_cl(designs, OP)
    row = headline.row("dflow")
    cl_dflow = oracle_cl(row.designs[~row.failed], OP)
    # graded reading: mean over samples of the per-sample error |C_L - y|
    err_cond = float(np.mean(np.abs(cl_cond - TARGET)))
    err_dflow = float(np.mean(np.abs(cl_dflow - TARGET)))
    # the other reading, |mean C_L - y|, is reported alongside
    bias_cond = abs(float(cl_cond.mean()) - TARGET)
    bias_dflow = abs(float(cl_dflow.mean()) - TARGET)
    ok = err_cond > err_dflow
    record(
        10,
        ok,
        "conditional row",
        f"mean |C_L-0.7| conditional {err_cond:.2e} vs Dflow {err_dflow:.2e} (must be larger); "
        f"|mean C_L-0.7| conditional {bias_cond:.2e} (mean C_L {cl_cond.mean():.4f}) vs Dflow {bias_dflow:.2e}",
    )
    assert ok
