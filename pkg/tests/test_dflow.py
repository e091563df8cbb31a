import numpy as np
import pytest

from dflowsur.dflow import DflowConfig, dflow_batch, dflow_sur, initial_noises, unrolled_vjp
from dflowsur.exceptions import ConfigurationError, ShapeError
from dflowsur.flowmatch import euler_states
from dflowsur.physics import OracleEvaluator, PhysicalLoss

from conftest import QuadLoss, linear_model, random_model, zero_model

ORACLE_LOSS = PhysicalLoss(OracleEvaluator(), 0.7)


class _Rigged:
    """Constant loss with a fixed (possibly huge) gradient."""

    def __init__(self, g):
        self.g = np.asarray(g, dtype=float)

    def __call__(self, x):
        x = np.atleast_2d(x)
        return np.ones(len(x)), np.broadcast_to(self.g, x.shape).copy()


@pytest.mark.parametrize("T", [10, 50])
def test_vjp_matches_finite_differences(T):
    m = random_model(d=4, seed=3, scale=0.8)
    rng = np.random.default_rng(T)
    x0, v = rng.standard_normal(4), rng.standard_normal(4)
    g = unrolled_vjp(m, T, x0, v)
    h = 1e-6
    fd = np.array([
        (euler_states(m, T, x0 + h * e)[0][-1] - euler_states(m, T, x0 - h * e)[0][-1]).ravel() @ v / (2 * h)
        for e in np.eye(4)
    ])
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_vjp_zero_and_linear_networks():
    v = np.array([0.3, -1.0, 2.0])
    assert np.array_equal(unrolled_vjp(zero_model(3), 20, np.ones(3), v), v)
    A = np.array([[0.1, 0.2, 0.0], [-0.3, 0.0, 0.5], [0.0, 0.4, -0.2]])
    got = unrolled_vjp(linear_model(A), 1, np.zeros(3), v)
    assert np.allclose(got, (np.eye(3) + A).T @ v, rtol=0, atol=1e-14)
    with pytest.raises(ShapeError):
        unrolled_vjp(zero_model(3), 5, np.ones(3), np.ones(4))


def test_config_validation():
    for bad in ({"K": 0}, {"T": 0}, {"tau": -0.1}, {"tol": -1.0}, {"K": 2.5}):
        with pytest.raises(ConfigurationError):
            DflowConfig(**bad)
    with pytest.raises(ConfigurationError):
        initial_noises(0, 16, 0)


def test_infinite_tolerance_returns_unconditional_sample(flow):
    x0 = np.random.default_rng(0).standard_normal(16)
    res = dflow_sur(flow, ORACLE_LOSS, x0, DflowConfig(tol=np.inf, T=50))
    ref = flow.denormalize(euler_states(flow, 50, x0)[0][-1]).ravel()
    assert res.iterations == 1 and res.converged
    assert np.array_equal(res.x0, x0) and np.array_equal(res.x1, ref)


def test_zero_field_quadratic_closed_form():
    a = np.array([0.2, -0.4, 0.1])
    x0 = np.array([1.0, 0.5, -0.8])
    tau = 0.1
    res = dflow_sur(zero_model(3), QuadLoss(a), x0, DflowConfig(K=30, tau=tau, T=7, tol=0.0))
    L0 = np.sum((x0 - a) ** 2)
    expected = L0 * (1 - 2 * tau) ** (2 * np.arange(30))
    assert np.allclose(res.loss_history, expected, rtol=1e-12, atol=1e-300)
    assert res.loss == pytest.approx(expected[-1], rel=1e-12)


def test_zero_step_freezes_noise():
    x0 = np.array([1.0, -0.5])
    res = dflow_sur(zero_model(2), QuadLoss(np.zeros(2)), x0, DflowConfig(K=5, tau=0.0, T=3))
    assert np.array_equal(res.x0, x0)
    assert len(set(res.loss_history)) == 1


def test_early_stop_and_budget_decoupling():
    a = np.array([0.1, 0.2])
    m = zero_model(2)
    # tau = 0.5 lands exactly on the minimizer after one step
    res = dflow_sur(m, QuadLoss(a), np.zeros(2), DflowConfig(K=100, tau=0.5, T=9))
    assert res.converged and res.iterations == 2
    for T in (5, 40):
        r = dflow_sur(m, QuadLoss(a), np.ones(2), DflowConfig(K=13, tau=0.01, T=T, tol=0.0))
        assert r.iterations == 13 and r.steps_per_solve == T


def test_best_iterate_is_returned():
    # tau = 1.2 overshoots and grows the residual: the first iterate stays best
    x0 = np.array([0.5, 0.5])
    res = dflow_sur(zero_model(2), QuadLoss(np.zeros(2)), x0, DflowConfig(K=5, tau=1.2, T=2, tol=0.0))
    assert res.loss == res.loss_history[0] == min(res.loss_history)
    assert np.array_equal(res.x0, x0)


def test_batch_matches_single_and_is_deterministic(flow):
    cfg = DflowConfig(K=20, T=20)
    batch = dflow_batch(flow, ORACLE_LOSS, 3, cfg, seed=5)
    again = dflow_batch(flow, ORACLE_LOSS, 3, cfg, seed=5)
    x0 = initial_noises(3, 16, 5)
    for i, r in enumerate(batch):
        one = dflow_sur(flow, ORACLE_LOSS, x0[i], cfg)
        # batched BLAS may differ from a single solve in the last ulps
        assert np.allclose(one.x1, r.x1, rtol=0, atol=1e-12)
        assert np.allclose(one.loss_history, r.loss_history, rtol=1e-9, atol=1e-15)
        assert np.array_equal(again[i].x1, r.x1)
    n1 = dflow_batch(flow, ORACLE_LOSS, 1, cfg, seed=5)[0]
    single = dflow_sur(flow, ORACLE_LOSS, x0[0], cfg)
    assert np.array_equal(n1.x1, single.x1) and n1.loss_history == single.loss_history


def test_batch_mostly_converges(flow):
    res = dflow_batch(flow, ORACLE_LOSS, 20, DflowConfig(), seed=0)
    ok = [r for r in res if not r.failed]
    assert len(ok) >= 18
    assert np.median([r.loss for r in ok]) <= 1e-4


def test_step_halving_recovers():
    x0 = np.array([1e308, 0.0])
    res = dflow_sur(zero_model(2), _Rigged([-1.5e308, 0.0]), x0, DflowConfig(K=2, tau=1.0, T=1, tol=0.0))
    assert not res.failed and res.tau_final == 0.5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_second_overflow_fails_run_without_raising():
    x0 = np.zeros(2)
    res = dflow_sur(zero_model(2), _Rigged([np.inf, 0.0]), x0, DflowConfig(K=10, T=1))
    assert res.failed and res.iterations == 1 and res.tau_final == pytest.approx(0.05)
    batch = dflow_batch(zero_model(2), QuadLoss(np.zeros(2)), 4, DflowConfig(K=3, T=2), seed=0)
    assert not any(r.failed for r in batch)
