import numpy as np
import pytest

from dflowsur import nncore
from dflowsur.flowmatch import FlowMatcher, TrainConfig, train_conditional_flow, train_flow
from dflowsur.geometry import synthesize_dataset
from dflowsur.physics import oracle_cl, train_surrogate


class QuadLoss:
    """``||x - a||^2`` with its gradient, batched like the physical loss."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=float)

    def __call__(self, x):
        r = np.asarray(x, dtype=float) - self.a
        return np.sum(r * r, axis=-1), 2.0 * r

    def value(self, x):
        return self(x)[0]


def zero_model(d, hidden=(4,), x_mean=None, x_std=None):
    """Velocity model whose network outputs exactly zero."""
    params = nncore.net_init([d + 1, *hidden, d], seed=0)
    params = nncore.NetworkParams.from_arrays(params, [np.zeros_like(a) for a in params.arrays()])
    return FlowMatcher.from_network(params, x_mean, x_std)


def linear_model(A, c=None):
    """Identity-activation single layer ``u(z, t) = A z + c`` (time weight 0)."""
    A = np.asarray(A, dtype=float)
    d = A.shape[0]
    W = np.zeros((d, d + 1))
    W[:, :d] = A
    b = np.zeros(d) if c is None else np.asarray(c, dtype=float)
    params = nncore.NetworkParams([d + 1, d], [W], [b], "identity")
    return FlowMatcher.from_network(params)


def random_model(d=4, hidden=(8, 8), seed=0, scale=1.0):
    params = nncore.net_init([d + 1, *hidden, d], seed=seed)
    params = nncore.NetworkParams.from_arrays(params, [a * scale for a in params.arrays()])
    rng = np.random.default_rng(seed + 1)
    for b in params.biases:
        b[:] = 0.1 * rng.standard_normal(b.shape)
    return FlowMatcher.from_network(params)


@pytest.fixture
def quad_loss():
    return QuadLoss


@pytest.fixture(scope="session")
def dataset():
    return synthesize_dataset(200, 0)


@pytest.fixture(scope="session")
def flow(dataset):
    return train_flow(dataset, TrainConfig())


@pytest.fixture(scope="session")
def conditional_flow(dataset):
    return train_conditional_flow(dataset, oracle_cl(dataset.designs), TrainConfig())


@pytest.fixture(scope="session")
def surrogate():
    # dedicated labeled corpus, as the CLI does by default
    return train_surrogate(synthesize_dataset(4000, 1), seed=0)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
