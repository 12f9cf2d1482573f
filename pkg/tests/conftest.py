import numpy as np
import pytest
from hypothesis import strategies as st

from momentq.frozenlake import GridSpec, build_frozenlake
from momentq.mdp import TabularMdp


def chain_mdp(gamma=0.5):
    """Two states, one action: state 0 moves to state 1, which is absorbing and pays 1."""
    kernel = np.array([[0.0, 1.0], [0.0, 1.0]])
    reward = np.array([[0.0], [1.0]])
    return TabularMdp(2, 1, kernel, reward, gamma, 1.0)


def random_mdp(rng, n_states=None, n_actions=None, gamma=None, sparse=False):
    S = n_states or int(rng.integers(1, 7))
    A = n_actions or int(rng.integers(1, 4))
    p = rng.random((S * A, S)) ** 3
    if sparse:
        p[rng.random(p.shape) < 0.5] = 0.0
        p[np.arange(S * A), rng.integers(0, S, S * A)] += 1.0
    p /= p.sum(axis=1, keepdims=True)
    g = float(rng.uniform(0.1, 0.99)) if gamma is None else gamma
    return TabularMdp(S, A, p, rng.random((S, A)), g, 1.0)


def deterministic_mdp(rng, S=5, A=3, gamma=0.9):
    kernel = np.zeros((S * A, S))
    kernel[np.arange(S * A), rng.integers(0, S, S * A)] = 1.0
    return TabularMdp(S, A, kernel, rng.random((S, A)), gamma, 1.0)


mdp_seeds = st.integers(min_value=0, max_value=2**32 - 1)


@pytest.fixture(scope="session")
def lake4():
    return build_frozenlake(GridSpec.standard(4), gamma=0.95)


@pytest.fixture(scope="session")
def lake4_qstar(lake4):
    from momentq.mdp import solve_qstar

    return solve_qstar(lake4)[0]


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance lines, one per criterion, at the end of the run."""
    import sys

    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
