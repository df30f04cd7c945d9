import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from jccmdp.mdp import CmdpInstance

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_instance(rng, n_states=3, n_actions=2, n_constraints=0, alpha=0.8, budgets=None):
    kernel = rng.dirichlet(np.ones(n_states), size=n_states * n_actions)
    gamma = rng.dirichlet(np.ones(n_states))
    if budgets is None:
        budgets = rng.uniform(0.5, 1.0, n_constraints)
    return CmdpInstance((n_actions,) * n_states, kernel, alpha, gamma, budgets)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def two_state():
    """Two states, two actions; action 0 stays put, action 1 swaps."""
    kernel = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    return CmdpInstance((2, 2), kernel, 0.5, np.array([1.0, 0.0]), ())


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_acceptance(number: int, passed, detail: str):
    verdict = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {verdict:<8} {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
