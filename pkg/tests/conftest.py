import warnings

import numpy as np
import pytest

from ilbk.discretization import assemble_operator, build_radial_grid
from ilbk.gas import GasParameters
from ilbk.kernel import KernelContext

# (m, m1, eps, theta1, u1) covering equal masses, heavy/light background and drift
PARAM_SETS = [
    GasParameters(1.0, 1.0, 0.5, 1.0),
    GasParameters(1.0, 2.0, 0.6, 1.0, (0.1, 0.0, 0.0)),
    GasParameters(2.0, 1.0, 0.3, 0.8),
    GasParameters(1.0, 3.0, 0.9, 2.0, (1.0, -0.5, 0.0)),
]


def make_ctx(p):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return KernelContext.from_params(p)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_ctx():
    return make_ctx(PARAM_SETS[0])


@pytest.fixture(scope="session")
def drift_ctx():
    return make_ctx(PARAM_SETS[1])


@pytest.fixture(scope="session")
def radial_op(default_ctx):
    return assemble_operator(default_ctx, build_radial_grid(6, 128, default_ctx))


# one line per acceptance criterion, printed again in the terminal summary
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
