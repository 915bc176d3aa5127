import numpy as np
import pytest

from opinfnet import fom

ACCEPTANCE = {}


def record(criterion, passed, detail):
    """Store one acceptance verdict; printed in the terminal summary."""
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}")


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(str(k).rstrip("abc")), str(k))):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'} | {detail}")


@pytest.fixture(scope="session")
def burgers_grid():
    return fom.Grid1D(500)


@pytest.fixture(scope="session")
def burgers_run(burgers_grid):
    """Full-resolution Burgers trajectory on [0, 4]; shared across tests."""
    return fom.simulate("burgers", burgers_grid, t_final=4.0, dt=0.01)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
