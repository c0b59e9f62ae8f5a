import numpy as np
import pytest

from nmfrlct.model import FactorPair, Hyperparameters, ModelDims

ACCEPTANCE_LINES = []


@pytest.fixture
def ref_dims():
    return ModelDims(4, 4, 2, 1)


@pytest.fixture
def unit_hyper():
    return Hyperparameters(1, 1, 1, 1)


@pytest.fixture
def small_truth():
    return FactorPair(np.array([[1.0], [0.5], [1.5]]), np.array([[1.2, 0.8]]))


@pytest.fixture
def verdict():
    """Record one pass/fail line for the acceptance summary."""

    def record(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
