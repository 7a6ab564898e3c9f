import numpy as np
import pytest

from stconv.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Two-level float64 model small enough for finite differences."""
    return ModelConfig(init_filters=4, levels=2, t_out=8, dropout_rate=0.4, dtype="float64")


_ACCEPTANCE: dict = {}
N_CRITERIA = 9


@pytest.fixture
def report_criterion():
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def report(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(_ACCEPTANCE.get(n, f"criterion {n}: NOT RUN"))
