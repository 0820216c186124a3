import numpy as np
import pytest

from crnn_mer.numerics import Rng

# Filled by tests/test_acceptance.py, printed once at the end of the session.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return Rng(1234)


def numeric_grad(f, arr, h=1e-5):
    """Central differences of scalar f() w.r.t. every entry of arr (perturbed in place)."""
    g = np.zeros_like(arr)
    for i in range(arr.size):
        old = arr.flat[i]
        arr.flat[i] = old + h
        fp = f()
        arr.flat[i] = old - h
        fm = f()
        arr.flat[i] = old
        g.flat[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-8):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)))
