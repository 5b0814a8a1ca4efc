import numpy as np
import pytest

from longicausal.dataset import LongitudinalDataset


def make_dataset(n=40, T=2, p=3, q=1, seed=0):
    """Small random dataset; exposures are balanced coin flips."""
    rng = np.random.default_rng(seed)
    A = rng.integers(0, 2, size=(n, T))
    Z = tuple(rng.normal(size=(n, p)) for _ in range(T))
    Y = tuple(rng.normal(size=(n, q)) for _ in range(T))
    return LongitudinalDataset(A, Z, Y)


@pytest.fixture
def small_ds():
    return make_dataset()


# -- acceptance reporting ---------------------------------------------------------

ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail):
    """Keep one result line for the terminal summary; returns ``passed``."""
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append((number, f"{status} criterion {number:>2} {title}: {detail}"))
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
