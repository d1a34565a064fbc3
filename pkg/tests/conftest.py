from pathlib import Path

import numpy as np
import pytest

from hospmrp.model import CalibrationData, CellWeekCounts, HierarchicalModel
from hospmrp.synthgen import default_scenario

FIXTURES = Path(__file__).parent / "fixtures"


def small_counts(weeks=range(18, 22), seed=0, n_per_cell=8):
    """A few weeks of binomial counts spread over every cell."""
    rng = np.random.default_rng(seed)
    cells, wk, n, y = [], [], [], []
    for w in weeks:
        for c in range(60):
            cells.append(c)
            wk.append(w)
            n.append(n_per_cell)
            y.append(int(rng.binomial(n_per_cell, 0.1)))
    return CellWeekCounts(cells, wk, n, y)


def central_difference(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def small_model():
    return HierarchicalModel(small_counts(), CalibrationData.default(), range(18, 22))


@pytest.fixture(scope="session")
def scenario():
    return default_scenario(seed=0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
