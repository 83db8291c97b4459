import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from twoscale.model import AffineModel, DirectedGraph

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def two_state(l01=1.0, l10=1.0, g01=1.0, g10=1.0):
    """Two slow and two environment states with constant rates.

    ``l01``/``l10`` may be pairs (one rate per environment state)."""
    slow = DirectedGraph([0, 1], [(0, 1), (1, 0)])
    fast = DirectedGraph(["a", "b"], [("a", "b"), ("b", "a")])
    base = np.array([np.broadcast_to(l01, 2), np.broadcast_to(l10, 2)], dtype=float)
    return AffineModel(slow, fast, base, np.zeros((2, 2, 2)), np.array([g01, g10], float), np.zeros((2, 2)))


@pytest.fixture
def flat_model():
    return two_state()


ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion():
    """Record one pass/fail line per acceptance criterion."""

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
