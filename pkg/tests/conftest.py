import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "meshsplat",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "meshsplat"))


def central_difference(fn, x: np.ndarray, h: float) -> np.ndarray:
    """Gradient of scalar ``fn`` at ``x`` by central differences, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = fn(x)
        x[idx] = old - h
        fm = fn(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|n|, |a|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), np.linalg.norm(a), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
