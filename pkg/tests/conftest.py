import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def unit_vectors():
    """Hypothesis strategy for points on S2 (normalised non-degenerate triples)."""
    coord = st.floats(-1.0, 1.0, allow_nan=False)
    return st.tuples(coord, coord, coord).filter(lambda v: np.linalg.norm(v) > 1e-3).map(
        lambda v: np.asarray(v) / np.linalg.norm(v))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
