import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tpt import tensor as tt
from tpt.config import tiny_config

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def cfg64():
    """Tiny float64 model with narrow raw features so finite differences stay cheap."""
    return tiny_config(precision="float64", appearance_dim=8, motion_dim=8, word_dim=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    prev = tt.default_dtype()
    tt.set_default_dtype(np.float64)
    yield
    tt.set_default_dtype(prev)


def param(rng, *shape):
    return tt.parameter(rng.normal(size=shape), dtype=np.float64)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
