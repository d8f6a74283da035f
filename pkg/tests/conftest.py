import numpy as np
import pytest

from actmsense import backend
from actmsense.config import highway_a, highway_b, standard_highway
from actmsense.model import build_state_space


@pytest.fixture(params=sorted(backend.available()))
def kernels(request):
    """Run a test once per available kernel backend."""
    previous = backend.active()
    backend.use(request.param)
    yield request.param
    backend.use(previous)


@pytest.fixture(scope="session")
def hw_a():
    cfg = highway_a()
    return cfg, build_state_space(cfg)


@pytest.fixture(scope="session")
def hw_b():
    cfg = highway_b()
    return cfg, build_state_space(cfg)


@pytest.fixture(scope="session")
def hw11():
    cfg = standard_highway(7)
    return cfg, build_state_space(cfg)


def random_point(cfg, rng):
    lo, hi = cfg.state_bounds()
    ulo, uhi = cfg.input_bounds()
    return rng.uniform(lo, hi, cfg.n), rng.uniform(ulo, uhi, cfg.m)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
