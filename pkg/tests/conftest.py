import time
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stickydisp.ode_engine import OdeConfig, TwoPoint, integrate

settings.register_profile(
    "default", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

_ACCEPTANCE = {}


class AcceptanceRecorder:
    """Collects one verdict line per acceptance criterion."""

    def record(self, key, title, passed, detail=""):
        line = f"{key:<5} {'PASS' if passed else 'FAIL'}  {title}  [{detail}]"
        _ACCEPTANCE[key] = line
        print(line)
        return passed


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: int(k[2:])):
        terminalreporter.write_line(_ACCEPTANCE[key])


@pytest.fixture(scope="session")
def sticky_runs():
    """Shared desk-scale runs: TwoPoint(100), dt = 1e-3, n_max = 200.

    The mu = 1 run goes to t = 80 for the Gini fit window; the others to 50.
    Values are ``(trajectory, config, wall seconds)``.
    """
    runs = {}
    for mu, t_end in [(0.6, 50.0), (1.0, 80.0), (3.0, 50.0)]:
        cfg = OdeConfig(mu=mu, t_end=t_end, initial=TwoPoint(100), n_max=200, dt=1e-3,
                        sample_every=0.1)
        t0 = time.perf_counter()
        traj = integrate(cfg)
        runs[mu] = (traj, cfg, time.perf_counter() - t0)
    return runs


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(autouse=True)
def _warnings_as_errors_for_q():
    # a mean mismatch passed to q_apply is a test bug unless a test opts in
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        yield
