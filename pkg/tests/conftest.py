import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from traffic_lab import scene as S

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_dataset():
    """Four recordings on a two-lane road with ramp, one rollout each."""
    return S.generate_synthetic(S.SynthConfig(n_lanes=2, ramp=True, n_agents=6, n_recordings=4,
                                              seed=11))


@pytest.fixture(scope="session")
def smoke_dataset():
    """Eight straight-lane rollouts used for the overfitting checks."""
    return S.generate_synthetic(S.SynthConfig(n_lanes=2, n_agents=6, n_recordings=8, seed=3,
                                              lane_changes=False))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
