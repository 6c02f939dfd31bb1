import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from geotopics.sampling import make_synthetic_model, sample_dataset

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

SMALL_DIMS = {"category": 6, "users": 8, "time_of_day": 6, "day_of_week": 7}


@pytest.fixture(scope="session")
def toy_model():
    return make_synthetic_model(
        [[0.0, 0.0], [1.0, 0.0], [0.5, 0.9]], theta=[0.5, 0.3, 0.2], dims=SMALL_DIMS, seed=11
    )


@pytest.fixture(scope="session")
def toy_data(toy_model):
    return sample_dataset(toy_model, 300, seed=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): one end-to-end acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        _ACCEPTANCE[number] = (title, "FAIL" if call.excinfo is not None else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, outcome = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {outcome}: {title}")
