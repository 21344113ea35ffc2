import numpy as np
import pytest

from dlps.core import ImageStack, LightSet

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def axis_lights():
    return LightSet(np.eye(3))


def random_lights(rng, d):
    """Random directions in the upper hemisphere, well away from the horizon."""
    v = rng.normal(size=(d, 3))
    v[:, 2] = np.abs(v[:, 2]) + 1.0
    return LightSet.from_unnormalized(v)


def random_stack(rng, m1, m2, d):
    return ImageStack(m1, m2, rng.uniform(0.0, 1.0, size=(m1 * m2, d)), random_lights(rng, d))
