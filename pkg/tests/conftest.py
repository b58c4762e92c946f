import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from entot import RegularizedInstance

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

E2_COST = np.array([[0.0, 1.0], [1.0, 0.0]])
HALF = np.array([0.5, 0.5])


@pytest.fixture
def e2():
    return RegularizedInstance(E2_COST, HALF, HALF, 1.0)


def random_instance(rng, n, eta=1.0, spread=1.0):
    C = rng.uniform(0.0, spread, size=(n, n))
    r = rng.uniform(0.1, 1.0, size=n)
    c = rng.uniform(0.1, 1.0, size=n)
    return RegularizedInstance(C, r / r.sum(), c / c.sum(), eta)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[number])
