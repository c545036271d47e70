import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lazytrigger.core import ConvSpec, TriggerParams
from lazytrigger.model import Cascade, CnnTrigger

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# lines printed by the acceptance suite, echoed again in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def random_model(rng, architecture, scale=1.0, thresholds=None) -> CnnTrigger:
    """Model with Gaussian parameters; convenient for property tests."""
    cascades = []
    m = 1
    for l, k in architecture:  # noqa: E741
        kernels = rng.normal(0.0, scale, size=(l, m, k, k))
        biases = rng.normal(0.0, 0.1 * scale, size=l)
        cascades.append(Cascade(ConvSpec(kernels, biases), TriggerParams(rng.normal(0.0, scale, size=l), rng.normal(0.0, 0.5))))
        m = l
    return CnnTrigger(cascades, thresholds)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
