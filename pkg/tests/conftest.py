import numpy as np
import pytest

from heatmapbcc import ModelConfig, fit
from heatmapbcc.synthetic import make_scenario


@pytest.fixture(scope="session")
def small_scenario():
    return make_scenario("noisy", width=10, height=10, length_scale=5.0, n_reports=250, seed=11)


@pytest.fixture(scope="session")
def small_state(small_scenario):
    return fit(small_scenario.reports, ModelConfig(length_scale=5.0))


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[name])
