import numpy as np
import pytest

from fedlrmc.problem import gen_ground_truth, observe, sample_mask


@pytest.fixture(scope="session")
def small_instance():
    """n=q=60, r=3, p=0.5: converges in well under a second for every solver."""
    gt = gen_ground_truth(60, 60, 3, seed=11)
    y = observe(gt, sample_mask(60, 60, 0.5, seed=12))
    return gt, y


@pytest.fixture(scope="session")
def regression_instance():
    gt = gen_ground_truth(200, 200, 5, seed=1)
    y = observe(gt, sample_mask(200, 200, 0.3, seed=2))
    return gt, y


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
