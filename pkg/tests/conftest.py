import numpy as np
import pytest

from epsgreedy.env import CovariateSpec, RewardFunction, RewardSpec

BETA0 = (0.3, -0.1, 0.7)
BETA1 = (0.8, 0.5, -0.4)


def make_reward(kind: str = "linear", sigma: float = 0.1) -> RewardSpec:
    return RewardSpec(RewardFunction(kind, BETA0), RewardFunction(kind, BETA1), sigma, sigma)


@pytest.fixture
def cov3() -> CovariateSpec:
    return CovariateSpec(dim=3)


@pytest.fixture
def linear_reward() -> RewardSpec:
    return make_reward("linear")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# acceptance verdicts, echoed in the terminal summary so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
