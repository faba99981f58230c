"""Online epsilon-greedy decisions for the two-armed linear contextual bandit.

Per-arm online OLS/WLS estimation with Wald inference, in-sample IPW value
estimation, a Monte Carlo replication harness, and offline replay on logged
randomized data.
"""

__version__ = "0.1.0"

from .env import CovariateSpec, RewardFunction, RewardSpec  # noqa: E402
from .errors import ConfigError, LogFormatError, NotReadyError, WeightDegeneracyError  # noqa: E402
from .policy import EpsilonSchedule, PolicyConfig  # noqa: E402

__all__ = [
    "__version__",
    "CovariateSpec",
    "RewardFunction",
    "RewardSpec",
    "EpsilonSchedule",
    "PolicyConfig",
    "ConfigError",
    "LogFormatError",
    "NotReadyError",
    "WeightDegeneracyError",
]
