"""Exploration schedules and the epsilon-greedy decision rule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "EpsilonSchedule",
    "PolicyConfig",
    "epsilon_at",
    "propensity",
    "draw_action",
    "warmup_actions",
]

SCHEDULE_KINDS = ("constant", "power", "log_over_sqrt", "loglog_over_sqrt")
ESTIMATOR_KINDS = ("OLS", "WLS")

# t at which log(t)/sqrt(t) and log(log(t))/sqrt(t) peak; the second solves
# log(t) * log(log(t)) = 2, i.e. t = exp(exp(W(2))) with W the Lambert function
_LOG_PEAK = math.exp(2.0)
_LOGLOG_PEAK = 10.441108499413785


@dataclass(frozen=True)
class EpsilonSchedule:
    """Exploration rate as a function of the decision time t.

    Kinds: ``constant`` (c), ``power`` (k * t**-alpha), ``log_over_sqrt``
    (k * log t / sqrt t) and ``loglog_over_sqrt`` (k * log log t / sqrt t).
    The two logarithmic kinds rise before they decay; below their peak the
    peak value is used, so every schedule is non-increasing in t. The result
    is clamped to [floor, ceiling].
    """

    kind: str = "log_over_sqrt"
    k: float = 0.1
    alpha: float = 0.5
    c: float = 0.1
    floor: float = 0.0
    ceiling: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(
                f"unknown schedule kind {self.kind!r} (expected one of {', '.join(SCHEDULE_KINDS)})",
                "policy.epsilon.kind",
            )
        if not 0.0 <= self.floor <= 1.0:
            raise ConfigError("must lie in [0, 1]", "policy.epsilon.floor")
        if not 0.0 < self.ceiling <= 1.0:
            raise ConfigError("must lie in (0, 1]", "policy.epsilon.ceiling")
        if self.floor > self.ceiling:
            raise ConfigError("floor exceeds ceiling", "policy.epsilon.floor")
        if self.k < 0:
            raise ConfigError("must be nonnegative", "policy.epsilon.k")
        if self.alpha < 0:
            raise ConfigError("must be nonnegative", "policy.epsilon.alpha")
        if not 0.0 <= self.c <= 1.0:
            raise ConfigError("must lie in [0, 1]", "policy.epsilon.c")

    def raw(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.full_like(t, self.c)
        if self.kind == "power":
            return self.k * t ** (-self.alpha)
        if self.kind == "log_over_sqrt":
            t = np.maximum(t, _LOG_PEAK)
            return self.k * np.log(t) / np.sqrt(t)
        t = np.maximum(t, _LOGLOG_PEAK)
        return self.k * np.log(np.log(t)) / np.sqrt(t)

    def values(self, t) -> np.ndarray:
        """Vectorized clamped schedule."""
        return np.clip(self.raw(t), self.floor, self.ceiling)

    def __call__(self, t: int) -> float:
        return float(self.values(t))

    def limit(self) -> float:
        """Limit of the clamped schedule as t -> infinity."""
        if self.kind == "constant":
            tail = self.c
        elif self.kind == "power" and self.alpha == 0:
            tail = self.k
        else:
            tail = 0.0
        return float(min(max(tail, self.floor), self.ceiling))

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "constant":
            out["c"] = self.c
        else:
            out["k"] = self.k
            if self.kind == "power":
                out["alpha"] = self.alpha
        out.update(floor=self.floor, ceiling=self.ceiling)
        return out


@dataclass(frozen=True)
class PolicyConfig:
    schedule: EpsilonSchedule
    T0: int = 20
    estimator: str = "OLS"

    def __post_init__(self):
        if self.estimator not in ESTIMATOR_KINDS:
            raise ConfigError(
                f"unknown estimator {self.estimator!r} (expected OLS or WLS)", "policy.estimator"
            )
        if int(self.T0) != self.T0 or self.T0 < 2 or self.T0 % 2:
            raise ConfigError("T0 must be a positive even integer", "policy.T0")
        if self.estimator == "WLS" and not self.schedule.limit() > 0:
            raise ConfigError(
                "WLS needs exploration bounded away from zero; set a positive floor",
                "policy.epsilon.floor",
            )

    def validate_for(self, dim: int) -> None:
        if self.T0 < 2 * dim:
            raise ConfigError(f"T0={self.T0} is smaller than 2*dim={2 * dim}", "policy.T0")

    def to_dict(self) -> dict:
        return {"epsilon": self.schedule.to_dict(), "T0": self.T0, "estimator": self.estimator}


def epsilon_at(schedule: EpsilonSchedule, t: int) -> float:
    """Clamped exploration rate at time t >= 1 (ignored by callers while t <= T0)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    return schedule(t)


def propensity(score: float, eps: float) -> float:
    """P(a = 1) under the epsilon-greedy rule, where ``score`` = (b1 - b0)'x.

    A score of exactly 0 counts as favouring arm 1.
    """
    if math.isnan(score) or math.isnan(eps):
        raise ValueError("propensity received NaN")
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps={eps} outside [0, 1]")
    return (1.0 - eps) * (score >= 0.0) + eps / 2.0


def draw_action(pi: float, rng: np.random.Generator) -> int:
    """Bernoulli(pi) from exactly one uniform variate."""
    return int(rng.random() < pi)


def warmup_actions(T0: int, rng: np.random.Generator) -> np.ndarray:
    """Balanced random warm-up: a permutation of T0/2 zeros and T0/2 ones."""
    if T0 < 2 or T0 % 2:
        raise ConfigError("T0 must be a positive even integer", "policy.T0")
    base = np.repeat(np.array([0, 1], dtype=np.int64), T0 // 2)
    return rng.permutation(base)
