"""Synthetic data-generating processes for the two-armed contextual bandit.

Covariate vectors always carry the intercept in slot 0; coefficient vectors
include the intercept coefficient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError

__all__ = [
    "CovariateSpec",
    "RewardFunction",
    "RewardSpec",
    "Observation",
    "sample_covariates",
    "sample_covariates_batch",
    "mean_reward",
    "mean_reward_batch",
    "draw_reward",
]

COVARIATE_KINDS = ("truncated_normal", "discrete_uniform")
REWARD_KINDS = ("linear", "exponential", "logistic")


@dataclass(frozen=True)
class CovariateSpec:
    """Distribution of x = (1, z) with z i.i.d. coordinate-wise.

    ``kind`` is ``"truncated_normal"`` (uses mean/scale/lower/upper) or
    ``"discrete_uniform"`` (uses support).
    """

    dim: int
    kind: str = "truncated_normal"
    mean: float = 0.0
    scale: float = 1.0
    lower: float = -10.0
    upper: float = 10.0
    support: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in COVARIATE_KINDS:
            raise ConfigError(f"unknown covariate kind {self.kind!r}", "covariates.kind")
        if int(self.dim) != self.dim or self.dim < 2:
            raise ConfigError("dim must be an integer >= 2", "covariates.dim")
        if self.kind == "truncated_normal":
            if not self.lower < self.upper:
                raise ConfigError("lower must be < upper", "covariates.lower")
            if not self.scale > 0:
                raise ConfigError("scale must be positive", "covariates.scale")
        else:
            if len(self.support) == 0:
                raise ConfigError("support must be non-empty", "covariates.support")
            object.__setattr__(self, "support", tuple(int(v) for v in self.support))

    @property
    def bound(self) -> float:
        """Sup-norm bound L_x on emitted vectors."""
        if self.kind == "truncated_normal":
            return max(abs(self.lower), abs(self.upper), 1.0)
        return float(max(max(abs(v) for v in self.support), 1))

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "dim": self.dim}
        if self.kind == "truncated_normal":
            out.update(mean=self.mean, scale=self.scale, lower=self.lower, upper=self.upper)
        else:
            out["support"] = list(self.support)
        return out


@dataclass(frozen=True)
class RewardFunction:
    """Mean-reward function of one arm: linear, exp(b'x) or logistic(b'x)."""

    kind: str
    beta: tuple[float, ...]

    def __post_init__(self):
        if self.kind not in REWARD_KINDS:
            raise ConfigError(f"unknown reward kind {self.kind!r}", "reward.kind")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.beta) < 2:
            raise ConfigError("beta needs an intercept and at least one slope", "reward.beta")

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != len(self.beta):
            raise ValueError(
                f"covariate length {X.shape[-1]} does not match beta length {len(self.beta)}"
            )
        eta = X @ np.asarray(self.beta)
        if self.kind == "linear":
            return eta
        if self.kind == "exponential":
            return np.exp(eta)
        # logistic, written to stay finite for large |eta|
        return np.exp(-np.logaddexp(0.0, -eta))

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": list(self.beta)}


@dataclass(frozen=True)
class RewardSpec:
    """Per-arm mean functions and Gaussian noise levels."""

    phi0: RewardFunction
    phi1: RewardFunction
    sigma0: float = 0.1
    sigma1: float = 0.1

    def __post_init__(self):
        if len(self.phi0.beta) != len(self.phi1.beta):
            raise ConfigError("phi0 and phi1 must have equal dimension", "reward")
        for name in ("sigma0", "sigma1"):
            if not getattr(self, name) >= 0:
                raise ConfigError("must be nonnegative", f"reward.{name}")

    @property
    def dim(self) -> int:
        return len(self.phi0.beta)

    @property
    def is_linear(self) -> bool:
        return self.phi0.is_linear and self.phi1.is_linear

    def arm(self, a: int) -> RewardFunction:
        return self.phi1 if a else self.phi0

    def sigma(self, a: int) -> float:
        return self.sigma1 if a else self.sigma0

    @property
    def beta_diff(self) -> np.ndarray:
        """beta1 - beta0 of the generating functions (meaningful for linear truth)."""
        return np.asarray(self.phi1.beta) - np.asarray(self.phi0.beta)

    def to_dict(self) -> dict:
        return {
            "phi0": self.phi0.to_dict(),
            "phi1": self.phi1.to_dict(),
            "sigma0": self.sigma0,
            "sigma1": self.sigma1,
        }


@dataclass
class Observation:
    """One decision step."""

    t: int
    x: np.ndarray
    a: int
    pi: float
    y: float
    matched_optimal: bool = field(default=False)


def sample_covariates_batch(spec: CovariateSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` covariate vectors as an (n, dim) array with a leading column of ones.

    Truncated normal coordinates are drawn by rejection from the untruncated
    normal; rejected entries are redrawn until every entry is in bounds.
    """
    k = spec.dim - 1
    X = np.ones((n, spec.dim))
    if spec.kind == "discrete_uniform":
        X[:, 1:] = rng.choice(np.asarray(spec.support, dtype=float), size=(n, k))
        return X
    Z = rng.normal(spec.mean, spec.scale, size=(n, k))
    bad = (Z < spec.lower) | (Z > spec.upper)
    while bad.any():
        Z[bad] = rng.normal(spec.mean, spec.scale, size=int(bad.sum()))
        bad = (Z < spec.lower) | (Z > spec.upper)
    X[:, 1:] = Z
    return X


def sample_covariates(spec: CovariateSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw a single covariate vector (length ``spec.dim``, first entry 1)."""
    return sample_covariates_batch(spec, 1, rng)[0]


def mean_reward(spec: RewardSpec, x: Sequence[float], a: int) -> float:
    """phi_a(x), without noise."""
    return float(spec.arm(a)(np.asarray(x, dtype=float)))


def mean_reward_batch(spec: RewardSpec, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(phi0(X), phi1(X)) for a batch of covariate rows."""
    return spec.phi0(X), spec.phi1(X)


def draw_reward(spec: RewardSpec, x: Sequence[float], a: int, rng: np.random.Generator) -> float:
    """phi_a(x) + e with e ~ N(0, sigma_a^2). Only arm ``a`` is evaluated."""
    # one normal variate is consumed even when sigma_a == 0
    return mean_reward(spec, x, a) + spec.sigma(a) * float(rng.standard_normal())
