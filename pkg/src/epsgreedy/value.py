"""Value functionals and in-sample IPW value inference.

The in-sample estimator averages rewards on steps where the taken action
agreed with the greedy action of the estimate in force at decision time,
reweighted by the probability of that agreement. Its variance estimators
are retrospective, so :class:`ValueState` keeps the whole trajectory,
including the lagged per-arm coefficients used at each step.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .env import CovariateSpec, RewardSpec, sample_covariates_batch
from .errors import ConfigError, WeightDegeneracyError
from .estimators import ArmEstimator, PooledState, _Rows, sandwich_meat

__all__ = [
    "MCEstimate",
    "KernelConfig",
    "ValueState",
    "MisspecVariance",
    "ipw_update",
    "ipw_value",
    "ipw_variance_correct",
    "pseudo_outcomes",
    "empirical_f",
    "bandwidth",
    "kernel_fprime",
    "ipw_variance_misspec",
    "aipw_value",
    "optimal_value_on",
    "policy_value_on",
    "optimal_value_mc",
    "policy_value_mc",
    "fprime_finite_difference",
]

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
MC_CHUNK = 250_000


class MCEstimate(NamedTuple):
    mean: float
    se: float


@dataclass(frozen=True)
class KernelConfig:
    """Bandwidth for the smoothed derivative of the value functional.

    ``sigma_t_cuberoot`` uses h_t = sd(b_t'x_s) * t**(-1/3); ``fixed`` uses ``h``.
    """

    bandwidth_rule: str = "sigma_t_cuberoot"
    h: float = 0.1
    min_bandwidth: float = 1e-6

    def __post_init__(self):
        if self.bandwidth_rule not in ("sigma_t_cuberoot", "fixed"):
            raise ConfigError(f"unknown bandwidth rule {self.bandwidth_rule!r}",
                              "kernel.bandwidth_rule")
        if not self.min_bandwidth > 0:
            raise ConfigError("must be positive", "kernel.min_bandwidth")
        if self.bandwidth_rule == "fixed" and not self.h > 0:
            raise ConfigError("must be positive", "kernel.h")

    def to_dict(self) -> dict:
        out = {"bandwidth_rule": self.bandwidth_rule, "min_bandwidth": self.min_bandwidth}
        if self.bandwidth_rule == "fixed":
            out["h"] = self.h
        return out


class ValueState:
    """Running IPW sums plus the retained trajectory.

    Per step the trajectory holds x, the action, the propensity of action 1,
    the reward, the coefficient difference and exploration rate that produced
    the decision, and the lagged per-arm coefficients (NaN when an arm had no
    estimate yet).
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.t = 0
        self.ipw_sum = 0.0
        self.ipw_sq_sum = 0.0
        d = dim
        # layout: x | a | pi | y | eps | match | pmatch | diff | beta0 | beta1
        self._layout = {
            "x": slice(0, d), "a": d, "pi": d + 1, "y": d + 2, "eps": d + 3,
            "match": d + 4, "pmatch": d + 5, "diff": slice(d + 6, 2 * d + 6),
            "beta0": slice(2 * d + 6, 3 * d + 6), "beta1": slice(3 * d + 6, 4 * d + 6),
        }
        self._rows = _Rows(4 * d + 6, capacity=256)

    def column(self, name: str) -> np.ndarray:
        return self._rows.data[:, self._layout[name]]

    @property
    def X(self) -> np.ndarray:
        return self.column("x")

    @property
    def a(self) -> np.ndarray:
        return self.column("a")

    @property
    def pi(self) -> np.ndarray:
        return self.column("pi")

    @property
    def y(self) -> np.ndarray:
        return self.column("y")

    @property
    def match(self) -> np.ndarray:
        return self.column("match")

    @property
    def pmatch(self) -> np.ndarray:
        return self.column("pmatch")

    @property
    def value(self) -> float:
        return self.ipw_sum / self.t


def ipw_update(state: ValueState, x, a: int, pi: float, y: float, beta_diff_used,
               eps_used: float, beta0_lag=None, beta1_lag=None) -> ValueState:
    """Append one step and add its IPW contribution.

    ``beta_diff_used`` must be the coefficient difference in force when the
    decision was made (all zeros during warm-up).
    """
    x = np.asarray(x, dtype=float)
    diff = np.asarray(beta_diff_used, dtype=float)
    greedy = 1 if float(diff @ x) >= 0.0 else 0
    pmatch = pi if greedy == 1 else 1.0 - pi
    if pmatch <= 0.0:
        raise WeightDegeneracyError("probability of following the greedy action is zero")
    match = 1.0 if a == greedy else 0.0
    contrib = match / pmatch * y
    state.ipw_sum += contrib
    state.ipw_sq_sum += contrib * y
    state.t += 1

    d = state.dim
    row = np.empty(4 * d + 6)
    row[:d] = x
    row[d: d + 6] = (a, pi, y, eps_used, match, pmatch)
    row[d + 6: 2 * d + 6] = diff
    row[2 * d + 6: 3 * d + 6] = np.nan if beta0_lag is None else beta0_lag
    row[3 * d + 6:] = np.nan if beta1_lag is None else beta1_lag
    state._rows.append(row)
    return state


def ipw_value(state: ValueState) -> float:
    return state.value


def _floor(value: float, what: str, floor: bool) -> float:
    if floor and value < 0.0:
        warnings.warn(f"negative {what} estimate {value:.3g} floored at 0", RuntimeWarning,
                      stacklevel=3)
        return 0.0
    return value


def _correct_term(state: ValueState, eps_t: float) -> float:
    t = state.t
    v = state.value
    return 2.0 / (2.0 - eps_t) * state.ipw_sq_sum / t - v * v


def ipw_variance_correct(state: ValueState, eps_t: float, floor: bool = True) -> float:
    """Plug-in asymptotic variance of sqrt(t)(V_hat_t - V) for a correct linear model.

    SE(V_hat_t) = sqrt(result / t).
    """
    return _floor(_correct_term(state, eps_t), "IPW variance", floor)


def pseudo_outcomes(state: ValueState, beta0: np.ndarray, beta1: np.ndarray) -> np.ndarray:
    """Per-step estimates of phi1(x_s) - phi0(x_s) built from time-t coefficients."""
    X, a, pi, y = state.X, state.a, state.pi, state.y
    if np.any((pi <= 0.0) | (pi >= 1.0)):
        raise WeightDegeneracyError("pseudo-outcomes need propensities strictly inside (0, 1)")
    u = y - a * (X @ beta1) - (1.0 - a) * (X @ beta0)
    return (a / pi - (1.0 - a) / (1.0 - pi)) * u + X @ (beta1 - beta0)


def empirical_f(state: ValueState, b, beta0, beta1) -> float:
    """Empirical f(b) = (1/t) sum I{b'x_s >= 0} * pseudo-outcome_s."""
    b = np.asarray(b, dtype=float)
    ps = pseudo_outcomes(state, np.asarray(beta0, float), np.asarray(beta1, float))
    return float(np.mean((state.X @ b >= 0.0) * ps))


def bandwidth(state: ValueState, beta0, beta1, kcfg: KernelConfig) -> float:
    if kcfg.bandwidth_rule == "fixed":
        h = kcfg.h
    else:
        scores = state.X @ (np.asarray(beta1, float) - np.asarray(beta0, float))
        sd = float(np.std(scores, ddof=1)) if state.t > 1 else 0.0
        h = sd * state.t ** (-1.0 / 3.0)
    h = max(h, kcfg.min_bandwidth)
    if not np.isfinite(h):
        raise ValueError("bandwidth is not finite")
    return h


def kernel_fprime(state: ValueState, b, beta0, beta1, kcfg: KernelConfig) -> np.ndarray:
    """Gaussian-kernel estimate of the gradient of f at ``b``.

    (1/t) sum p(b'x_s / h) * pseudo-outcome_s * x_s / h, with p the standard
    normal density.
    """
    b = np.asarray(b, dtype=float)
    h = bandwidth(state, beta0, beta1, kcfg)
    X = state.X
    ps = pseudo_outcomes(state, np.asarray(beta0, float), np.asarray(beta1, float))
    u = X @ b / h
    k = _INV_SQRT_2PI * np.exp(-0.5 * u * u)
    return (k * ps) @ X / (h * state.t)


@dataclass(frozen=True)
class MisspecVariance:
    value: float
    base: float
    estimation: float
    cross: float
    fprime: np.ndarray
    bandwidth: float
    raw: float


def _lagged(state: ValueState, name: str) -> np.ndarray:
    B = state.column(name)
    return np.where(np.isnan(B), 0.0, B)


def ipw_variance_misspec(state: ValueState, est0: ArmEstimator, est1: ArmEstimator,
                         pooled: PooledState, eps_t: float,
                         kcfg: KernelConfig = KernelConfig(), floor: bool = True) -> MisspecVariance:
    """Asymptotic variance of the IPW value estimator under a misspecified linear model.

    Sum of three parts: the correct-model term, the contribution of the
    estimated decision boundary (f'(b)' Sigma^-1 (H0 + H1) Sigma^-1 f'(b),
    doubled) and the covariance between the two. The cross term evaluates
    residuals against the lagged coefficients stored in the trajectory; steps
    without a lagged estimate use a zero prediction.
    """
    t = state.t
    if pooled.t != t or est0.count + est1.count != t:
        raise ValueError("estimators, pooled state and trajectory cover different horizons")
    b0 = est0.beta
    b1 = est1.beta
    if b0 is None or b1 is None:
        raise ValueError("both arm estimates are required")
    base = _correct_term(state, eps_t)

    h = bandwidth(state, b0, b1, kcfg)
    fp = kernel_fprime(state, b1 - b0, b0, b1, kcfg)
    sigma_inv = np.linalg.inv(pooled.mean)
    g = sigma_inv @ fp
    H = sandwich_meat(est0, t) + sandwich_meat(est1, t)
    estimation = 2.0 * float(g @ H @ g)

    X, a, y = state.X, state.a, state.y
    w = state.match / state.pmatch * y
    r1 = y - np.einsum("ij,ij->i", X, _lagged(state, "beta1"))
    r0 = y - np.einsum("ij,ij->i", X, _lagged(state, "beta0"))
    s = (w * (a * r1 - (1.0 - a) * r0)) @ X
    cross = 4.0 / (2.0 - eps_t) / t * float(g @ s)

    raw = base + estimation + cross
    return MisspecVariance(
        value=_floor(raw, "misspecified IPW variance", floor),
        base=base, estimation=estimation, cross=cross, fprime=fp, bandwidth=h, raw=raw,
    )


def aipw_value(state: ValueState, model_action: str = "greedy") -> float:
    """Augmented IPW value estimate.

    The augmentation subtracts (I_s - P_s)/P_s times a lagged model prediction.
    With ``model_action="greedy"`` the prediction is for the greedy action,
    which makes the augmentation mean zero; ``"taken"`` predicts the reward of
    the action actually taken.
    """
    if model_action not in ("greedy", "taken"):
        raise ValueError("model_action must be 'greedy' or 'taken'")
    X, y = state.X, state.y
    I, P = state.match, state.pmatch
    if model_action == "greedy":
        act = (np.einsum("ij,ij->i", X, state.column("diff")) >= 0.0).astype(float)
    else:
        act = state.a
    pred = (act * np.einsum("ij,ij->i", X, _lagged(state, "beta1"))
            + (1.0 - act) * np.einsum("ij,ij->i", X, _lagged(state, "beta0")))
    return float(np.mean(I / P * y - (I - P) / P * pred))


def optimal_value_on(reward: RewardSpec, X: np.ndarray, beta_diff) -> MCEstimate:
    """Mean of phi1 on {b'x >= 0} and phi0 elsewhere over the supplied draws."""
    phi0, phi1 = reward.phi0(X), reward.phi1(X)
    vals = np.where(X @ np.asarray(beta_diff, float) >= 0.0, phi1, phi0)
    return MCEstimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0)


def policy_value_on(reward: RewardSpec, X: np.ndarray, beta_diff, eps: float) -> MCEstimate:
    """Expected reward of the epsilon-greedy rule over the supplied draws (action integrated out)."""
    phi0, phi1 = reward.phi0(X), reward.phi1(X)
    pi = (1.0 - eps) * (X @ np.asarray(beta_diff, float) >= 0.0) + eps / 2.0
    vals = pi * phi1 + (1.0 - pi) * phi0
    return MCEstimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0)


def _chunked_mean(fn, cov: CovariateSpec, n: int, rng: np.random.Generator) -> MCEstimate:
    total = 0.0
    total_sq = 0.0
    left = n
    while left > 0:
        m = min(left, MC_CHUNK)
        vals = fn(sample_covariates_batch(cov, m, rng))
        total += float(vals.sum())
        total_sq += float(vals @ vals)
        left -= m
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / (n - 1) if n > 1 else 0.0
    return MCEstimate(mean, float(np.sqrt(var / n)))


def optimal_value_mc(reward: RewardSpec, cov: CovariateSpec, beta_diff, n: int,
                     rng: np.random.Generator) -> MCEstimate:
    """Monte Carlo value of the rule I{b'x >= 0} under the true mean functions."""
    if n < 1:
        raise ValueError("n must be >= 1")
    b = np.asarray(beta_diff, float)
    return _chunked_mean(
        lambda X: np.where(X @ b >= 0.0, reward.phi1(X), reward.phi0(X)), cov, n, rng)


def policy_value_mc(reward: RewardSpec, cov: CovariateSpec, beta_diff, eps: float, n: int,
                    rng: np.random.Generator) -> MCEstimate:
    """Monte Carlo value of the epsilon-greedy rule built on ``beta_diff``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    b = np.asarray(beta_diff, float)

    def fn(X):
        pi = (1.0 - eps) * (X @ b >= 0.0) + eps / 2.0
        return pi * reward.phi1(X) + (1.0 - pi) * reward.phi0(X)

    return _chunked_mean(fn, cov, n, rng)


def fprime_finite_difference(reward: RewardSpec, cov: CovariateSpec, b, n: int,
                             rng: np.random.Generator, delta: float = 1e-2) -> tuple[np.ndarray, np.ndarray]:
    """Central finite difference of f(b) = E[I{b'x >= 0}(phi1(x) - phi0(x))].

    Both sides of every difference share the same covariate draws.

    Returns
    -------
    gradient, standard_error : ndarray
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if not delta > 0:
        raise ValueError("delta must be positive")
    b = np.asarray(b, dtype=float)
    d = len(b)
    total = np.zeros(d)
    total_sq = np.zeros(d)
    left = n
    while left > 0:
        m = min(left, MC_CHUNK)
        X = sample_covariates_batch(cov, m, rng)
        gap = reward.phi1(X) - reward.phi0(X)
        for j in range(d):
            step = np.zeros(d)
            step[j] = delta
            vals = ((X @ (b + step) >= 0.0).astype(float)
                    - (X @ (b - step) >= 0.0)) * gap / (2.0 * delta)
            total[j] += vals.sum()
            total_sq[j] += vals @ vals
        left -= m
    mean = total / n
    var = np.maximum(total_sq / n - mean * mean, 0.0) * n / (n - 1)
    return mean, np.sqrt(var / n)
