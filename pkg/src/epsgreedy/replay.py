"""Offline evaluation of the epsilon-greedy policy on logged randomized data.

Rejection matching: for each logged record the policy draws its own action
from the covariates; the record is kept (and fed to the estimators) only
when that action equals the logged one. Because the logged actions were
randomized independently of the policy, the kept records form a trajectory
with the same distribution as an online run of the policy.

Log files are CSV with header ``x1,...,xd,a,y,p``: covariates (intercept
first), the logged action, the reward, and the logging probability of
action 1.
"""
from __future__ import annotations

import csv
import math
from statistics import NormalDist
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .env import CovariateSpec, RewardSpec, sample_covariates_batch
from .errors import ConfigError, LogFormatError
from .estimators import (
    ArmEstimator,
    PooledState,
    ols_variance,
    standard_errors,
    wls_sandwich_variance,
)
from .policy import PolicyConfig, warmup_actions
from .value import KernelConfig, ValueState, aipw_value, ipw_update, ipw_variance_correct, ipw_variance_misspec

__all__ = ["LoggedRecord", "ReplayReport", "load_log", "replay_run", "make_synthetic_log"]

_REPLAY = 4  # seed-sequence family, distinct from the experiment families
_SYNTH_CHUNK = 100_000


@dataclass(frozen=True)
class LoggedRecord:
    x: np.ndarray
    a: int
    y: float
    p: float
    line: int = 0


def _parse_header(header: list[str]) -> int:
    cols = [c.strip() for c in header]
    if len(cols) < 5 or cols[-3:] != ["a", "y", "p"]:
        raise LogFormatError("header must be x1,...,xd,a,y,p with d >= 2", 1)
    d = len(cols) - 3
    if cols[:d] != [f"x{j}" for j in range(1, d + 1)]:
        raise LogFormatError(f"expected covariate columns x1..x{d}, got {','.join(cols[:d])}", 1)
    return d


def _float(text: str, name: str, line: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise LogFormatError(f"{name}={text!r} is not a number", line) from None
    if not math.isfinite(v):
        raise LogFormatError(f"{name}={text!r} is not finite", line)
    return v


def load_log(path: str | Path) -> Iterator[LoggedRecord]:
    """Stream validated records from a log file.

    Rows are parsed lazily, so arbitrarily long files use constant memory.

    Raises
    ------
    LogFormatError
        Empty file, bad header, wrong field count, non-numeric or non-finite
        values, an action outside {0, 1}, or p outside (0, 1); the message
        names the offending line.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LogFormatError("file is empty", 1) from None
        d = _parse_header(header)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != d + 3:
                raise LogFormatError(f"expected {d + 3} fields, found {len(row)}", line)
            x = np.array([_float(row[j], f"x{j + 1}", line) for j in range(d)])
            a_val = _float(row[d], "a", line)
            if a_val not in (0.0, 1.0):
                raise LogFormatError(f"a={row[d]!r} must be 0 or 1", line)
            y = _float(row[d + 1], "y", line)
            p = _float(row[d + 2], "p", line)
            if not 0.0 < p < 1.0:
                raise LogFormatError(f"p={row[d + 2]!r} must lie strictly inside (0, 1)", line)
            yield LoggedRecord(x, int(a_val), y, p, line)


@dataclass
class ReplayReport:
    n_total: int
    n_matched: int
    match_fraction: float
    match_fraction_se: float
    matched_value_mean: float
    matched_value_se: float
    baseline_value_mean: float
    baseline_value_se: float
    lift: float
    lift_se: float
    ipw_value: float | None
    ipw_se: float | None
    ipw_ci: tuple | None
    aipw_value: float | None
    variance_method: str
    ready: bool
    beta0: list | None
    beta1: list | None
    beta0_se: list | None
    beta1_se: list | None
    estimator: str
    trajectory: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "trajectory"}
        out["ipw_ci"] = list(self.ipw_ci) if self.ipw_ci is not None else None
        return out


class _Running:
    """Streaming mean and standard error (Welford)."""

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def add(self, v: float) -> None:
        self.n += 1
        delta = v - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (v - self.mean)

    @property
    def se(self) -> float:
        if self.n < 2:
            return float("nan")
        return math.sqrt(self.m2 / (self.n - 1) / self.n)


def _generator(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def replay_run(records: Iterable[LoggedRecord], policy: PolicyConfig, seed: int,
               kernel: KernelConfig = KernelConfig(), level: float = 0.95,
               keep_trajectory: bool = False, max_matched: int | None = None) -> ReplayReport:
    """Evaluate ``policy`` on a logged stream by rejection matching.

    The policy clock advances only on matched records: the t-th kept record
    is decision t of the replayed trajectory (warm-up included). One action
    uniform is drawn per record, whether or not it is kept. With
    ``max_matched`` the replay stops once that many records have been kept.

    Raises
    ------
    LogFormatError
        The stream holds no records, or covariate lengths change mid-stream.
    """
    weighted = policy.estimator == "WLS"
    T0 = policy.T0
    warm = warmup_actions(T0, _generator(seed, _REPLAY, 0))
    rng = _generator(seed, _REPLAY, 1)
    z = float(NormalDist().inv_cdf(0.5 * (1.0 + level)))

    d = None
    est: tuple[ArmEstimator, ArmEstimator] | None = None
    pooled = vs = zero = None
    matched_stats, baseline_stats, match_rate = _Running(), _Running(), _Running()
    trajectory: list = []
    for rec in records:
        if d is None:
            d = len(rec.x)
            policy.validate_for(d)
            est = (ArmEstimator(d, 0, weighted), ArmEstimator(d, 1, weighted))
            pooled = PooledState.empty(d)
            vs = ValueState(d)
            zero = np.zeros(d)
        elif len(rec.x) != d:
            raise LogFormatError(f"expected {d} covariates, found {len(rec.x)}", rec.line)
        baseline_stats.add(rec.y)

        t = vs.t + 1
        b0, b1 = est[0].beta, est[1].beta
        u = rng.random()
        if t <= T0:
            a, pi, diff, eps = int(warm[t - 1]), 0.5, zero, 1.0
        elif b0 is None or b1 is None:
            pi, diff, eps = 0.5, zero, 1.0
            a = int(u < pi)
        else:
            diff = b1 - b0
            eps = policy.schedule(t)
            pi = (1.0 - eps) * (float(diff @ rec.x) >= 0.0) + 0.5 * eps
            a = int(u < pi)
        hit = a == rec.a
        match_rate.add(float(hit))
        if not hit:
            continue
        matched_stats.add(rec.y)
        ipw_update(vs, rec.x, a, pi, rec.y, diff, eps, b0, b1)
        est[a].update(rec.x, rec.y, pi)
        pooled.update(rec.x)
        if keep_trajectory:
            trajectory.append({
                "t": t, "line": rec.line, **{f"x{j + 1}": float(rec.x[j]) for j in range(d)},
                "a": a, "y": float(rec.y), "pi": float(pi), "eps": float(eps),
                "greedy": int(float(diff @ rec.x) >= 0.0),
            })
        if max_matched is not None and matched_stats.n >= max_matched:
            break

    if d is None:
        raise LogFormatError("log holds no records")

    n_total = baseline_stats.n
    n_matched = matched_stats.n
    frac = match_rate.mean
    ready = all(e.beta is not None and e.count >= d for e in est) and n_matched > T0
    ipw = ipw_se = ipw_ci = aipw = None
    betas = [None, None]
    ses = [None, None]
    method = "plug-in" if not weighted else "sandwich+kernel"
    if ready:
        t = vs.t
        eps_now = policy.schedule(t)
        for arm in (0, 1):
            var = wls_sandwich_variance(est[arm], pooled) if weighted else ols_variance(est[arm], t)
            betas[arm] = [float(v) for v in est[arm].beta]
            ses[arm] = [float(v) for v in standard_errors(var, t)]
        if weighted:
            zeta2 = ipw_variance_misspec(vs, est[0], est[1], pooled, eps_now, kernel).value
        else:
            zeta2 = ipw_variance_correct(vs, eps_now)
        ipw = float(vs.value)
        ipw_se = math.sqrt(zeta2 / t)
        ipw_ci = (ipw - z * ipw_se, ipw + z * ipw_se)
        aipw = aipw_value(vs)
    lift = matched_stats.mean - baseline_stats.mean
    lift_se = math.sqrt(matched_stats.se ** 2 + baseline_stats.se ** 2)
    return ReplayReport(
        n_total=n_total, n_matched=n_matched, match_fraction=frac,
        match_fraction_se=math.sqrt(frac * (1.0 - frac) / n_total),
        matched_value_mean=matched_stats.mean, matched_value_se=matched_stats.se,
        baseline_value_mean=baseline_stats.mean, baseline_value_se=baseline_stats.se,
        lift=lift, lift_se=lift_se, ipw_value=ipw, ipw_se=ipw_se, ipw_ci=ipw_ci,
        aipw_value=aipw, variance_method=method, ready=ready,
        beta0=betas[0], beta1=betas[1], beta0_se=ses[0], beta1_se=ses[1],
        estimator=policy.estimator, trajectory=trajectory,
    )


def _binary_ok(reward: RewardSpec) -> bool:
    return reward.phi0.kind == "logistic" and reward.phi1.kind == "logistic"


def make_synthetic_log(reward: RewardSpec, cov: CovariateSpec, n: int, rng: np.random.Generator,
                       path: str | Path, p: float = 0.5, reward_mode: str = "auto") -> Path:
    """Write a log of ``n`` uniformly randomized decisions with model rewards.

    ``reward_mode="binary"`` draws Bernoulli(phi_a(x)) rewards and requires
    every mean in [0, 1]; ``"continuous"`` adds the configured Gaussian noise;
    ``"auto"`` picks binary when both arms are logistic.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 < p < 1.0:
        raise ConfigError("must lie in (0, 1)", "replay.p")
    if reward_mode not in ("auto", "binary", "continuous"):
        raise ConfigError(f"unknown reward mode {reward_mode!r}", "replay.reward_mode")
    binary = reward_mode == "binary" or (reward_mode == "auto" and _binary_ok(reward))
    d = cov.dim
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(1, d + 1)] + ["a", "y", "p"])
        left = n
        while left > 0:
            m = min(left, _SYNTH_CHUNK)
            X = sample_covariates_batch(cov, m, rng)
            a = (rng.random(m) < p).astype(int)
            mean = np.where(a == 1, reward.phi1(X), reward.phi0(X))
            if binary:
                if np.any((mean < 0.0) | (mean > 1.0)):
                    raise ConfigError("binary rewards need mean rewards inside [0, 1]",
                                      "replay.reward_mode")
                y = (rng.random(m) < mean).astype(int)
            else:
                sig = np.where(a == 1, reward.sigma1, reward.sigma0)
                y = mean + sig * rng.standard_normal(m)
            for i in range(m):
                w.writerow([repr(float(v)) for v in X[i]]
                           + [int(a[i]), int(y[i]) if binary else repr(float(y[i])), repr(float(p))])
            left -= m
    return path
