"""Monte Carlo replication harness.

Each replication runs one online trajectory and emits checkpoint records:
per-coordinate parameter estimates with Wald intervals, value estimates with
intervals, the expected value of the policy in force, and cumulative regret.
Records are plain dicts so that the same aggregation code serves fresh runs
and CSV files read back from disk.

Random streams: replication ``r`` draws covariates, the warm-up permutation,
action uniforms and reward noise from four independent substreams keyed by
``(base_seed, r)``. Targets and the per-checkpoint common covariate sets use
separate stream families, so results do not depend on how replications are
distributed over worker processes.
"""
from __future__ import annotations

import math
from statistics import NormalDist
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import pandas as pd

from .env import CovariateSpec, RewardSpec, sample_covariates_batch
from .errors import ConfigError
from .estimators import (
    ArmEstimator,
    PooledState,
    ols_variance,
    standard_errors,
    wls_sandwich_variance,
)
from .policy import PolicyConfig, warmup_actions
from .value import (
    KernelConfig,
    MCEstimate,
    ValueState,
    aipw_value,
    ipw_update,
    ipw_variance_correct,
    ipw_variance_misspec,
    optimal_value_mc,
    optimal_value_on,
    policy_value_on,
)

__all__ = [
    "DEFAULT_CHECKPOINTS",
    "ExperimentConfig",
    "Targets",
    "OracleResult",
    "ReplicationError",
    "ReplicationResult",
    "ExperimentResult",
    "least_false_oracle",
    "compute_targets",
    "run_replication",
    "regret_track",
    "aggregate",
    "run_experiment",
]

DEFAULT_CHECKPOINTS = (25, 50, 100, 200, 400, 800, 1600, 2000)

# stream families for np.random.SeedSequence spawn keys
_REP, _ORACLE, _VALUE, _COMMON = 0, 1, 2, 3
_ORACLE_CHUNK = 250_000


class ReplicationError(RuntimeError):
    """A replication could not produce estimates (e.g. an arm never became identifiable)."""


def _generator(base_seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(base_seed, spawn_key=key)))


@dataclass(frozen=True)
class ExperimentConfig:
    cov: CovariateSpec
    reward: RewardSpec
    policy: PolicyConfig
    T: int = 2000
    reps: int = 1000
    checkpoints: tuple[int, ...] = ()
    base_seed: int = 20190501
    mc_value_n: int = 10_000
    oracle_n: int = 1_000_000
    value_n: int = 1_000_000
    level: float = 0.95
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def __post_init__(self):
        if self.cov.dim != self.reward.dim:
            raise ConfigError(
                f"covariate dim {self.cov.dim} != reward coefficient length {self.reward.dim}",
                "covariates.dim")
        self.policy.validate_for(self.cov.dim)
        if int(self.T) != self.T or self.T <= self.policy.T0:
            raise ConfigError("T must be an integer larger than T0", "T")
        if int(self.reps) != self.reps or self.reps < 1:
            raise ConfigError("reps must be a positive integer", "reps")
        if not 0 < self.level < 1:
            raise ConfigError("must lie in (0, 1)", "level")
        for name in ("mc_value_n", "oracle_n", "value_n"):
            if getattr(self, name) < 2:
                raise ConfigError("must be >= 2", name)
        if self.checkpoints:
            cps = tuple(int(c) for c in self.checkpoints)
            if list(cps) != sorted(set(cps)):
                raise ConfigError("must be strictly increasing", "checkpoints")
            if cps[0] <= self.policy.T0 or cps[-1] > self.T:
                raise ConfigError(f"must lie in [{self.policy.T0 + 1}, {self.T}]", "checkpoints")
        else:
            cps = tuple(c for c in DEFAULT_CHECKPOINTS if self.policy.T0 < c <= self.T)
            if not cps or cps[-1] != self.T:
                cps = cps + (self.T,)
        object.__setattr__(self, "checkpoints", cps)

    @property
    def dim(self) -> int:
        return self.cov.dim

    def to_dict(self) -> dict:
        return {
            "covariates": self.cov.to_dict(),
            "reward": self.reward.to_dict(),
            "policy": self.policy.to_dict(),
            "T": self.T,
            "reps": self.reps,
            "checkpoints": list(self.checkpoints),
            "base_seed": self.base_seed,
            "mc_value_n": self.mc_value_n,
            "oracle_n": self.oracle_n,
            "value_n": self.value_n,
            "level": self.level,
            "kernel": self.kernel.to_dict(),
        }


@dataclass(frozen=True)
class OracleResult:
    beta0: np.ndarray
    beta1: np.ndarray
    se0: np.ndarray
    se1: np.ndarray
    n: int


def _ols_with_hc0(reward: RewardSpec, cov: CovariateSpec, arm: int, n: int,
                  base_seed: int, key: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Least squares of phi_arm(x) + noise on x over n draws, with an HC0 standard error.

    Two passes over deterministic per-chunk substreams keep memory bounded.
    """
    d = cov.dim
    phi = reward.arm(arm)
    sigma = reward.sigma(arm)
    n_chunks = math.ceil(n / _ORACLE_CHUNK)

    def chunks():
        for j in range(n_chunks):
            m = min(_ORACLE_CHUNK, n - j * _ORACLE_CHUNK)
            rng = _generator(base_seed, *key, arm, j)
            X = sample_covariates_batch(cov, m, rng)
            y = phi(X) + sigma * rng.standard_normal(m)
            yield X, y

    gram = np.zeros((d, d))
    moment = np.zeros(d)
    for X, y in chunks():
        gram += X.T @ X
        moment += X.T @ y
    beta = np.linalg.solve(gram, moment)
    meat = np.zeros((d, d))
    for X, y in chunks():
        Xr = X * (y - X @ beta)[:, None]
        meat += Xr.T @ Xr
    bread = np.linalg.inv(gram)
    cov_beta = bread @ meat @ bread
    return beta, np.sqrt(np.diag(cov_beta))


def least_false_oracle(reward: RewardSpec, cov: CovariateSpec, n: int = 1_000_000,
                       base_seed: int = 0) -> OracleResult:
    """Population least-squares coefficients of each arm, approximated from n random samples per arm.

    For a linear truth this recovers the generating coefficients up to Monte
    Carlo error.
    """
    if n <= cov.dim:
        raise ValueError("n must exceed the covariate dimension")
    b0, se0 = _ols_with_hc0(reward, cov, 0, n, base_seed, (_ORACLE,))
    b1, se1 = _ols_with_hc0(reward, cov, 1, n, base_seed, (_ORACLE,))
    return OracleResult(b0, b1, se0, se1, n)


@dataclass(frozen=True)
class Targets:
    """What the estimates are compared against: coefficients and the optimal value."""

    beta0: np.ndarray
    beta1: np.ndarray
    beta0_se: np.ndarray
    beta1_se: np.ndarray
    value: float
    value_se: float
    source: str

    @property
    def beta_diff(self) -> np.ndarray:
        return self.beta1 - self.beta0

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "beta0": [float(v) for v in self.beta0],
            "beta1": [float(v) for v in self.beta1],
            "beta0_se": [float(v) for v in self.beta0_se],
            "beta1_se": [float(v) for v in self.beta1_se],
            "value": float(self.value),
            "value_se": float(self.value_se),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Targets":
        return cls(
            beta0=np.asarray(d["beta0"], float), beta1=np.asarray(d["beta1"], float),
            beta0_se=np.asarray(d["beta0_se"], float), beta1_se=np.asarray(d["beta1_se"], float),
            value=float(d["value"]), value_se=float(d["value_se"]), source=str(d["source"]),
        )


def compute_targets(cfg: ExperimentConfig) -> Targets:
    """True coefficients (linear truth) or least-false ones, plus the optimal value of their rule."""
    if cfg.reward.is_linear:
        b0 = np.asarray(cfg.reward.phi0.beta)
        b1 = np.asarray(cfg.reward.phi1.beta)
        se0 = se1 = np.zeros(cfg.dim)
        source = "true"
    else:
        oracle = least_false_oracle(cfg.reward, cfg.cov, cfg.oracle_n, cfg.base_seed)
        b0, b1, se0, se1 = oracle.beta0, oracle.beta1, oracle.se0, oracle.se1
        source = "least_false"
    v = optimal_value_mc(cfg.reward, cfg.cov, b1 - b0, cfg.value_n,
                         _generator(cfg.base_seed, _VALUE))
    return Targets(b0, b1, se0, se1, v.mean, v.se, source)


@lru_cache(maxsize=64)
def _common_draws(cov: CovariateSpec, base_seed: int, t: int, n: int) -> np.ndarray:
    X = sample_covariates_batch(cov, n, _generator(base_seed, _COMMON, t))
    X.setflags(write=False)
    return X


def regret_track(X: np.ndarray, a: np.ndarray, diff_used: np.ndarray, gap: np.ndarray,
                 truth_diff: np.ndarray):
    """Cumulative regret and its exploration / estimation-error parts.

    Each step is weighted by ``gap`` = |phi1(x) - phi0(x)| (|beta'x| under a
    linear truth). ``R`` counts disagreements of the taken action with the
    oracle rule I{truth_diff'x >= 0}, ``R1`` disagreements with the greedy
    action of the estimate in force, ``R2`` disagreements between the greedy
    and oracle rules.
    """
    opt = (X @ truth_diff >= 0.0).astype(float)
    greedy = (np.einsum("ij,ij->i", X, diff_used) >= 0.0).astype(float)
    a = np.asarray(a, float)
    R = np.cumsum(gap * np.abs(a - opt))
    R1 = np.cumsum(gap * np.abs(a - greedy))
    R2 = np.cumsum(gap * np.abs(greedy - opt))
    return R, R1, R2


@dataclass
class ReplicationResult:
    rep: int
    params: list
    values: list
    regret: list
    fprime: dict = field(default_factory=dict)
    state: dict | None = None


def _interval(est: float, se: float, z: float):
    return est - z * se, est + z * se


def run_replication(cfg: ExperimentConfig, rep: int, targets: Targets,
                    keep_state: bool = False) -> ReplicationResult:
    """Run one online trajectory of length T and collect checkpoint records."""
    d, T, T0 = cfg.dim, cfg.T, cfg.policy.T0
    reward = cfg.reward
    weighted = cfg.policy.estimator == "WLS"
    z = float(NormalDist().inv_cdf(0.5 * (1.0 + cfg.level)))

    X = sample_covariates_batch(cfg.cov, T, _generator(cfg.base_seed, _REP, rep, 0))
    warm = warmup_actions(T0, _generator(cfg.base_seed, _REP, rep, 1))
    U = _generator(cfg.base_seed, _REP, rep, 2).random(T)
    E = _generator(cfg.base_seed, _REP, rep, 3).standard_normal(T)
    phi0, phi1 = reward.phi0(X), reward.phi1(X)
    eps_t = cfg.policy.schedule.values(np.arange(1, T + 1))
    sig = (reward.sigma0, reward.sigma1)

    est = (ArmEstimator(d, 0, weighted), ArmEstimator(d, 1, weighted))
    pooled = PooledState.empty(d)
    vs = ValueState(d)
    zero = np.zeros(d)
    cps = set(cfg.checkpoints)
    label = "ipw_wls" if weighted else "ipw_ols"
    params: list = []
    values: list = []
    fprime: dict = {}

    for s in range(T):
        t = s + 1
        x = X[s]
        b0, b1 = est[0].beta, est[1].beta
        if t <= T0:
            a, pi, diff, eps = int(warm[s]), 0.5, zero, 1.0
        elif b0 is None or b1 is None:
            if t > 4 * T0:
                raise ReplicationError(
                    f"replication {rep}: an arm estimate is still singular at t={t} (> 4*T0)")
            diff, eps, pi = zero, 1.0, 0.5
            a = int(U[s] < pi)
        else:
            diff = b1 - b0
            eps = float(eps_t[s])
            pi = (1.0 - eps) * (float(diff @ x) >= 0.0) + 0.5 * eps
            a = int(U[s] < pi)
        y = (phi1[s] if a else phi0[s]) + sig[a] * E[s]
        ipw_update(vs, x, a, pi, y, diff, eps, b0, b1)
        est[a].update(x, y, pi)
        pooled.update(x)

        if t not in cps:
            continue
        if est[0].beta is None or est[1].beta is None:
            raise ReplicationError(f"replication {rep}: no estimate at checkpoint t={t}")
        for arm in (0, 1):
            e = est[arm]
            var = wls_sandwich_variance(e, pooled) if weighted else ols_variance(e, t)
            se = standard_errors(var, t)
            target = targets.beta1 if arm else targets.beta0
            for j in range(d):
                lo, hi = _interval(e.beta[j], se[j], z)
                params.append({
                    "replication": rep, "t": t, "arm": arm, "coordinate": j,
                    "estimate": float(e.beta[j]), "se": float(se[j]),
                    "ci_lo": float(lo), "ci_hi": float(hi), "target": float(target[j]),
                    "covered": int(lo <= target[j] <= hi),
                })

        eps_now = float(eps_t[s])
        v_hat = vs.value
        if weighted:
            mv = ipw_variance_misspec(vs, est[0], est[1], pooled, eps_now, cfg.kernel, floor=False)
            zeta2_raw = mv.raw
            fprime[t] = [float(v) for v in mv.fprime]
        else:
            zeta2_raw = ipw_variance_correct(vs, eps_now, floor=False)
        floored = zeta2_raw < 0.0
        se_v = math.sqrt(max(zeta2_raw, 0.0) / t)
        lo, hi = _interval(v_hat, se_v, z)
        Xc = _common_draws(cfg.cov, cfg.base_seed, t, cfg.mc_value_n)
        pol_eps = 1.0 if t <= T0 else eps_now
        v_pol = policy_value_on(reward, Xc, diff, pol_eps).mean
        v_opt_common = _common_optimal(cfg, targets, t)
        common = {"policy_value": v_pol, "optimal_value_common": v_opt_common}
        values.append({
            "replication": rep, "t": t, "estimator": label, "estimate": float(v_hat), "se": se_v,
            "ci_lo": float(lo), "ci_hi": float(hi), "target": targets.value,
            "covered": int(lo <= targets.value <= hi), "floored": int(floored), **common,
        })
        values.append({
            "replication": rep, "t": t, "estimator": "aipw", "estimate": aipw_value(vs),
            "se": None, "ci_lo": None, "ci_hi": None, "target": targets.value,
            "covered": None, "floored": None, **common,
        })

    gap = np.abs(phi1 - phi0)
    R, R1, R2 = regret_track(X, vs.a, vs.column("diff"), gap, targets.beta_diff)
    regret = [{"replication": rep, "t": t, "R": float(R[t - 1]), "R1": float(R1[t - 1]),
               "R2": float(R2[t - 1])} for t in cfg.checkpoints]
    state = {"estimators": est, "pooled": pooled, "value": vs} if keep_state else None
    return ReplicationResult(rep, params, values, regret, fprime, state)


def _common_optimal(cfg: ExperimentConfig, targets: Targets, t: int) -> float:
    Xc = _common_draws(cfg.cov, cfg.base_seed, t, cfg.mc_value_n)
    return optimal_value_on(cfg.reward, Xc, targets.beta_diff).mean


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    n = len(x)
    if n < 2:
        return float(np.mean(x)), float("nan")
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(n))


def _opt(v) -> float | None:
    """None for undefined (NaN/inf) statistics so reports never carry NaN."""
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def aggregate(params: list | pd.DataFrame, values: list | pd.DataFrame,
              regret: list | pd.DataFrame) -> dict:
    """Cross-replication summaries per checkpoint.

    Parameters: mean bias and its Monte Carlo standard error, MCSD, mean SE,
    SE/MCSD ratio, coverage and its binomial standard error. Values: the same
    for each value estimator, plus the expected value of the policy in force,
    its 2.5%/97.5% quantiles, and the paired gap to the optimal value on the
    common covariate draws. Regret: mean curves with standard errors.
    Undefined statistics (MCSD of identical replications, ratios over zero)
    are reported as None.
    """
    P = params if isinstance(params, pd.DataFrame) else pd.DataFrame(params)
    Vd = values if isinstance(values, pd.DataFrame) else pd.DataFrame(values)
    Rg = regret if isinstance(regret, pd.DataFrame) else pd.DataFrame(regret)

    out_params = []
    for (t, arm, j), g in P.sort_values(["replication"]).groupby(["t", "arm", "coordinate"], sort=True):
        est = g["estimate"].to_numpy(float)
        n = len(est)
        target = float(g["target"].iloc[0])
        mcsd = float(np.std(est, ddof=1)) if n > 1 else float("nan")
        mean_se = float(g["se"].mean())
        cov = float(g["covered"].mean())
        out_params.append({
            "t": int(t), "arm": int(arm), "coordinate": int(j), "n": n, "target": target,
            "mean_estimate": float(est.mean()), "bias": float(est.mean() - target),
            "bias_mcse": _opt(mcsd / math.sqrt(n)), "mcsd": _opt(mcsd), "mean_se": mean_se,
            "se_ratio": _opt(mean_se / mcsd) if mcsd > 0 else None,
            "coverage": cov, "coverage_se": _opt(math.sqrt(cov * (1 - cov) / n)),
        })

    out_values = []
    for (t, name), g in Vd.sort_values(["replication"]).groupby(["t", "estimator"], sort=True):
        est = g["estimate"].to_numpy(float)
        n = len(est)
        target = float(g["target"].iloc[0])
        mcsd = float(np.std(est, ddof=1)) if n > 1 else float("nan")
        has_se = g["se"].notna().all()
        pol = g["policy_value"].to_numpy(float)
        gap = g["optimal_value_common"].to_numpy(float) - pol
        gap_mean, gap_se = _mean_se(gap)
        row = {
            "t": int(t), "estimator": str(name), "n": n, "target": target,
            "mean_estimate": float(est.mean()), "bias": float(est.mean() - target),
            "bias_mcse": _opt(mcsd / math.sqrt(n)), "mcsd": _opt(mcsd),
            "policy_value_mean": float(pol.mean()),
            "policy_value_q025": float(np.quantile(pol, 0.025)),
            "policy_value_q975": float(np.quantile(pol, 0.975)),
            "optimal_value_common": float(g["optimal_value_common"].iloc[0]),
            "gap_mean": gap_mean, "gap_se": _opt(gap_se),
        }
        if has_se:
            mean_se = float(g["se"].astype(float).mean())
            cov = float(g["covered"].astype(float).mean())
            row.update(
                mean_se=mean_se, se_ratio=_opt(mean_se / mcsd) if mcsd > 0 else None,
                coverage=cov, coverage_se=_opt(math.sqrt(cov * (1 - cov) / n)),
                floored_fraction=float(g["floored"].astype(float).mean()),
            )
        out_values.append(row)

    out_regret = []
    for t, g in Rg.sort_values(["replication"]).groupby("t", sort=True):
        row = {"t": int(t), "n": len(g)}
        for col in ("R", "R1", "R2"):
            m, se = _mean_se(g[col].to_numpy(float))
            row[col] = m
            row[f"{col}_se"] = _opt(se)
        out_regret.append(row)

    return {"params": out_params, "values": out_values, "regret": out_regret}


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    targets: Targets
    params: list
    values: list
    regret: list
    fprime: dict
    report: dict


def _run_block(cfg: ExperimentConfig, targets: Targets, reps: list[int]) -> list[ReplicationResult]:
    return [run_replication(cfg, r, targets) for r in reps]


def run_experiment(cfg: ExperimentConfig, threads: int = 1,
                   targets: Targets | None = None) -> ExperimentResult:
    """Run all replications (optionally over worker processes) and aggregate.

    Output is identical for any ``threads``: every replication owns its
    random streams and results are reassembled in replication order.
    """
    if targets is None:
        targets = compute_targets(cfg)
    reps = list(range(cfg.reps))
    if threads <= 1 or cfg.reps == 1:
        results = _run_block(cfg, targets, reps)
    else:
        n_blocks = min(cfg.reps, 4 * threads)
        blocks = [reps[i::n_blocks] for i in range(n_blocks)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_run_block, cfg, targets, b) for b in blocks]
            results = [r for f in futures for r in f.result()]
        results.sort(key=lambda r: r.rep)
    params = [row for r in results for row in r.params]
    values = [row for r in results for row in r.values]
    regret = [row for r in results for row in r.regret]
    fprime = {r.rep: r.fprime for r in results if r.fprime}
    report = aggregate(params, values, regret)
    return ExperimentResult(cfg, targets, params, values, regret, fprime, report)
