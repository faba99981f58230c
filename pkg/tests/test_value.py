import math
import warnings

import numpy as np
import pytest
from scipy.stats import norm

from epsgreedy.env import CovariateSpec, RewardFunction, RewardSpec, sample_covariates_batch
from epsgreedy.estimators import ArmEstimator, PooledState, sandwich_meat
from epsgreedy.experiment import ExperimentConfig, compute_targets, run_replication
from epsgreedy.policy import EpsilonSchedule, PolicyConfig
from epsgreedy.value import (
    KernelConfig,
    ValueState,
    aipw_value,
    bandwidth,
    empirical_f,
    fprime_finite_difference,
    ipw_update,
    ipw_value,
    ipw_variance_correct,
    ipw_variance_misspec,
    kernel_fprime,
    optimal_value_mc,
    optimal_value_on,
    policy_value_mc,
    policy_value_on,
    pseudo_outcomes,
)

from conftest import BETA0, BETA1, make_reward

DIFF = np.array(BETA1) - np.array(BETA0)


def test_warmup_contribution():
    vs = ValueState(2)
    ipw_update(vs, [1.0, 0.3], 1, 0.5, 1.0, np.zeros(2), 1.0)
    assert vs.ipw_sum == 2.0 and vs.value == 2.0


def test_two_warmup_steps():
    vs = ValueState(2)
    ipw_update(vs, [1.0, 0.3], 1, 0.5, 1.0, np.zeros(2), 1.0)
    ipw_update(vs, [1.0, -0.2], 0, 0.5, 0.5, np.zeros(2), 1.0)
    assert ipw_value(vs) == 1.0


def test_zeta_hat_example():
    vs = ValueState(2)
    ipw_update(vs, [1.0, 0.0], 1, 0.5, 1.0, np.zeros(2), 1.0)
    ipw_update(vs, [1.0, 0.0], 1, 0.5, 0.0, np.zeros(2), 1.0)
    assert vs.value == 1.0
    assert ipw_variance_correct(vs, 1.0) == pytest.approx(1.0)


def test_zeta_hat_constant_reward_fixture():
    eps, y = 0.2, 1.5
    vs = ValueState(2)
    diff = np.array([1.0, 0.0])  # greedy action is 1 for every x below
    for s in range(5):
        pi = (1 - eps) + eps / 2
        ipw_update(vs, [1.0, 0.1 * s], 1, pi, y, diff, eps)
    P = 1 - eps / 2
    v = y / P
    ref = 2.0 / (2.0 - eps) * (y * y / P) - v * v
    assert ipw_variance_correct(vs, eps, floor=False) == pytest.approx(ref, rel=1e-12)


def test_negative_variance_floored_with_warning():
    # steps recorded with eps = 0.1 but evaluated with the plug-in eps_t = 0:
    # y^2/P - (y/P)^2 < 0 for P < 1
    vs = ValueState(2)
    for _ in range(2):
        ipw_update(vs, [1.0, 0.0], 1, 0.95, 1.0, np.array([1.0, 0.0]), 0.1)
    raw = ipw_variance_correct(vs, 0.0, floor=False)
    assert raw < 0
    with pytest.warns(RuntimeWarning):
        assert ipw_variance_correct(vs, 0.0) == 0.0


def test_degenerate_match_probability():
    vs = ValueState(2)
    with pytest.raises(ValueError):
        ipw_update(vs, [1.0, 0.0], 1, 0.0, 1.0, np.array([1.0, 0.0]), 0.0)


def _run_state(estimator="OLS", kind="linear", T=400, eps=None, rep=0, sigma=0.1):
    sched = (EpsilonSchedule("constant", c=eps) if eps is not None
             else EpsilonSchedule("log_over_sqrt", k=0.1))
    cfg = ExperimentConfig(CovariateSpec(dim=3), make_reward(kind, sigma),
                           PolicyConfig(sched, 20, estimator), T=T, reps=1,
                           value_n=10_000, oracle_n=100_000, mc_value_n=1000)
    targets = compute_targets(cfg)
    return run_replication(cfg, rep, targets, keep_state=True).state, cfg


def test_match_probability_identity():
    state, cfg = _run_state()
    vs = state["value"]
    t = np.arange(1, vs.t + 1)
    eps = cfg.policy.schedule.values(t)
    expected = np.where(t <= cfg.policy.T0, 0.5, 1 - eps / 2)
    np.testing.assert_allclose(vs.pmatch, expected, rtol=0, atol=1e-15)
    assert np.all(vs.column("diff")[: cfg.policy.T0] == 0.0)


def test_step_level_unbiasedness(rng):
    x = np.array([1.0, 0.4, -0.3])
    b_hat = np.array([0.2, 0.5, 0.1])  # estimated rule picks arm 1 here
    reward = make_reward("linear", 1.0)
    eps = 0.2
    pi = (1 - eps) * (b_hat @ x >= 0) + eps / 2
    n = 200_000
    a = (rng.random(n) < pi).astype(int)
    y = np.where(a == 1, reward.phi1(x), reward.phi0(x)) + rng.standard_normal(n)
    contrib = (a == 1) / pi * y
    target = reward.phi1(x)
    assert abs(contrib.mean() - target) < 3 * contrib.std(ddof=1) / math.sqrt(n)


def test_pure_randomization_matches_textbook_ipw(rng):
    n, d = 300, 3
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 2))])
    diffs = rng.normal(size=(n, d))
    a = rng.integers(0, 2, size=n)
    y = rng.normal(size=n)
    vs = ValueState(d)
    for s in range(n):
        ipw_update(vs, X[s], int(a[s]), 0.5, y[s], diffs[s], 1.0)
    greedy = (np.einsum("ij,ij->i", X, diffs) >= 0).astype(int)
    textbook = np.sum(np.where(a == greedy, y / 0.5, 0.0)) / n
    assert vs.value == pytest.approx(textbook, abs=1e-12)


# --- f, f' and the misspecified variance -----------------------------------

def _fixture_state(T, seed=11, weighted=True):
    g = np.random.default_rng(seed)
    d = 3
    vs = ValueState(d)
    est = (ArmEstimator(d, 0, weighted), ArmEstimator(d, 1, weighted))
    pooled = PooledState.empty(d)
    reward = make_reward("exponential", 0.1)
    for s in range(T):
        x = np.append(1.0, g.normal(size=2))
        b0, b1 = est[0].beta, est[1].beta
        if s < 10 or b0 is None or b1 is None:
            diff, eps = np.zeros(d), 1.0
        else:
            diff, eps = b1 - b0, 0.1
        pi = (1 - eps) * (diff @ x >= 0) + eps / 2
        a = int(g.random() < pi)
        y = float(reward.arm(a)(x)) + 0.1 * g.normal()
        ipw_update(vs, x, a, pi, y, diff, eps, b0, b1)
        est[a].update(x, y, pi)
        pooled.update(x)
    return vs, est, pooled


def _pseudo_loop(vs, b0, b1):
    out = []
    for x, a, pi, y in zip(vs.X, vs.a, vs.pi, vs.y):
        u = y - a * (x @ b1) - (1 - a) * (x @ b0)
        out.append((a / pi - (1 - a) / (1 - pi)) * u + x @ (b1 - b0))
    return np.array(out)


def test_empirical_f_formula_oracle():
    vs, est, _ = _fixture_state(200)
    b0, b1 = est[0].beta, est[1].beta
    b = np.array([0.1, 1.0, -0.5])
    ps = _pseudo_loop(vs, b0, b1)
    ref = sum(p for x, p in zip(vs.X, ps) if x @ b >= 0) / vs.t
    assert empirical_f(vs, b, b0, b1) == pytest.approx(ref, abs=1e-10)


def test_empirical_f_residual_free_and_empty():
    g = np.random.default_rng(2)
    beta0, beta1 = np.array(BETA0), np.array(BETA1)
    vs = ValueState(3)
    for s in range(50):
        x = np.append(1.0, g.normal(size=2))
        a = s % 2
        y = float(x @ (beta1 if a else beta0))
        ipw_update(vs, x, a, 0.5, y, np.zeros(3), 1.0)
    b = np.array([0.2, 1.0, 0.0])
    ref = np.mean((vs.X @ b >= 0) * (vs.X @ (beta1 - beta0)))
    assert empirical_f(vs, b, beta0, beta1) == pytest.approx(ref, abs=1e-12)
    assert empirical_f(vs, np.array([-1e6, 0.0, 0.0]), beta0, beta1) == 0.0


def test_pseudo_outcomes_reject_degenerate_pi():
    vs = ValueState(2)
    ipw_update(vs, [1.0, 0.0], 1, 1.0, 1.0, np.array([1.0, 0.0]), 0.0)
    with pytest.raises(ValueError):
        pseudo_outcomes(vs, np.zeros(2), np.zeros(2))


def test_kernel_fprime_formula_and_tail():
    vs, est, _ = _fixture_state(200)
    b0, b1 = est[0].beta, est[1].beta
    kc = KernelConfig()
    h = bandwidth(vs, b0, b1, kc)
    assert h == pytest.approx(np.std(vs.X @ (b1 - b0), ddof=1) * 200 ** (-1 / 3))
    ps = _pseudo_loop(vs, b0, b1)
    b = b1 - b0
    ref = sum(norm.pdf(x @ b / h) * p * x / h for x, p in zip(vs.X, ps)) / 200
    np.testing.assert_allclose(kernel_fprime(vs, b, b0, b1, kc), ref, rtol=1e-10, atol=1e-14)
    far = np.array([1e3, 0.0, 0.0])
    assert np.max(np.abs(kernel_fprime(vs, far, b0, b1, KernelConfig("fixed", h=1.0)))) < 1e-14


def test_kernel_fprime_continuous_in_bandwidth():
    vs, est, _ = _fixture_state(200)
    b0, b1 = est[0].beta, est[1].beta
    b = b1 - b0
    hs = np.linspace(0.2, 0.4, 41)
    vals = np.array([kernel_fprime(vs, b, b0, b1, KernelConfig("fixed", h=h)) for h in hs])
    steps = np.abs(np.diff(vals, axis=0)).max()
    assert steps < 0.05 * np.abs(vals).max()


def test_bandwidth_floor():
    vs = ValueState(2)
    for _ in range(5):
        ipw_update(vs, [1.0, 0.0], 1, 0.5, 1.0, np.zeros(2), 1.0)
    assert bandwidth(vs, np.zeros(2), np.ones(2), KernelConfig()) == 1e-6


def test_misspec_variance_three_terms_oracle():
    vs, est, pooled = _fixture_state(100)
    eps_t = 0.1
    kc = KernelConfig()
    mv = ipw_variance_misspec(vs, est[0], est[1], pooled, eps_t, kc, floor=False)
    t = 100
    b0, b1 = est[0].beta, est[1].beta
    # base term
    contrib = vs.match / vs.pmatch * vs.y
    base = 2 / (2 - eps_t) * np.sum(contrib * vs.y) / t - (contrib.sum() / t) ** 2
    # f', Sigma and H by loops
    h = bandwidth(vs, b0, b1, kc)
    ps = _pseudo_loop(vs, b0, b1)
    fp = sum(norm.pdf(x @ (b1 - b0) / h) * p * x / h for x, p in zip(vs.X, ps)) / t
    Sigma = sum(np.outer(x, x) for x in vs.X) / t
    H = np.zeros((3, 3))
    for e in est:
        for x, y, p1 in zip(e.X, e.y, e.pi):
            p = p1 if e.arm else 1 - p1
            H += np.outer(x, x) * (y - x @ e.beta) ** 2 / p**2 / t
    g = np.linalg.solve(Sigma, fp)
    estimation = 2 * g @ H @ g
    acc = np.zeros(3)
    for row in range(t):
        x, a, y = vs.X[row], vs.a[row], vs.y[row]
        l0 = np.nan_to_num(vs.column("beta0")[row])
        l1 = np.nan_to_num(vs.column("beta1")[row])
        w = vs.match[row] / vs.pmatch[row] * y
        acc += w * (a * (y - x @ l1) - (1 - a) * (y - x @ l0)) * x
    cross = 4 / (2 - eps_t) / t * g @ acc
    assert mv.base == pytest.approx(base, rel=1e-10)
    assert mv.estimation == pytest.approx(estimation, rel=1e-10)
    assert mv.cross == pytest.approx(cross, rel=1e-10, abs=1e-14)
    assert mv.raw == pytest.approx(base + estimation + cross, rel=1e-10)


def test_misspec_variance_reduces_to_correct_on_linear_truth():
    state, cfg = _run_state("WLS", "linear", T=2000, eps=0.1)
    vs, est, pooled = state["value"], state["estimators"], state["pooled"]
    zeta_tilde = ipw_variance_misspec(vs, est[0], est[1], pooled, 0.1).value
    zeta_hat = ipw_variance_correct(vs, 0.1)
    assert abs(zeta_tilde - zeta_hat) <= 0.10 * zeta_hat


def test_misspec_variance_requires_consistent_horizon():
    vs, est, pooled = _fixture_state(50)
    pooled.update(np.array([1.0, 0.0, 0.0]))
    with pytest.raises(ValueError):
        ipw_variance_misspec(vs, est[0], est[1], pooled, 0.1)


# --- AIPW ----------------------------------------------------------------------

def test_aipw_equals_ipw_without_randomization():
    g = np.random.default_rng(4)
    vs = ValueState(3)
    b0, b1 = np.array(BETA0), np.array(BETA1)
    for _ in range(30):
        x = np.append(1.0, g.normal(size=2))
        greedy = int((b1 - b0) @ x >= 0)
        pi = float(greedy)
        ipw_update(vs, x, greedy, pi, g.normal(), b1 - b0, 0.0, b0, b1)
    assert aipw_value(vs) == pytest.approx(vs.value, abs=1e-14)
    assert aipw_value(vs, "taken") == pytest.approx(vs.value, abs=1e-14)


@pytest.mark.parametrize("mode", ["greedy", "taken"])
def test_aipw_ten_step_fixture(mode):
    vs, _, _ = _fixture_state(10)
    total = 0.0
    for s in range(10):
        x, a, y = vs.X[s], vs.a[s], vs.y[s]
        I, P = vs.match[s], vs.pmatch[s]
        diff = vs.column("diff")[s]
        l0 = np.nan_to_num(vs.column("beta0")[s])
        l1 = np.nan_to_num(vs.column("beta1")[s])
        act = float(diff @ x >= 0) if mode == "greedy" else a
        pred = act * (x @ l1) + (1 - act) * (x @ l0)
        total += I / P * y - (I - P) / P * pred
    assert aipw_value(vs, mode) == pytest.approx(total / 10, abs=1e-10)


def test_aipw_rejects_unknown_mode():
    with pytest.raises(ValueError):
        aipw_value(ValueState(2), "other")


# --- value functionals ---------------------------------------------------------

def test_optimal_value_identical_arms(cov3, rng):
    f = RewardFunction("exponential", (0.1, 0.2, 0.3))
    spec = RewardSpec(f, f)
    X = sample_covariates_batch(cov3, 10_000, rng)
    for b in (np.array([1.0, 0, 0]), np.array([-1.0, 2.0, 0.5])):
        assert optimal_value_on(spec, X, b).mean == pytest.approx(f(X).mean(), rel=1e-12)


def test_optimal_value_intercept_only(cov3, linear_reward, rng):
    X = sample_covariates_batch(cov3, 10_000, rng)
    assert optimal_value_on(linear_reward, X, [1.0, 0, 0]).mean == pytest.approx(
        linear_reward.phi1(X).mean(), rel=1e-12)


def test_optimal_value_pin(cov3, linear_reward):
    est = optimal_value_mc(linear_reward, cov3, DIFF, 10_000, np.random.default_rng(2019))
    assert est.mean == pytest.approx(1.0955182306225482, rel=1e-9)
    assert est.se == pytest.approx(0.004627726179285792, rel=1e-6)


def test_optimal_value_matches_closed_form(cov3, linear_reward):
    # V = E[b0'x] + E[(diff'x)_+] with diff'x ~ N(mu, s^2)
    mu = DIFF[0]
    s = math.hypot(DIFF[1], DIFF[2])
    exact = BETA0[0] + mu * norm.cdf(mu / s) + s * norm.pdf(mu / s)
    est = optimal_value_mc(linear_reward, cov3, DIFF, 2_000_000, np.random.default_rng(5))
    assert abs(est.mean - exact) < 4 * est.se


def test_policy_value_examples(cov3, linear_reward, rng):
    X = sample_covariates_batch(cov3, 10_000, rng)
    assert policy_value_on(linear_reward, X, DIFF, 0.0).mean == pytest.approx(
        optimal_value_on(linear_reward, X, DIFF).mean, rel=1e-12)
    half = 0.5 * (linear_reward.phi0(X) + linear_reward.phi1(X)).mean()
    assert policy_value_on(linear_reward, X, -DIFF, 1.0).mean == pytest.approx(half, rel=1e-12)
    mc = policy_value_mc(linear_reward, cov3, DIFF, 0.0, 1000, np.random.default_rng(1))
    opt = optimal_value_mc(linear_reward, cov3, DIFF, 1000, np.random.default_rng(1))
    assert mc.mean == pytest.approx(opt.mean, rel=1e-12)


def test_policy_gap_positive_and_shrinking(cov3, linear_reward):
    X = sample_covariates_batch(cov3, 200_000, np.random.default_rng(3))
    sched = EpsilonSchedule("log_over_sqrt", k=0.1)
    opt = optimal_value_on(linear_reward, X, DIFF).mean
    gaps = [opt - policy_value_on(linear_reward, X, DIFF, sched(t)).mean for t in (200, 800, 2000)]
    assert all(g > 0 for g in gaps) and gaps[0] > gaps[1] > gaps[2]


def test_finite_difference_oracle_on_closed_form():
    # d = 2, constant arm gap c: f(b) = c * Phi(b0 / b1) for b1 > 0
    cov = CovariateSpec(dim=2)
    c = 0.7
    spec = RewardSpec(RewardFunction("linear", (0.0, 0.0)), RewardFunction("linear", (c, 0.0)))
    b = np.array([0.3, 1.2])
    grad, se = fprime_finite_difference(spec, cov, b, 1_000_000, np.random.default_rng(9))
    r = b[0] / b[1]
    exact = c * norm.pdf(r) * np.array([1 / b[1], -b[0] / b[1] ** 2])
    assert np.all(np.abs(grad - exact) < 4 * se + 1e-3 * np.abs(exact))
