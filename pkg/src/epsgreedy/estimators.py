"""Online per-arm least squares (OLS and inverse-propensity WLS) with inference.

The running Gram matrix and moment vector define the estimate; the per-arm
rows are retained as well because the variance estimators evaluate residuals
against the *current* coefficients retrospectively.
"""
from __future__ import annotations

import math
from statistics import NormalDist
from dataclasses import dataclass

import numpy as np

from .env import Observation
from .errors import NotReadyError, WeightDegeneracyError

__all__ = [
    "COND_THRESHOLD",
    "ArmEstimator",
    "PooledState",
    "TailBoundInputs",
    "update",
    "solve_beta",
    "ols_variance",
    "sandwich_meat",
    "wls_sandwich_variance",
    "standard_errors",
    "wald_ci",
    "diff_inference",
    "ols_tail_bound",
    "wls_tail_bound",
]

COND_THRESHOLD = 1e10


class _Rows:
    """Append-only row store backed by a doubling numpy buffer."""

    def __init__(self, width: int, capacity: int = 64):
        self._buf = np.empty((capacity, width))
        self.n = 0

    def append(self, row) -> None:
        if self.n == self._buf.shape[0]:
            grown = np.empty((2 * self._buf.shape[0], self._buf.shape[1]))
            grown[: self.n] = self._buf[: self.n]
            self._buf = grown
        self._buf[self.n] = row
        self.n += 1

    @property
    def data(self) -> np.ndarray:
        return self._buf[: self.n]


class ArmEstimator:
    """Running least-squares state for one arm.

    Parameters
    ----------
    dim : int
        Covariate dimension including the intercept.
    arm : {0, 1}
        Which action this estimator tracks. Determines the weight 1/pi (arm 1)
        or 1/(1 - pi) (arm 0) when ``weighted``.
    weighted : bool
        False for online OLS, True for the inverse-propensity WLS estimator.
    cond_threshold : float
        Gram matrices with a larger condition number are treated as singular.
    """

    def __init__(self, dim: int, arm: int, weighted: bool = False,
                 cond_threshold: float = COND_THRESHOLD):
        if arm not in (0, 1):
            raise ValueError("arm must be 0 or 1")
        self.dim = dim
        self.arm = arm
        self.weighted = weighted
        self.cond_threshold = cond_threshold
        self.gram = np.zeros((dim, dim))
        self.moment = np.zeros(dim)
        self.count = 0
        self.beta: np.ndarray | None = None
        # columns: x (dim), y, propensity of a=1, weight
        self._rows = _Rows(dim + 3)

    @property
    def ready(self) -> bool:
        return self.beta is not None

    @property
    def X(self) -> np.ndarray:
        return self._rows.data[:, : self.dim]

    @property
    def y(self) -> np.ndarray:
        return self._rows.data[:, self.dim]

    @property
    def pi(self) -> np.ndarray:
        return self._rows.data[:, self.dim + 1]

    @property
    def weights(self) -> np.ndarray:
        return self._rows.data[:, self.dim + 2]

    def weight_for(self, pi: float) -> float:
        if not self.weighted:
            return 1.0
        p = pi if self.arm == 1 else 1.0 - pi
        if not 0.0 < p < 1.0:
            raise WeightDegeneracyError(
                f"propensity {pi} gives an infinite weight for arm {self.arm}; "
                "the exploration floor must be positive for WLS"
            )
        return 1.0 / p

    def update(self, x: np.ndarray, y: float, pi: float) -> None:
        """Add one row routed to this arm and refresh the coefficients."""
        w = self.weight_for(pi)
        self.gram += w * np.outer(x, x)
        self.moment += (w * y) * x
        self.count += 1
        row = np.empty(self.dim + 3)
        row[: self.dim] = x
        row[self.dim:] = (y, pi, w)
        self._rows.append(row)
        self.beta = solve_beta(self)

    def residuals(self, beta: np.ndarray | None = None) -> np.ndarray:
        beta = self.beta if beta is None else beta
        if beta is None:
            raise NotReadyError(f"arm {self.arm} estimator is not ready")
        return self.y - self.X @ beta


@dataclass
class PooledState:
    """Unweighted second moment of all covariates seen so far."""

    gram: np.ndarray
    t: int = 0

    @classmethod
    def empty(cls, dim: int) -> "PooledState":
        return cls(np.zeros((dim, dim)), 0)

    def update(self, x: np.ndarray) -> None:
        self.gram += np.outer(x, x)
        self.t += 1

    @property
    def mean(self) -> np.ndarray:
        """(1/t) sum x x'."""
        return self.gram / self.t


def update(state: ArmEstimator, obs: Observation) -> ArmEstimator:
    """Route ``obs`` into ``state`` (which must track arm ``obs.a``)."""
    if obs.a != state.arm:
        raise ValueError(f"observation with a={obs.a} routed to arm {state.arm}")
    state.update(np.asarray(obs.x, dtype=float), obs.y, obs.pi)
    return state


def _well_conditioned(gram: np.ndarray, threshold: float) -> bool:
    ev = np.linalg.eigvalsh(gram)
    return ev[0] > 0 and ev[-1] <= threshold * ev[0]


def solve_beta(state: ArmEstimator) -> np.ndarray | None:
    """gram^-1 moment, or None while the Gram matrix is (numerically) singular."""
    if state.count < state.dim:
        return None
    if not _well_conditioned(state.gram, state.cond_threshold):
        return None
    return np.linalg.solve(state.gram, state.moment)


def _require_ready(state: ArmEstimator) -> np.ndarray:
    if state.beta is None:
        raise NotReadyError(f"arm {state.arm} estimator is not ready")
    return state.beta


def ols_variance(state: ArmEstimator, t: int) -> np.ndarray:
    """Plug-in estimate of the asymptotic covariance of sqrt(t)(beta_hat - beta).

    (mean squared residual of the arm) * ((1/t) sum_{a_s = i} x x')^{-1}, with
    residuals taken against the current coefficients over all rows of the arm.
    """
    beta = _require_ready(state)
    X = state.X
    resid = state.y - X @ beta
    s2 = float(resid @ resid) / state.count
    V = s2 * t * np.linalg.inv(X.T @ X)
    return 0.5 * (V + V.T)


def sandwich_meat(state: ArmEstimator, t: int, beta: np.ndarray | None = None) -> np.ndarray:
    """(1/t) sum_{a_s = i} x r^2 x' / P(a_s = i)^2 with r = y - x'beta."""
    beta = _require_ready(state) if beta is None else beta
    X = state.X
    p = state.pi if state.arm == 1 else 1.0 - state.pi
    if np.any(p <= 0.0):
        raise WeightDegeneracyError("zero propensity in retained rows")
    r = (state.y - X @ beta) / p
    Xr = X * r[:, None]
    H = Xr.T @ Xr / t
    return 0.5 * (H + H.T)


def wls_sandwich_variance(state: ArmEstimator, pooled: PooledState) -> np.ndarray:
    """Sigma_t^{-1} H_t Sigma_t^{-1}, with Sigma_t the pooled unweighted second moment."""
    t = pooled.t
    sigma = pooled.mean
    if not _well_conditioned(sigma, COND_THRESHOLD):
        raise np.linalg.LinAlgError("pooled second-moment matrix is singular")
    sigma_inv = np.linalg.inv(sigma)
    V = sigma_inv @ sandwich_meat(state, t) @ sigma_inv
    return 0.5 * (V + V.T)


def standard_errors(var: np.ndarray, t: int) -> np.ndarray:
    """sqrt(diag(var) / t); tiny negative round-off on the diagonal is zeroed."""
    diag = np.diag(np.asarray(var, dtype=float)).copy()
    tol = 1e-12 * max(1.0, float(np.max(np.abs(diag))))
    if np.any(diag < -tol):
        raise ValueError("variance estimate has a negative diagonal entry")
    return np.sqrt(np.maximum(diag, 0.0) / t)


def wald_ci(beta: np.ndarray, var: np.ndarray, t: int, level: float = 0.95):
    """Per-coordinate Wald interval beta_j -/+ z * sqrt(var_jj / t).

    Returns
    -------
    lo, hi : ndarray
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    z = NormalDist().inv_cdf(0.5 * (1.0 + level))
    half = z * standard_errors(var, t)
    beta = np.asarray(beta, dtype=float)
    return beta - half, beta + half


def diff_inference(state0: ArmEstimator, state1: ArmEstimator,
                   var0: np.ndarray, var1: np.ndarray):
    """Estimate and covariance of beta1 - beta0 (arms are asymptotically independent)."""
    b0 = _require_ready(state0)
    b1 = _require_ready(state1)
    return b1 - b0, np.asarray(var0) + np.asarray(var1)


@dataclass(frozen=True)
class TailBoundInputs:
    t: float
    eps: float
    d: int
    sigma: float
    L_x: float
    lam: float
    kappa: float
    L_phi: float = 0.0


def _exp_ratio(num: float, den: float) -> float:
    """exp(-num/den) with the den -> 0+ limit."""
    if den == 0.0:
        return 0.0 if num > 0 else 1.0
    return math.exp(-num / den)


def ols_tail_bound(inp: TailBoundInputs, clamp: bool = True) -> float:
    """Lower bound on P(||beta_hat_t - beta||_1 <= kappa) for online OLS."""
    t, e, d, s, L, lam, k = inp.t, inp.eps, inp.d, inp.sigma, inp.L_x, inp.lam, inp.kappa
    den = 128 * d**2 * s**2 * L**2
    value = (
        1.0
        - math.exp(-t * e / 8)
        - d * math.exp(-t * e * lam / (32 * L**2))
        - 2 * d * _exp_ratio(t * e**2 * lam**2 * k**2, den)
        + 2 * d**2 * _exp_ratio(t * e**2 * lam**2 * k**2 + 4 * t * e * lam * d**2 * s**2, den)
    )
    return min(max(value, 0.0), 1.0) if clamp else value


def wls_tail_bound(inp: TailBoundInputs, clamp: bool = True) -> float:
    """Lower bound on P(||beta_tilde_t - beta*||_1 <= kappa) for online WLS."""
    t, e, d, s, L, lam, k, Lp = (inp.t, inp.eps, inp.d, inp.sigma, inp.L_x, inp.lam,
                                 inp.kappa, inp.L_phi)
    den_phi = 512 * d**2 * L**2 * Lp**2
    den_sig = 512 * d**2 * s**2 * L**2
    value = (
        1.0
        - math.exp(-t * e / 8)
        - d * math.exp(-t * e * lam / (32 * L**2))
        - 2 * d * _exp_ratio(t * e**4 * lam**2 * k**2, den_phi)
        - 2 * d * _exp_ratio(t * e**2 * lam**2 * k**2, den_sig)
        + 2 * d**2 * _exp_ratio(t * e**4 * lam**2 * k**2 + 8 * t * e * lam * d**2 * Lp**2, den_phi)
        + 2 * d**2 * _exp_ratio(t * e**2 * lam**2 * k**2 + 8 * t * e * lam * d**2 * s**2, den_sig)
    )
    return min(max(value, 0.0), 1.0) if clamp else value
