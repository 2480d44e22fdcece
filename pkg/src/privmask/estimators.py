"""Point and interval estimators for logistic slopes on raw or masked data.

Three estimators are provided for masked data:

* ``naive_cmle`` -- the logistic score equation with masked data plugged in;
* ``naive_ls``   -- ``theta = b / tau^2`` from least squares on masked data;
* ``corrected_ls`` -- least squares with the known noise variance removed
  from the second moments, with a sandwich covariance.

The least-squares estimators depend on the data only through
``W~^T W~``, ``W~^T y`` and ``y^T y`` (``W~ = (1, W)``), which row-sum
preserving orthogonal masks leave unchanged.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.special import expit, ndtri

from .model import MaskedDataset, RawDataset

log = logging.getLogger(__name__)

__all__ = [
    "Method",
    "EstimationError",
    "SingularDesignError",
    "NoConvergenceError",
    "NoiseDominatedError",
    "CoefficientEstimate",
    "EstimatingFunctionValue",
    "MomentStats",
    "ols_fit",
    "mixture_mle_beta1",
    "logistic_score",
    "solve_logistic_score",
    "naive_cmle",
    "naive_ls",
    "corrected_ls",
    "estimating_function",
    "estimating_functions",
    "mean_estimating_function",
    "estimating_jacobian",
    "sandwich_covariance",
    "normal_quantile",
    "confidence_intervals",
    "estimate",
]

COND_WARN = 1e12


class Method(str, Enum):
    NAIVE_MLE = "NaiveMLE"
    NAIVE_LS = "NaiveLS"
    CORRECTED_LS = "CorrectedLS"
    MIXTURE_MLE = "MixtureMLE"


class EstimationError(ArithmeticError):
    """An estimator has no valid solution for this dataset."""


class SingularDesignError(EstimationError):
    pass


class NoConvergenceError(EstimationError):
    pass


class NoiseDominatedError(EstimationError):
    pass


@dataclass
class CoefficientEstimate:
    method: Method
    theta_hat: np.ndarray
    phi_hat: Optional[float]
    p: int
    cov: Optional[np.ndarray] = None
    ci: Optional[List[Tuple[float, float]]] = None
    alpha: float = 0.05
    diagnostics: dict = field(default_factory=dict)

    @property
    def beta1_hat(self) -> np.ndarray:
        return self.theta_hat[1:self.p + 1]

    @property
    def se(self) -> Optional[np.ndarray]:
        """Standard errors of ``beta1_hat``."""
        if self.cov is None:
            return None
        return np.sqrt(np.diag(self.cov)[1:self.p + 1])


@dataclass(frozen=True)
class EstimatingFunctionValue:
    m_theta: np.ndarray
    m_phi: float

    def as_vector(self) -> np.ndarray:
        return np.append(self.m_theta, self.m_phi)


@dataclass(frozen=True)
class MomentStats:
    """Sufficient statistics ``W~^T W~``, ``W~^T y``, ``y^T y`` and ``n``."""

    ww: np.ndarray
    wy: np.ndarray
    yy: float
    n: int

    @classmethod
    def from_data(cls, y, W) -> "MomentStats":
        y = np.asarray(y, dtype=float).reshape(-1)
        W = np.asarray(W, dtype=float)
        if W.ndim == 1:
            W = W[:, None]
        Wt = np.hstack([np.ones((y.size, 1)), W])
        return cls(Wt.T @ Wt, Wt.T @ y, float(y @ y), y.size)


def _J(k: int) -> np.ndarray:
    J = np.eye(k)
    J[0, 0] = 0.0
    return J


def _warn_condition(A, what):
    c = np.linalg.cond(A)
    if c > COND_WARN:
        log.warning("%s is ill-conditioned (cond=%.3g)", what, c)
    return c


def _pd_factor(A, err, msg):
    try:
        return linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError as exc:
        raise err(msg) from exc


def ols_fit(y, W) -> Tuple[np.ndarray, float]:
    """Least squares of ``y`` on ``(1, W)``.

    Returns ``b_hat`` (intercept first) and ``tau2_hat`` with divisor ``n``.
    """
    st = MomentStats.from_data(y, W)
    if st.n <= st.ww.shape[0]:
        raise SingularDesignError("singular design: need n > p + q + 1")
    _warn_condition(st.ww, "W~^T W~")
    cho = _pd_factor(st.ww, SingularDesignError, "singular design")
    b = linalg.cho_solve(cho, st.wy)
    tau2 = (st.yy - st.wy @ b) / st.n
    return b, max(tau2, 0.0)


def mixture_mle_beta1(raw: RawDataset) -> np.ndarray:
    """Gaussian-mixture MLE of the logistic slope, ``Sigma^-1 (mu1 - mu0)``."""
    if raw.q:
        raise ValueError("mixture MLE needs an unconditional dataset (q = 0)")
    y, X = raw.y_star, raw.X_star
    n1 = y.sum()
    n0 = raw.n - n1
    if n1 == 0 or n0 == 0:
        raise EstimationError("degenerate class")
    mu1 = (y @ X) / n1
    mu0 = ((1.0 - y) @ X) / n0
    R = X - np.where(y[:, None] == 1.0, mu1, mu0)
    S = (R.T @ R) / raw.n
    scale = max(np.abs(S).max(), np.finfo(float).tiny)
    if np.linalg.cond(S / scale) > 1e14:
        raise SingularDesignError("singular pooled covariance")
    cho = _pd_factor(S, SingularDesignError, "singular pooled covariance")
    return linalg.cho_solve(cho, mu1 - mu0)


def logistic_score(beta, y, Wt) -> np.ndarray:
    """Mean logistic score ``(1/n) sum (y_i - logistic(W~_i beta)) W~_i``."""
    return Wt.T @ (y - expit(Wt @ beta)) / y.size


def solve_logistic_score(y, W, tol: float = 1e-10, max_iter: int = 100,
                         max_halvings: int = 30) -> np.ndarray:
    """Root of the logistic score equation by damped Newton iteration.

    ``y`` may be real-valued; the score is linear in ``y``.  Raises
    :class:`NoConvergenceError` if no root is reached in ``max_iter`` steps,
    which is what happens under complete separation.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    n = y.size
    Wt = np.hstack([np.ones((n, 1)), W])
    k = Wt.shape[1]
    if n <= k:
        raise SingularDesignError("singular design: need n > p + q + 1")

    beta = np.zeros(k)
    S = logistic_score(beta, y, Wt)
    for _ in range(max_iter):
        pr = expit(Wt @ beta)
        info = (Wt * (pr * (1.0 - pr))[:, None]).T @ Wt / n
        try:
            step = linalg.solve(info, S, assume_a="pos")
        except (linalg.LinAlgError, ValueError) as exc:
            raise NoConvergenceError("no convergence: singular information matrix") from exc
        # a true root has a vanishing score and a vanishing Newton step;
        # under separation the score decays while the step stays O(1)
        if np.abs(S).max() <= tol and np.abs(step).max() <= 1e-6 * (1.0 + np.abs(beta).max()):
            return beta
        norm0 = np.linalg.norm(S)
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = beta + t * step
            S_cand = logistic_score(cand, y, Wt)
            if np.linalg.norm(S_cand) < norm0 or not np.isfinite(norm0):
                break
            t *= 0.5
        else:
            # no decrease possible: accept only a genuine root at rounding level
            if np.abs(S).max() <= tol and np.abs(step).max() <= 1e-4 * (1.0 + np.abs(beta).max()):
                return beta
            raise NoConvergenceError("no convergence: line search failed")
        beta, S = cand, S_cand
    raise NoConvergenceError(f"no convergence after {max_iter} Newton steps")


def normal_quantile(alpha: float) -> float:
    """Two-sided critical value ``z_{alpha/2}``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return float(ndtri(1.0 - alpha / 2.0))


def confidence_intervals(point, cov, alpha: float = 0.05) -> List[Tuple[float, float]]:
    """Wald intervals ``point_j -/+ z_{alpha/2} sqrt(cov_jj)``."""
    point = np.atleast_1d(np.asarray(point, dtype=float))
    var = np.diag(np.atleast_2d(cov))
    if var.size != point.size:
        raise ValueError("cov does not match the estimate")
    if np.any(var < 0) or not np.all(np.isfinite(var)):
        raise ValueError("invalid covariance")
    half = normal_quantile(alpha) * np.sqrt(var)
    return [(float(b - h), float(b + h)) for b, h in zip(point, half)]


def naive_cmle(masked: MaskedDataset, alpha: float = 0.05, tol: float = 1e-10,
               max_iter: int = 100) -> CoefficientEstimate:
    """Logistic MLE with masked data substituted for raw data, Wald intervals."""
    beta = solve_logistic_score(masked.y, masked.W, tol=tol, max_iter=max_iter)
    Wt = masked.W_tilde
    pr = expit(Wt @ beta)
    info = (Wt * (pr * (1.0 - pr))[:, None]).T @ Wt
    cov = linalg.inv(info)
    cov = 0.5 * (cov + cov.T)
    est = CoefficientEstimate(Method.NAIVE_MLE, beta, None, masked.p, cov=cov, alpha=alpha,
                              diagnostics={"converged": True})
    est.ci = confidence_intervals(est.beta1_hat, cov[1:masked.p + 1, 1:masked.p + 1], alpha)
    return est


def _corrected_solve(st: MomentStats, sigma: float, response_msg: str):
    k = st.ww.shape[0]
    if st.n <= k:
        raise SingularDesignError("singular design: need n > p + q + 1")
    G = st.ww - st.n * sigma**2 * _J(k)
    cond = _warn_condition(G, "corrected moment matrix")
    cho = _pd_factor(G, NoiseDominatedError, "noise-dominated design (G singular)")
    g = linalg.cho_solve(cho, st.wy)
    D = st.yy - st.n * sigma**2 - st.wy @ g
    if not D > 1e-12 * st.yy:
        raise NoiseDominatedError(response_msg)
    phi = st.n / D
    return phi * g, phi, G, cond


def estimating_functions(masked: MaskedDataset, sigma: float, theta, phi) -> np.ndarray:
    """Per-row estimating functions, shape ``(n, p + q + 2)``; last column is ``m_phi``."""
    Wt = masked.W_tilde
    y = masked.y
    theta = np.asarray(theta, dtype=float)
    s2 = sigma**2
    Jt = theta.copy()
    Jt[0] = 0.0
    lin = Wt @ theta
    # (W~_i W~_i^T - s2 J) theta = W~_i (W~_i theta) - s2 J theta
    m_theta = Wt * y[:, None] - (Wt * lin[:, None] - s2 * Jt) / phi
    quad = lin**2 - s2 * (theta @ Jt)
    m_phi = 0.5 / phi - 0.5 * (y**2 - s2) + quad / (2.0 * phi**2)
    return np.hstack([m_theta, m_phi[:, None]])


def estimating_function(w_row, y_i: float, sigma: float, theta, phi: float) -> EstimatingFunctionValue:
    """Corrected estimating function for one masked row ``(y_i, W_i)``."""
    if not phi > 0:
        raise ValueError("phi must be positive")
    wt = np.concatenate([[1.0], np.atleast_1d(np.asarray(w_row, dtype=float))])
    theta = np.asarray(theta, dtype=float)
    A = np.outer(wt, wt) - sigma**2 * _J(wt.size)
    m_theta = wt * y_i - (A @ theta) / phi
    m_phi = 0.5 / phi - 0.5 * (y_i**2 - sigma**2) + (theta @ A @ theta) / (2.0 * phi**2)
    return EstimatingFunctionValue(m_theta, float(m_phi))


def mean_estimating_function(masked: MaskedDataset, sigma: float, theta, phi) -> np.ndarray:
    """``(1/n) sum_i m_i(theta, phi)`` from the sufficient statistics."""
    st = MomentStats.from_data(masked.y, masked.W)
    theta = np.asarray(theta, dtype=float)
    G = st.ww - st.n * sigma**2 * _J(theta.size)
    m_theta = (st.wy - G @ theta / phi) / st.n
    m_phi = 0.5 / phi - 0.5 * (st.yy / st.n - sigma**2) + theta @ G @ theta / (2.0 * phi**2 * st.n)
    return np.append(m_theta, m_phi)


def estimating_jacobian(masked: MaskedDataset, sigma: float, theta, phi) -> np.ndarray:
    """Mean Jacobian of the estimating functions in ``(theta, phi)``."""
    st = MomentStats.from_data(masked.y, masked.W)
    theta = np.asarray(theta, dtype=float)
    k = theta.size
    Gn = (st.ww - st.n * sigma**2 * _J(k)) / st.n
    Gt = Gn @ theta
    A = np.empty((k + 1, k + 1))
    A[:k, :k] = -Gn / phi
    A[:k, k] = Gt / phi**2
    A[k, :k] = Gt / phi**2
    A[k, k] = -0.5 / phi**2 - theta @ Gt / phi**3
    return A


def sandwich_covariance(masked: MaskedDataset, sigma: float, theta_hat, phi_hat: float,
                        return_parts: bool = False):
    """Covariance of ``theta_hat`` from ``A^-1 B A^-1 / n``.

    ``A`` is the mean Jacobian of the estimating functions and ``B`` their
    mean outer product at ``(theta_hat, phi_hat)``.  Returns the
    ``(p+q+1)``-square theta block; with ``return_parts`` also ``(A, B)``.
    """
    if not phi_hat > 0:
        raise ValueError("phi_hat must be positive")
    A = estimating_jacobian(masked, sigma, theta_hat, phi_hat)
    m = estimating_functions(masked, sigma, theta_hat, phi_hat)
    B = m.T @ m / masked.n
    try:
        Ainv = linalg.inv(A)
    except linalg.LinAlgError as exc:
        raise SingularDesignError("non-invertible Jacobian") from exc
    if not np.all(np.isfinite(Ainv)):
        raise SingularDesignError("non-invertible Jacobian")
    V = Ainv @ B @ Ainv.T
    V = 0.5 * (V + V.T)
    k = len(theta_hat)
    cov = V[:k, :k] / masked.n
    if return_parts:
        return cov, A, B
    return cov


def _ls_estimate(masked: MaskedDataset, sigma: float, method: Method, alpha: float,
                 response_msg: str) -> CoefficientEstimate:
    st = MomentStats.from_data(masked.y, masked.W)
    theta, phi, _, cond = _corrected_solve(st, sigma, response_msg)
    cov = sandwich_covariance(masked, sigma, theta, phi)
    est = CoefficientEstimate(method, theta, float(phi), masked.p, cov=cov, alpha=alpha,
                              diagnostics={"converged": True,
                                           "condition_warnings": int(cond > COND_WARN)})
    est.ci = confidence_intervals(est.beta1_hat, cov[1:masked.p + 1, 1:masked.p + 1], alpha)
    return est


def naive_ls(masked: MaskedDataset, alpha: float = 0.05) -> CoefficientEstimate:
    """``theta = b / tau^2`` from least squares on the data as given (noise ignored)."""
    return _ls_estimate(masked, 0.0, Method.NAIVE_LS, alpha, "zero residual variance")


def corrected_ls(masked: MaskedDataset, alpha: float = 0.05) -> CoefficientEstimate:
    """Noise-corrected least-squares estimator with sandwich intervals."""
    return _ls_estimate(masked, masked.sigma, Method.CORRECTED_LS, alpha,
                        "noise-dominated response")


_DISPATCH = {
    Method.NAIVE_MLE: naive_cmle,
    Method.NAIVE_LS: naive_ls,
    Method.CORRECTED_LS: corrected_ls,
}


def estimate(masked: MaskedDataset, method, alpha: float = 0.05) -> CoefficientEstimate:
    return _DISPATCH[Method(method)](masked, alpha)
