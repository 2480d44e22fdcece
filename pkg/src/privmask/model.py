"""Mixture-model parameters and the logistic/linear coefficients they imply.

The generative model is a two-class Gaussian mixture, optionally conditional
on a block of confounders ``Z``::

    X | (y = j, Z) ~ N(mu_j + Z C, Sigma)
    P(y = 1 | Z)   = logistic(gamma0 + Z gamma1)      (conditional)
    P(y = 1)       = p1                               (unconditional)

Under this model ``P(y = 1 | X, Z)`` is exactly logistic, and the slope on
``X`` can be recovered from population least-squares quantities.  Covariate
rows are row vectors throughout, as in ``X @ beta``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import expit

__all__ = [
    "MixtureSpec",
    "LogisticCoefficients",
    "RawDataset",
    "MaskedDataset",
    "LinearPopulationParams",
    "implied_logistic_coefficients",
    "class_probability",
    "population_linear_params",
    "ORACLE_SEED",
    "ORACLE_BUDGET",
]

#: Seed of the Monte Carlo oracle used for conditional-model moments.
ORACLE_SEED = 20240607
ORACLE_BUDGET = 10**7


def _as_row(v, name):
    a = np.atleast_1d(np.asarray(v, dtype=float))
    if a.ndim != 1:
        raise ValueError(f"{name} must be a vector, got shape {a.shape}")
    return a


def _cho(Sigma, msg="Sigma not positive definite"):
    try:
        return linalg.cho_factor(Sigma, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise ValueError(msg) from exc


@dataclass(frozen=True)
class MixtureSpec:
    """Parameters of the (conditional) Gaussian mixture.

    Exactly one of ``p1`` or the weight model ``(gamma0, gamma1)`` is given.
    ``C`` is present iff the model is conditional (``q > 0``).
    """

    mu0: np.ndarray
    mu1: np.ndarray
    Sigma: np.ndarray
    p1: Optional[float] = None
    gamma0: Optional[float] = None
    gamma1: Optional[np.ndarray] = None
    C: Optional[np.ndarray] = None

    def __post_init__(self):
        mu0 = _as_row(self.mu0, "mu0")
        mu1 = _as_row(self.mu1, "mu1")
        p = mu0.size
        if mu1.size != p:
            raise ValueError("mu0 and mu1 must have the same length")
        Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if Sigma.shape != (p, p):
            raise ValueError(f"Sigma must be {p}x{p}, got {Sigma.shape}")
        if not np.allclose(Sigma, Sigma.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Sigma).max())):
            raise ValueError("Sigma must be symmetric")
        _cho(Sigma)

        has_p1 = self.p1 is not None
        has_gamma = self.gamma0 is not None or self.gamma1 is not None
        if has_p1 == has_gamma:
            raise ValueError("give exactly one of p1 or (gamma0, gamma1)")
        if has_p1:
            p1 = float(self.p1)
            # closed interval: degenerate classes are allowed for sampling
            if not 0.0 <= p1 <= 1.0:
                raise ValueError("p1 must lie in [0, 1]")
            if self.C is not None:
                raise ValueError("C requires the conditional weight model (gamma0, gamma1)")
            object.__setattr__(self, "p1", p1)
        else:
            if self.gamma0 is None or self.gamma1 is None or self.C is None:
                raise ValueError("conditional model needs gamma0, gamma1 and C")
            gamma1 = _as_row(self.gamma1, "gamma1")
            q = gamma1.size
            C = np.atleast_2d(np.asarray(self.C, dtype=float))
            if q < 1 or C.shape != (q, p):
                raise ValueError(f"C must be {q}x{p}, got {C.shape}")
            object.__setattr__(self, "gamma0", float(self.gamma0))
            object.__setattr__(self, "gamma1", gamma1)
            object.__setattr__(self, "C", C)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "mu1", mu1)
        object.__setattr__(self, "Sigma", Sigma)

    @property
    def p(self) -> int:
        return self.mu0.size

    @property
    def q(self) -> int:
        return 0 if self.C is None else self.C.shape[0]

    @property
    def conditional(self) -> bool:
        return self.C is not None

    def to_dict(self) -> dict:
        d = {"mu0": self.mu0.tolist(), "mu1": self.mu1.tolist(), "Sigma": self.Sigma.tolist()}
        if self.conditional:
            d.update(gamma0=self.gamma0, gamma1=self.gamma1.tolist(), C=self.C.tolist())
        else:
            d["p1"] = self.p1
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureSpec":
        known = {"mu0", "mu1", "Sigma", "p1", "gamma0", "gamma1", "C"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown spec fields: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class LogisticCoefficients:
    beta0: float
    beta1: np.ndarray
    beta2: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "beta0", float(self.beta0))
        object.__setattr__(self, "beta1", _as_row(self.beta1, "beta1"))
        object.__setattr__(self, "beta2", np.asarray(self.beta2, dtype=float).reshape(-1))
        if not (np.isfinite(self.beta0) and np.all(np.isfinite(self.beta1))
                and np.all(np.isfinite(self.beta2))):
            raise ValueError("logistic coefficients must be finite")


@dataclass(frozen=True)
class RawDataset:
    """Binary outcomes with covariates ``X`` and optional confounders ``Z``."""

    y_star: np.ndarray
    X_star: np.ndarray
    Z_star: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.y_star, dtype=float).reshape(-1)
        X = np.asarray(self.X_star, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != y.size:
            raise ValueError("X_star and y_star row counts differ")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("y_star must be binary (0/1)")
        object.__setattr__(self, "y_star", y)
        object.__setattr__(self, "X_star", X)
        if self.Z_star is not None:
            Z = np.asarray(self.Z_star, dtype=float)
            if Z.ndim == 1:
                Z = Z[:, None]
            if Z.shape[0] != y.size:
                raise ValueError("Z_star and y_star row counts differ")
            if Z.shape[1] == 0:
                Z = None
            object.__setattr__(self, "Z_star", Z)

    @property
    def n(self) -> int:
        return self.y_star.size

    @property
    def p(self) -> int:
        return self.X_star.shape[1]

    @property
    def q(self) -> int:
        return 0 if self.Z_star is None else self.Z_star.shape[1]

    @property
    def W_star(self) -> np.ndarray:
        if self.Z_star is None:
            return self.X_star
        return np.hstack([self.X_star, self.Z_star])


@dataclass(frozen=True)
class MaskedDataset:
    """What the analyst sees: real-valued ``y``, covariates ``W`` and the noise s.d."""

    y: np.ndarray
    W: np.ndarray
    sigma: float
    p: int
    q: int = 0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        W = np.asarray(self.W, dtype=float)
        if W.ndim == 1:
            W = W[:, None]
        p, q = int(self.p), int(self.q)
        if p < 0 or q < 0 or p + q < 1:
            raise ValueError("need p + q >= 1")
        if W.shape != (y.size, p + q):
            raise ValueError(f"W must be {y.size}x{p + q}, got {W.shape}")
        if y.size < p + q + 2:
            raise ValueError("need n >= p + q + 2")
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def W_tilde(self) -> np.ndarray:
        return np.hstack([np.ones((self.n, 1)), self.W])

    @classmethod
    def from_raw(cls, raw: RawDataset, sigma: float = 0.0) -> "MaskedDataset":
        """View raw data as a masked dataset with the identity mask and no noise."""
        return cls(raw.y_star.copy(), raw.W_star.copy(), sigma, raw.p, raw.q)


@dataclass(frozen=True)
class LinearPopulationParams:
    """Population least-squares fit of ``y`` on ``W = (X, Z)``."""

    b0: float
    b_bar: np.ndarray
    tau2: float
    p: int

    def __post_init__(self):
        if not self.tau2 > 0:
            raise ValueError("tau2 must be positive")

    @property
    def b1(self) -> np.ndarray:
        return self.b_bar[: self.p]

    @property
    def b2(self) -> np.ndarray:
        return self.b_bar[self.p:]

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([[self.b0], self.b_bar]) / self.tau2

    @property
    def phi(self) -> float:
        return 1.0 / self.tau2


def implied_logistic_coefficients(spec: MixtureSpec) -> LogisticCoefficients:
    """Logistic coefficients implied by the mixture model."""
    cho = _cho(spec.Sigma)
    dmu = spec.mu1 - spec.mu0
    beta1 = linalg.cho_solve(cho, dmu)
    if spec.conditional:
        quad1 = spec.mu1 @ linalg.cho_solve(cho, spec.mu1)
        quad0 = spec.mu0 @ linalg.cho_solve(cho, spec.mu0)
        beta0 = spec.gamma0 - 0.5 * (quad1 - quad0)
        beta2 = spec.gamma1 - spec.C @ beta1
    else:
        if not 0.0 < spec.p1 < 1.0:
            raise ValueError("implied coefficients need p1 strictly inside (0, 1)")
        beta0 = np.log(spec.p1 / (1.0 - spec.p1)) - 0.5 * (spec.mu1 + spec.mu0) @ beta1
        beta2 = np.zeros(0)
    return LogisticCoefficients(beta0, beta1, beta2)


def class_probability(coef: LogisticCoefficients, x, z=None) -> float:
    """``P(y = 1 | x, z)`` under the logistic model, overflow-safe."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != coef.beta1.size:
        raise ValueError("x has the wrong length")
    t = coef.beta0 + x @ coef.beta1
    if coef.beta2.size:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if z.size != coef.beta2.size:
            raise ValueError("z has the wrong length")
        t += z @ coef.beta2
    return float(expit(t))


def _weight_moments(spec: MixtureSpec, budget: int, seed: int):
    """E[p1(Z)] and Cov(Z, p1(Z)) for Z ~ Uniform[-1, 1]^q, by seeded Monte Carlo."""
    rng = np.random.default_rng(seed)
    q = spec.q
    chunk = 1 << 20
    total, total_z = 0.0, np.zeros(q)
    done = 0
    while done < budget:
        m = min(chunk, budget - done)
        Z = rng.uniform(-1.0, 1.0, size=(m, q))
        w = expit(spec.gamma0 + Z @ spec.gamma1)
        total += w.sum()
        total_z += Z.T @ w
        done += m
    # E[Z] = 0, so Cov(Z, p1(Z)) = E[Z p1(Z)]
    return total / budget, total_z / budget


def population_linear_params(spec: MixtureSpec, oracle_budget: int = ORACLE_BUDGET,
                             seed: int = ORACLE_SEED) -> LinearPopulationParams:
    """Population OLS coefficients ``b0, b_bar`` and residual variance ``tau2``.

    The unconditional case is exact.  For the conditional model only the
    weight moments ``E[p1(Z)]`` and ``E[Z p1(Z)]`` lack a closed form; they
    come from a seeded Monte Carlo oracle, everything else is assembled
    from the moment identities of the mixture.
    """
    p, q = spec.p, spec.q
    dmu = spec.mu1 - spec.mu0
    if spec.conditional:
        if oracle_budget < 1:
            raise ValueError("oracle_budget must be positive")
        py, s_zy = _weight_moments(spec, int(oracle_budget), seed)
        s_zz = np.eye(q) / 3.0
        C = spec.C
        e_z = np.zeros(q)
    else:
        py, s_zy, s_zz = spec.p1, np.zeros(0), np.zeros((0, 0))
        C = np.zeros((0, p))
        e_z = np.zeros(0)
    v_yy = py * (1.0 - py)

    s_xx = (spec.Sigma + v_yy * np.outer(dmu, dmu) + C.T @ s_zz @ C
            + np.outer(dmu, s_zy @ C) + np.outer(C.T @ s_zy, dmu))
    s_xz = np.outer(dmu, s_zy) + C.T @ s_zz
    s_xy = v_yy * dmu + C.T @ s_zy

    var_w = np.block([[s_xx, s_xz], [s_xz.T, s_zz]])
    cov_wy = np.concatenate([s_xy, s_zy])
    cho = _cho(var_w, "degenerate covariates")
    b_bar = linalg.cho_solve(cho, cov_wy)
    tau2 = v_yy - cov_wy @ b_bar

    e_w = np.concatenate([spec.mu0 + py * dmu + e_z @ C, e_z])
    b0 = py - e_w @ b_bar
    return LinearPopulationParams(float(b0), b_bar, float(tau2), p)
