"""Seeded data generation and TM²+Noise masking.

Random streams come from numpy's ``SeedSequence`` (PCG64 bit generator,
ziggurat normals).  A :class:`SeedSpec` names a stream by
``(root_seed, stream_index)``; sub-streams for the pieces of one replicate
are spawned by extending the spawn key, so no two purposes share draws.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft, linalg
from scipy.linalg import lapack
from scipy.special import expit

from .model import MaskedDataset, MixtureSpec, RawDataset

__all__ = [
    "SeedSpec",
    "OrthogonalMask",
    "HaarMask",
    "FastOrthogonalMask",
    "HAAR_MAX_N",
    "sample_mixture",
    "sample_conditional_mixture",
    "sample_dataset",
    "random_row_sum_preserving_orthogonal",
    "fast_row_sum_preserving_orthogonal",
    "draw_mask",
    "apply_tm2_noise",
]

#: Largest n for which ``mask="auto"`` builds a dense Haar mask.
HAAR_MAX_N = 1000

# sub-stream keys within one SeedSpec
_DATA, _MASK, _NOISE = 0, 1, 2


@dataclass(frozen=True)
class SeedSpec:
    root_seed: int
    stream_index: int = 0

    def __post_init__(self):
        if not 0 <= self.root_seed < 2**64:
            raise ValueError("root_seed must be a 64-bit unsigned integer")
        if self.stream_index < 0:
            raise ValueError("stream_index must be nonnegative")

    def generator(self, *subkeys: int) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.root_seed),
                                    spawn_key=(int(self.stream_index), *map(int, subkeys)))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class OrthogonalMask:
    """Dense ``n x n`` orthogonal matrix with ``M^T 1 = 1``."""

    M: np.ndarray

    @property
    def n(self) -> int:
        return self.M.shape[0]

    def apply(self, A: np.ndarray) -> np.ndarray:
        return self.M @ A

    def to_dense(self) -> np.ndarray:
        return self.M

    def check(self, tol: float = 1e-10) -> None:
        M = self.to_dense()
        n = M.shape[0]
        ones = np.ones(n)
        if np.abs(M.T @ M - np.eye(n)).max() > tol:
            raise AssertionError("mask is not orthogonal")
        if np.abs(M.T @ ones - ones).max() > tol or np.abs(M @ ones - ones).max() > tol:
            raise AssertionError("mask does not preserve row sums")


class FastOrthogonalMask:
    """Implicit row-sum-preserving orthogonal operator for large ``n``.

    A product of rounds ``K_r P_r`` where ``P_r`` is a random permutation and
    ``K_r = C^T diag(1, s_r) C`` flips the signs of the non-constant
    coefficients of the orthonormal DCT-II ``C`` (whose first row is
    constant).  Each factor is orthogonal and fixes ``1_n``, so
    ``M^T M = I`` and ``M 1 = M^T 1 = 1`` hold up to rounding.  Applying it
    costs ``O(n log n)`` per column.
    """

    def __init__(self, n: int, rng: np.random.Generator, rounds: int = 4):
        if n < 1:
            raise ValueError("n must be positive")
        self.n = n
        self._perms = [rng.permutation(n) for _ in range(rounds)]
        self._signs = []
        for _ in range(rounds):
            s = rng.choice([-1.0, 1.0], size=n)
            s[0] = 1.0
            self._signs.append(s)

    def apply(self, A: np.ndarray) -> np.ndarray:
        A = np.asarray(A, dtype=float)
        vec = A.ndim == 1
        if A.shape[0] != self.n:
            raise ValueError("row count does not match the mask")
        # transforms run along the last axis of a contiguous copy
        X = np.array(A.reshape(self.n, -1).T, order="C")
        for perm, sign in zip(self._perms, self._signs):
            c = fft.dct(X[:, perm], type=2, norm="ortho", axis=-1)
            X = fft.idct(c * sign, type=2, norm="ortho", axis=-1)
        out = X.T
        return out[:, 0].copy() if vec else np.ascontiguousarray(out)

    def to_dense(self) -> np.ndarray:
        return self.apply(np.eye(self.n))

    def check(self, tol: float = 1e-10) -> None:
        OrthogonalMask(self.to_dense()).check(tol)


def _check_n(n):
    if int(n) != n or n < 1:
        raise ValueError("n must be a positive integer")
    return int(n)


def sample_mixture(spec: MixtureSpec, n: int, seed: SeedSpec) -> RawDataset:
    """Draw ``n`` rows from the unconditional two-class Gaussian mixture."""
    if spec.conditional:
        raise ValueError("use sample_conditional_mixture")
    n = _check_n(n)
    rng = seed.generator(_DATA)
    L = linalg.cholesky(spec.Sigma, lower=True)
    y = (rng.random(n) < spec.p1).astype(float)
    E = rng.standard_normal((n, spec.p))
    X = np.where(y[:, None] == 1.0, spec.mu1, spec.mu0) + E @ L.T
    return RawDataset(y, X)


def sample_conditional_mixture(spec: MixtureSpec, n: int, seed: SeedSpec) -> RawDataset:
    """Draw ``n`` rows from the conditional mixture with ``Z ~ Uniform[-1, 1]^q``."""
    if not spec.conditional:
        raise ValueError("conditional spec required")
    n = _check_n(n)
    rng = seed.generator(_DATA)
    L = linalg.cholesky(spec.Sigma, lower=True)
    Z = rng.uniform(-1.0, 1.0, size=(n, spec.q))
    y = (rng.random(n) < expit(spec.gamma0 + Z @ spec.gamma1)).astype(float)
    E = rng.standard_normal((n, spec.p))
    X = np.where(y[:, None] == 1.0, spec.mu1, spec.mu0) + Z @ spec.C + E @ L.T
    return RawDataset(y, X, Z)


def sample_dataset(spec: MixtureSpec, n: int, seed: SeedSpec) -> RawDataset:
    if spec.conditional:
        return sample_conditional_mixture(spec, n, seed)
    return sample_mixture(spec, n, seed)


def _householder_apply(u: np.ndarray, A: np.ndarray) -> np.ndarray:
    # H = I - 2 v v^T / (v^T v) with v = e1 - u, so H e1 = u
    v = -u.copy()
    v[0] += 1.0
    vv = v @ v
    if vv == 0.0:
        return A
    return A - np.outer(v, (2.0 / vv) * (v @ A))


class HaarMask:
    """Haar-distributed orthogonal matrix on the subgroup fixing ``1_n``.

    ``M = H diag(1, Q) H`` where ``H`` is the Householder reflection taking
    ``e1`` to ``1/sqrt(n)`` and ``Q`` is Haar on ``O(n - 1)``: the Q factor of
    a Gaussian matrix with the signs of ``diag(R)`` folded in.  ``Q`` is kept
    in LAPACK's compact reflector form, so ``apply`` costs ``O(n^2)`` per
    column and the dense ``M`` is only built on request.
    """

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self._u = np.full(n, 1.0 / np.sqrt(n))
        self._qr = None
        if n > 1:
            (qr, tau), _ = linalg.qr(rng.standard_normal((n - 1, n - 1)), mode="raw")
            self._qr, self._tau = qr, tau
            self._sign = np.sign(np.diag(qr))
        self._M = None

    def apply(self, A: np.ndarray) -> np.ndarray:
        A = np.asarray(A, dtype=float)
        vec = A.ndim == 1
        if A.shape[0] != self.n:
            raise ValueError("row count does not match the mask")
        X = _householder_apply(self._u, A.reshape(self.n, -1).copy())
        if self._qr is not None:
            tail = np.asfortranarray(X[1:] * self._sign[:, None])
            out, _, info = lapack.dormqr("L", "N", self._qr, self._tau, tail,
                                         lwork=max(1, 64 * tail.shape[1]))
            if info != 0:
                raise linalg.LinAlgError("ormqr failed")
            X[1:] = out
        X = _householder_apply(self._u, X)
        return X[:, 0] if vec else X

    def to_dense(self) -> np.ndarray:
        if self._M is None:
            self._M = self.apply(np.eye(self.n))
        return self._M

    @property
    def M(self) -> np.ndarray:
        return self.to_dense()

    def check(self, tol: float = 1e-10) -> None:
        OrthogonalMask(self.to_dense()).check(tol)


def random_row_sum_preserving_orthogonal(n: int, seed: SeedSpec) -> HaarMask:
    """Haar mask on the orthogonal matrices with ``M^T 1 = 1`` (see :class:`HaarMask`)."""
    return HaarMask(_check_n(n), seed.generator(_MASK))


def fast_row_sum_preserving_orthogonal(n: int, seed: SeedSpec) -> FastOrthogonalMask:
    return FastOrthogonalMask(_check_n(n), seed.generator(_MASK))


def draw_mask(n: int, seed: SeedSpec, mask: str = "auto"):
    """Mask operator for ``n`` rows.

    ``mask`` is ``"haar"`` (dense), ``"fast"`` (implicit), ``"auto"``
    (dense up to :data:`HAAR_MAX_N` rows) or ``"identity"``, a test hook that
    forces ``M = I``.
    """
    if mask == "auto":
        mask = "haar" if n <= HAAR_MAX_N else "fast"
    if mask == "haar":
        return random_row_sum_preserving_orthogonal(n, seed)
    if mask == "fast":
        return fast_row_sum_preserving_orthogonal(n, seed)
    if mask == "identity":
        return OrthogonalMask(np.eye(n))
    raise ValueError(f"unknown mask kind {mask!r}")


def apply_tm2_noise(raw: RawDataset, sigma: float, seed: SeedSpec,
                    mask: str = "auto") -> MaskedDataset:
    """Release ``W = M W* + sigma U`` and ``y = M y* + sigma v``.

    The mask is drawn fresh and discarded; only the masked data and
    ``sigma`` are returned.
    """
    if not sigma >= 0:
        raise ValueError("sigma must be nonnegative")
    n = raw.n
    M = draw_mask(n, seed, mask)
    stacked = np.hstack([raw.y_star[:, None], raw.W_star])
    out = M.apply(stacked)
    if sigma > 0:
        rng = seed.generator(_NOISE)
        out += sigma * rng.standard_normal(out.shape)
    return MaskedDataset(out[:, 0], out[:, 1:], sigma, raw.p, raw.q)
