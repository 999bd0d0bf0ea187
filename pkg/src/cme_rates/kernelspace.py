"""Kernels with known Mercer systems, Gram assembly and spectral diagnostics.

The designed kernel lives on ``[0, 1]`` with the uniform marginal and is
defined as its own truncation::

    k(x, x') = sum_{i=1}^{n_trunc} mu_i e_i(x) e_i(x'),   mu_i = i^(-1/p)

with ``e_1 = 1`` and ``e_i(x) = sqrt(2) cos((i - 1) pi x)``.  Because the
expansion is finite, every quantity that depends on the spectrum (interpolation
norms, effective dimension, embedding constants) is exact.

Standard stationary kernels (Gaussian, Laplacian, Matern) are provided for the
Monte-Carlo error path only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.linalg import blas
from scipy.spatial.distance import cdist

from .errors import DomainError, UsageError

DEFAULT_N_TRUNC = 2048
DEFAULT_JITTER = 1e-10
SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Cosine-with-constant eigensystem on [0, 1] with polynomial decay.

    ``mu`` is indexed from zero, so ``mu[0]`` is the eigenvalue of ``e_1``.
    """

    p: float
    n_trunc: int
    mu: np.ndarray = field(repr=False)
    basis_id: str = "cosine"

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        if mu.ndim != 1 or mu.size != self.n_trunc or self.n_trunc < 1:
            raise UsageError("mu must be a vector of length n_trunc >= 1")
        if np.any(mu <= 0) or np.any(np.diff(mu) > 0):
            raise DomainError("eigenvalues must be strictly positive and non-increasing")
        mu.setflags(write=False)
        object.__setattr__(self, "mu", mu)

    @classmethod
    def polynomial(cls, p: float, n_trunc: int = DEFAULT_N_TRUNC) -> "SpectralBasis":
        """Basis with ``mu_i = i^(-1/p)`` for ``i = 1..n_trunc``."""
        if not 0.0 < p <= 1.0:
            raise DomainError(f"decay exponent p must lie in (0, 1], got {p}")
        if n_trunc < 1:
            raise UsageError("n_trunc must be at least 1")
        idx = np.arange(1, n_trunc + 1, dtype=float)
        return cls(p=float(p), n_trunc=int(n_trunc), mu=idx ** (-1.0 / p))

    @property
    def frequencies(self) -> np.ndarray:
        """Cosine frequency (in units of pi) of each eigenfunction."""
        return np.arange(self.n_trunc, dtype=float)

    def features(self, x) -> np.ndarray:
        """Matrix ``Phi[i, l] = e_{i+1}(x[l])`` of shape ``(n_trunc, len(x))``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.ndim != 1:
            raise UsageError("designed-basis points must be scalars in [0, 1]")
        phi = np.cos(np.multiply.outer(self.frequencies * np.pi, x))
        phi[1:] *= SQRT2
        return phi

    def evaluate(self, coeffs, x) -> np.ndarray:
        """Evaluate ``sum_i coeffs[i] e_{i+1}(x)``; ``coeffs`` may carry trailing columns."""
        coeffs = np.asarray(coeffs, dtype=float)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        active = np.flatnonzero(np.any(coeffs != 0, axis=tuple(range(1, coeffs.ndim))))
        if active.size == 0:
            return np.zeros((x.size,) + coeffs.shape[1:])
        k = active.max() + 1
        phi = np.cos(np.multiply.outer(self.frequencies[:k] * np.pi, x))
        phi[1:] *= SQRT2
        return np.tensordot(phi, coeffs[:k], axes=(0, 0))

    def tail_mass(self) -> float:
        """Eigenvalue mass dropped by truncation, ``sum_{i > n_trunc} i^(-1/p)``."""
        s = 1.0 / self.p
        if s <= 1.0:
            return math.inf
        return float(special.zeta(s, self.n_trunc + 1))


def eigenfunction_eval(basis: SpectralBasis, i: int, x) -> np.ndarray | float:
    """Value of the ``i``-th eigenfunction (1-based) at ``x``."""
    if not 1 <= i <= basis.n_trunc:
        raise UsageError(f"eigen-index {i} outside 1..{basis.n_trunc}")
    x_arr = np.asarray(x, dtype=float)
    if np.any((x_arr < 0) | (x_arr > 1)):
        raise DomainError("designed-basis points must lie in [0, 1]")
    if i == 1:
        out = np.ones_like(x_arr)
    else:
        out = SQRT2 * np.cos((i - 1) * np.pi * x_arr)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class Kernel:
    """A positive-definite kernel of one of the supported kinds.

    Use the constructors :meth:`designed`, :meth:`gaussian`, :meth:`laplacian`
    and :meth:`matern` rather than instantiating directly.
    """

    kind: str
    basis: SpectralBasis | None = None
    bandwidth: float = 1.0
    smoothness: float = 1.5

    @classmethod
    def designed(cls, basis: SpectralBasis) -> "Kernel":
        return cls("designed", basis=basis)

    @classmethod
    def gaussian(cls, bandwidth: float = 1.0) -> "Kernel":
        _check_bandwidth(bandwidth)
        return cls("gaussian", bandwidth=float(bandwidth))

    @classmethod
    def laplacian(cls, bandwidth: float = 1.0) -> "Kernel":
        _check_bandwidth(bandwidth)
        return cls("laplacian", bandwidth=float(bandwidth))

    @classmethod
    def matern(cls, smoothness: float = 1.5, bandwidth: float = 1.0) -> "Kernel":
        _check_bandwidth(bandwidth)
        if smoothness <= 0:
            raise DomainError("Matern smoothness must be positive")
        return cls("matern", bandwidth=float(bandwidth), smoothness=float(smoothness))

    @property
    def kappa_sq(self) -> float:
        """Uniform bound on ``k(x, x)``."""
        if self.kind == "designed":
            # attained at x = 0 where every cosine equals one
            return float(self.basis.mu[0] + 2.0 * self.basis.mu[1:].sum())
        return 1.0

    def cross(self, xs, zs) -> np.ndarray:
        """Matrix ``[k(xs[a], zs[b])]``."""
        if self.kind == "designed":
            return self.basis.features(xs).T @ (self.basis.mu[:, None] * self.basis.features(zs))
        return self._stationary(_pairwise_dist(xs, zs))

    def __call__(self, x, x2) -> float:
        return kernel_eval(self, x, x2)

    def _stationary(self, d: np.ndarray) -> np.ndarray:
        r = d / self.bandwidth
        if self.kind == "gaussian":
            return np.exp(-0.5 * r * r)
        if self.kind == "laplacian":
            return np.exp(-r)
        if self.kind == "matern":
            return _matern(r, self.smoothness)
        raise UsageError(f"unknown kernel kind {self.kind!r}")


def _check_bandwidth(bw):
    if not bw > 0:
        raise DomainError("bandwidth must be positive")


def _matern(r: np.ndarray, nu: float) -> np.ndarray:
    if nu == 0.5:
        return np.exp(-r)
    if nu == 1.5:
        s = math.sqrt(3.0) * r
        return (1.0 + s) * np.exp(-s)
    if nu == 2.5:
        s = math.sqrt(5.0) * r
        return (1.0 + s + s * s / 3.0) * np.exp(-s)
    s = np.sqrt(2.0 * nu) * r
    with np.errstate(invalid="ignore"):
        out = (2.0 ** (1.0 - nu) / special.gamma(nu)) * s**nu * special.kv(nu, s)
    return np.where(s == 0.0, 1.0, out)


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if x.ndim == 1:
        x = x[:, None]
    return x


def _pairwise_dist(xs, zs) -> np.ndarray:
    return cdist(_as_points(xs), _as_points(zs))


def kernel_eval(k: Kernel, x, x2) -> float:
    """Single kernel evaluation ``k(x, x2)``.

    For the designed kernel this sums the Mercer series term by term, which
    keeps it independent of the matrix path used by :func:`gram`.
    """
    if k.kind == "designed":
        basis = k.basis
        for v in (x, x2):
            if not 0.0 <= float(v) <= 1.0:
                raise DomainError("designed-kernel points must lie in [0, 1]")
        m = basis.frequencies[1:] * np.pi
        series = np.cos(m * float(x)) * np.cos(m * float(x2))
        return float(basis.mu[0] + 2.0 * np.dot(basis.mu[1:], series))
    return float(k._stationary(_pairwise_dist([x], [x2]))[0, 0])


@dataclass(frozen=True, eq=False)
class GramMatrix:
    entries: np.ndarray
    jitter: float = DEFAULT_JITTER

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def regularized(self, shift: float) -> np.ndarray:
        """``entries + (shift + jitter) I`` as a fresh array."""
        out = np.array(self.entries, copy=True)
        out.flat[:: self.n + 1] += shift + self.jitter
        return out


def designed_gram_from_features(basis: SpectralBasis, phi: np.ndarray) -> np.ndarray:
    """``Phi^T diag(mu) Phi`` via a symmetric rank-k update.

    Only the upper triangle is computed by BLAS; it is mirrored before return.
    """
    scaled = np.sqrt(basis.mu)[:, None] * phi
    upper = blas.dsyrk(1.0, scaled, trans=1)
    return np.triu(upper) + np.triu(upper, 1).T


def gram(k: Kernel, xs, jitter: float | None = None) -> GramMatrix:
    """Gram matrix of ``k`` over ``xs``; jitter defaults to ``1e-10 * kappa_sq``."""
    xs = np.asarray(xs, dtype=float)
    if xs.size == 0:
        raise UsageError("gram requires at least one point")
    if jitter is None:
        jitter = DEFAULT_JITTER * k.kappa_sq
    if k.kind == "designed":
        entries = designed_gram_from_features(k.basis, k.basis.features(xs))
    else:
        entries = k._stationary(_pairwise_dist(xs, xs))
    return GramMatrix(entries=entries, jitter=float(jitter))


def embedding_constant(basis: SpectralBasis, alpha: float, grid_size: int = 4096):
    """Grid and analytic values of the embedding constant ``A`` for power ``alpha``.

    ``A_grid^2`` is the maximum of ``sum_i mu_i^alpha e_i(x)^2`` over a uniform
    grid; ``A_analytic^2 = 1 + 2 sum_{i>=2} i^(-alpha/p)`` bounds it everywhere.
    """
    if not alpha > basis.p:
        raise DomainError(f"embedding needs alpha > p (alpha={alpha}, p={basis.p})")
    if not alpha <= 1.0:
        raise DomainError("alpha must not exceed 1")
    idx = np.arange(1, basis.n_trunc + 1, dtype=float)
    a_analytic_sq = 1.0 + 2.0 * np.sum(idx[1:] ** (-alpha / basis.p))
    grid = np.linspace(0.0, 1.0, grid_size)
    weights = basis.mu**alpha
    a_grid_sq = _max_weighted_square_sum(basis, weights, grid)
    return math.sqrt(a_grid_sq), math.sqrt(a_analytic_sq)


def _max_weighted_square_sum(basis, weights, grid, chunk=512):
    best = 0.0
    for start in range(0, grid.size, chunk):
        phi = basis.features(grid[start : start + chunk])
        best = max(best, float(np.max(weights @ (phi * phi))))
    return best


def effective_dimension(basis: SpectralBasis, lam: float) -> float:
    """``N(lam) = sum_i mu_i / (mu_i + lam)``."""
    if not lam > 0:
        raise DomainError("effective dimension needs lambda > 0")
    mu = basis.mu
    return float(np.sum(mu / (mu + lam)))


def effective_dimension_constant(basis: SpectralBasis, lambdas) -> float:
    """``max N(lam) lam^p`` over ``lambdas``; freeze it once and reuse as the power-law constant."""
    return max(effective_dimension(basis, float(lam)) * float(lam) ** basis.p for lam in lambdas)


def emb_ratio_max(basis: SpectralBasis, alpha: float, lambdas, grid_size: int = 1024) -> float:
    """Largest ``sum_i mu_i e_i(x)^2 / (mu_i + lam)`` divided by ``A_analytic^2 lam^(-alpha)``.

    Values at most one confirm the pointwise bound implied by the embedding property.
    """
    a_sq = embedding_constant(basis, alpha, grid_size=2)[1] ** 2
    grid = np.linspace(0.0, 1.0, grid_size)
    worst = 0.0
    for lam in lambdas:
        weights = basis.mu / (basis.mu + lam)
        h = _max_weighted_square_sum(basis, weights, grid)
        worst = max(worst, h / (a_sq * lam ** (-alpha)))
    return worst
