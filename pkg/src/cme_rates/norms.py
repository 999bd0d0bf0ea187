"""Interpolation norms of H_Y-valued functions through coefficient matrices.

A function ``F`` with values in the span of two orthonormal output directions
``d_1, d_2`` is stored as ``a[i, j] = <F_j, e_i>_{L2}``.  Then

    ||F||_gamma^2 = sum_{i, j} mu_i^(-gamma) a[i, j]^2,

``gamma = 0`` being the L2(pi; H_Y) norm.  Everything here is exact for the
designed kernel; other input kernels only get Monte-Carlo L2 errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, UsageError
from .kernelspace import SpectralBasis, effective_dimension

SUP_GRID = 4096


@dataclass(frozen=True, eq=False)
class CoefficientMatrix:
    values: np.ndarray = field(repr=False)
    basis: SpectralBasis

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != self.basis.n_trunc:
            raise UsageError("coefficient matrix must have one row per eigenfunction")
        object.__setattr__(self, "values", values)

    def _other(self, other):
        if other.basis is not self.basis and not np.array_equal(other.basis.mu, self.basis.mu):
            raise UsageError("coefficient matrices refer to different bases")
        return other.values

    def __add__(self, other):
        return CoefficientMatrix(self.values + self._other(other), self.basis)

    def __sub__(self, other):
        return CoefficientMatrix(self.values - self._other(other), self.basis)

    def __mul__(self, scalar):
        return CoefficientMatrix(self.values * float(scalar), self.basis)

    __rmul__ = __mul__

    def evaluate(self, x) -> np.ndarray:
        """Output coordinates ``F(x)`` in the ``d`` basis, shape ``(len(x), n_cols)``."""
        return self.basis.evaluate(self.values, x)

    def sup_norm(self, grid_size: int = SUP_GRID, chunk: int = 1024) -> float:
        """Grid maximum of ``||F(x)||_{H_Y}``."""
        grid = np.linspace(0.0, 1.0, grid_size)
        best = 0.0
        for start in range(0, grid.size, chunk):
            vals = self.evaluate(grid[start : start + chunk])
            best = max(best, float(np.sqrt(np.max(np.sum(vals * vals, axis=1)))))
        return best


def gamma_norm(c: CoefficientMatrix, gamma: float) -> float:
    if gamma < 0:
        raise DomainError("gamma must be non-negative")
    w = c.basis.mu ** (-gamma)
    return float(np.sqrt(np.sum(w[:, None] * c.values**2)))


def estimate_coefficients(model, problem) -> CoefficientMatrix:
    """Coefficients of the fitted embedding in the ``d_j (x) e_i`` basis.

    ``a[i, j] = mu_i sum_l v[l, j] e_i(xs[l])`` where ``v`` solves the
    regularized system against the training targets' ``d``-coordinates.
    """
    from .estimator import atom_weight_matrix

    if model.kx.kind != "designed":
        raise UsageError("exact coefficients need the designed input kernel; use mc_l2_error")
    basis = model.kx.basis
    V = atom_weight_matrix(model, problem) @ problem.atom_coords
    phi = model.features if model.features is not None else basis.features(model.xs)
    return CoefficientMatrix(basis.mu[:, None] * (phi @ V), basis)


def population_coefficients(truth: CoefficientMatrix, lam: float) -> CoefficientMatrix:
    """Population ridge solution: each row shrunk by ``mu_i / (mu_i + lam)``."""
    if lam < 0:
        raise DomainError("lambda must be non-negative")
    mu = truth.basis.mu
    return CoefficientMatrix(truth.values * (mu / (mu + lam))[:, None], truth.basis)


def bias_gamma_norm(truth: CoefficientMatrix, lam: float, gamma: float, beta: float):
    """Squared bias ``||[F_lam] - F*||_gamma^2`` and its bound ``||F*||_beta^2 lam^(beta - gamma)``."""
    if not 0 <= gamma <= beta <= 2:
        raise DomainError(f"need 0 <= gamma <= beta <= 2, got gamma={gamma}, beta={beta}")
    if not lam > 0:
        raise DomainError("lambda must be positive")
    value = gamma_norm(population_coefficients(truth, lam) - truth, gamma) ** 2
    bound = gamma_norm(truth, beta) ** 2 * lam ** (beta - gamma)
    return value, bound


def mc_l2_error(model, problem, n_mc: int, seed) -> tuple[float, float]:
    """Monte-Carlo estimate of ``||F_hat - F*||_{L2}^2`` and its standard error.

    ``model`` is a fitted :class:`CmeModel` or any callable mapping points to
    atom weights of shape ``(m, 2)``.
    """
    from .estimator import CmeModel, cme_error_sq, pointwise_error_sq

    if n_mc < 1:
        raise UsageError("n_mc must be at least 1")
    x = np.random.default_rng(seed).random(n_mc)
    if isinstance(model, CmeModel):
        err = pointwise_error_sq(model, problem, x)
    else:
        err = np.maximum(cme_error_sq(problem, x, model(x)), 0.0)
    se = float(np.std(err, ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else 0.0
    return float(np.mean(err)), se


@dataclass(frozen=True)
class VarianceBoundReport:
    n: int
    lam: float
    tau: float
    N_lambda: float
    g_lambda: float
    M_lambda: float
    Q_lambda: float
    rhs: float
    guard_ok: bool
    variance_sq: float = float("nan")

    @property
    def exceeds(self) -> bool:
        return self.variance_sq > self.rhs


def variance_bound_quantities(
    truth: CoefficientMatrix,
    n: int,
    lam: float,
    tau: float,
    alpha: float,
    A: float,
    gamma: float = 0.0,
    kappa_y: float = 1.0,
) -> VarianceBoundReport:
    """Deterministic side of the high-probability variance bound at ``(n, lam)``."""
    if tau < 1:
        raise DomainError("tau must be at least 1")
    basis = truth.basis
    op_norm = float(basis.mu[0])
    N = effective_dimension(basis, lam)
    g = math.log(2.0 * math.e * N * (op_norm + lam) / op_norm)
    bias = population_coefficients(truth, lam) - truth
    M = bias.sup_norm()
    Q = max(M, 2.0 * kappa_y)
    bias_l2_sq = gamma_norm(bias, 0.0) ** 2
    a2 = A * A
    rhs = (576.0 * tau**2 / (n * lam**gamma)) * (
        4.0 * kappa_y**2 * N + bias_l2_sq * a2 / lam**alpha + 2.0 * Q**2 * a2 / (n * lam**alpha)
    )
    guard = n >= 8.0 * a2 * tau * g * lam ** (-alpha)
    return VarianceBoundReport(n, lam, tau, N, g, M, Q, rhs, bool(guard))


def variance_bound_report(model, problem, truth, tau, alpha, A, gamma: float = 0.0):
    """Bound quantities for a fitted model, with its realized variance term attached."""
    q = variance_bound_quantities(truth, model.n, model.lam, tau, alpha, A, gamma, problem.kappa_y)
    est = estimate_coefficients(model, problem)
    variance = gamma_norm(est - population_coefficients(truth, model.lam), gamma) ** 2
    return VarianceBoundReport(**{**q.__dict__, "variance_sq": variance})
