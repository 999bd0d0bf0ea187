"""Two-point conditional distributions with a source function of known smoothness.

Given a source function ``f`` with ``|f| <= B_inf`` and a level ``L = 1.5 B_inf``,
the output ``Y`` takes the value ``y_minus`` with probability
``(L - f(x)) / 2L`` and ``y_plus`` otherwise.  The conditional mean embedding
is then available in closed form,

    F*(x) = (phi(y_minus) + phi(y_plus)) / 2 + f(x) (phi(y_plus) - phi(y_minus)) / 2L,

and lives in the two-dimensional span of the atom features.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import DomainError, InvariantViolation, UsageError
from .kernelspace import Kernel, SpectralBasis
from .norms import CoefficientMatrix

SUP_GRID = 4096
LEVEL_FACTOR = 1.5


@dataclass(frozen=True, eq=False)
class SourceFunction:
    """``f = sum_i coeffs[i] mu_i^(beta/2) e_i`` with ``coeffs`` indexed from ``i = 1``."""

    basis: SpectralBasis
    beta: float
    coeffs: np.ndarray = field(repr=False)
    B_bar: float
    B_inf: float

    def __post_init__(self):
        if not 0.0 < self.beta <= 2.0:
            raise DomainError(f"source exponent beta must lie in (0, 2], got {self.beta}")
        coeffs = np.asarray(self.coeffs, dtype=float)
        if coeffs.shape != (self.basis.n_trunc,):
            raise UsageError("coeffs must have one entry per eigenfunction")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def l2_coefficients(self) -> np.ndarray:
        """Coefficients of ``f`` against the L2-orthonormal ``e_i``."""
        return self.coeffs * self.basis.mu ** (self.beta / 2.0)

    def __call__(self, x) -> np.ndarray:
        return self.basis.evaluate(self.l2_coefficients, x)

    def norm(self, gamma: float) -> float:
        """Interpolation-space norm ``||f||_gamma``."""
        c = self.l2_coefficients
        return float(np.sqrt(np.sum(self.basis.mu ** (-gamma) * c * c)))

    def sup_norm(self, grid_size: int = SUP_GRID) -> float:
        grid = np.linspace(0.0, 1.0, grid_size)
        return float(np.max(np.abs(self(grid))))


def source_from_coefficients(basis, beta, coeffs, B_inf=1.0) -> SourceFunction:
    coeffs = np.asarray(coeffs, dtype=float)
    return SourceFunction(basis, float(beta), coeffs, float(np.linalg.norm(coeffs)), float(B_inf))


def zero_source(basis: SpectralBasis, beta: float = 1.0, B_inf: float = 1.0) -> SourceFunction:
    """``f = 0``: Y independent of X, so the CME is the constant mean embedding."""
    return source_from_coefficients(basis, beta, np.zeros(basis.n_trunc), B_inf)


def constant_source(basis: SpectralBasis, value: float, beta: float = 1.0, B_inf=None):
    coeffs = np.zeros(basis.n_trunc)
    coeffs[0] = value
    return source_from_coefficients(basis, beta, coeffs, abs(value) if B_inf is None else B_inf)


def _band_indices(basis: SpectralBasis, band) -> np.ndarray:
    if band is None:
        idx = np.arange(2, basis.n_trunc + 1)
    elif isinstance(band, tuple) and len(band) == 2:
        idx = np.arange(band[0], band[1] + 1)
    else:
        idx = np.array(sorted(set(int(i) for i in band)))
    if idx.size == 0:
        raise DomainError("source coefficient vector is empty")
    if idx.min() < 2 or idx.max() > basis.n_trunc:
        raise UsageError(f"band must be a non-empty subset of 2..{basis.n_trunc}")
    return idx


def make_source(
    basis: SpectralBasis,
    beta: float,
    B_bar: float = 1.0,
    B_inf: float = 1.0,
    band=None,
    seed: int = 0,
    profile: str = "sharp",
    random_signs: bool = True,
) -> SourceFunction:
    """Source function with a prescribed beta-norm.

    ``band`` is ``None`` (all of ``2..n_trunc``), an inclusive ``(lo, hi)``
    tuple, or an explicit iterable of 1-based indices.  The ``"sharp"`` profile
    ``i^(-1/2) / log(i + 1)`` puts ``f`` in the beta-space but in no smaller
    one; ``"flat"`` gives equal magnitudes.  When the grid sup-norm exceeds
    ``B_inf`` the coefficients (and the recorded ``B_bar``) are shrunk together.
    """
    if not 0.0 < beta <= 2.0:
        raise DomainError(f"source exponent beta must lie in (0, 2], got {beta}")
    if not B_bar > 0 or not B_inf > 0:
        raise DomainError("B_bar and B_inf must be positive")
    idx = _band_indices(basis, band)
    if profile == "sharp":
        mags = idx ** -0.5 / np.log(idx + 1.0)
    elif profile == "flat":
        mags = np.ones(idx.size)
    else:
        raise UsageError(f"unknown coefficient profile {profile!r}")
    if random_signs:
        signs = np.random.default_rng(seed).choice([-1.0, 1.0], size=idx.size)
    else:
        signs = np.ones(idx.size)
    raw = np.zeros(basis.n_trunc)
    raw[idx - 1] = mags * signs
    norm = np.linalg.norm(raw)
    if norm == 0:
        raise DomainError("source coefficient vector is identically zero")
    coeffs = raw * (B_bar / norm)
    f = SourceFunction(basis, float(beta), coeffs, float(B_bar), float(B_inf))
    sup = f.sup_norm()
    if sup > B_inf:
        scale = B_inf / sup
        f = SourceFunction(basis, float(beta), coeffs * scale, float(B_bar * scale), float(B_inf))
    return f


def eval_source(f: SourceFunction, x) -> np.ndarray:
    return f(x)


def sharpness_partial_sums(f: SourceFunction, beta_prime: float) -> np.ndarray:
    """Partial sums ``sum_{i<=m} a_i^2 mu_i^(beta - beta')`` for ``m = 1..n_trunc``."""
    terms = f.coeffs**2 * f.basis.mu ** (f.beta - beta_prime)
    return np.cumsum(terms)


@dataclass(frozen=True, eq=False)
class TwoPointProblem:
    """Two-atom conditional law driven by a source function.

    ``atom_coords`` row ``k`` holds the coordinates of ``phi(atom_k)`` in an
    orthonormal basis ``(d_1, d_2)`` of the atom span (lower Cholesky factor of
    ``atom_gram``); atom 0 is ``y_minus`` and atom 1 is ``y_plus``.
    """

    f: SourceFunction
    y_minus: float
    y_plus: float
    L: float
    ky: Kernel
    atom_gram: np.ndarray = field(repr=False)
    atom_coords: np.ndarray = field(repr=False)

    @property
    def B_inf(self) -> float:
        return self.L / LEVEL_FACTOR

    @property
    def atoms(self) -> np.ndarray:
        return np.array([self.y_minus, self.y_plus])

    @property
    def kappa_y(self) -> float:
        return math.sqrt(self.ky.kappa_sq)

    def with_source(self, f: SourceFunction) -> "TwoPointProblem":
        """Same atoms, level and output kernel, different source function."""
        return TwoPointProblem(f, self.y_minus, self.y_plus, self.L, self.ky, self.atom_gram, self.atom_coords)


def make_problem(
    f: SourceFunction,
    y_minus: float = -1.0,
    y_plus: float = 1.0,
    ky: Kernel | None = None,
    B_inf: float | None = None,
) -> TwoPointProblem:
    if y_minus == y_plus:
        raise UsageError("output atoms must be distinct")
    ky = Kernel.gaussian(1.0) if ky is None else ky
    B_inf = f.B_inf if B_inf is None else B_inf
    if f.sup_norm() > B_inf * (1 + 1e-12):
        raise DomainError("source sup-norm exceeds B_inf")
    atoms = [y_minus, y_plus]
    G = np.array([[ky(a, b) for b in atoms] for a in atoms])
    coords = np.linalg.cholesky(G)
    return TwoPointProblem(f, float(y_minus), float(y_plus), LEVEL_FACTOR * B_inf, ky, G, coords)


def conditional_probability(problem: TwoPointProblem, x):
    """``(P(Y = y_minus | x), P(Y = y_plus | x))``."""
    fx = problem.f(x)
    if np.any(np.abs(fx) > problem.L):
        raise InvariantViolation("|f(x)| exceeds the level L; probabilities would be negative")
    two_l = 2.0 * problem.L
    p_minus = (problem.L - fx) / two_l
    p_plus = (problem.L + fx) / two_l
    if np.ndim(x) == 0:
        return float(p_minus[0]), float(p_plus[0])
    return p_minus, p_plus


def sample_dataset(problem: TwoPointProblem, n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """``n`` i.i.d. pairs with ``x ~ Uniform[0, 1]``; ``ys`` holds atom values."""
    if n < 1:
        raise UsageError("sample size must be at least 1")
    rng = np.random.default_rng(seed)
    xs = rng.random(n)
    u = rng.random(n)
    _, p_plus = conditional_probability(problem, xs)
    ys = np.where(u < p_plus, problem.y_plus, problem.y_minus)
    return xs, ys


def atom_index(problem: TwoPointProblem, ys) -> np.ndarray:
    """Map atom values to ``0`` (y_minus) / ``1`` (y_plus)."""
    ys = np.asarray(ys, dtype=float)
    is_plus = ys == problem.y_plus
    if not np.all(is_plus | (ys == problem.y_minus)):
        raise UsageError("outputs contain values other than the two atoms")
    return is_plus.astype(np.intp)


def true_cme_weights(problem: TwoPointProblem, x) -> np.ndarray:
    """Weights ``w`` with ``F*(x) = w_0 phi(y_minus) + w_1 phi(y_plus)``; shape ``(m, 2)``."""
    fx = problem.f(np.atleast_1d(x))
    two_l = 2.0 * problem.L
    return np.stack([(problem.L - fx) / two_l, (problem.L + fx) / two_l], axis=1)


def true_cme_inner(problem: TwoPointProblem, x, a) -> np.ndarray:
    """``<F*(x), phi(a)>`` straight from the closed form."""
    w = true_cme_weights(problem, x)
    k_minus = problem.ky(problem.y_minus, a)
    k_plus = problem.ky(problem.y_plus, a)
    return w[:, 0] * k_minus + w[:, 1] * k_plus


def true_cme_coefficients(problem: TwoPointProblem) -> CoefficientMatrix:
    c_minus, c_plus = problem.atom_coords
    u0 = 0.5 * (c_minus + c_plus)
    u1 = (c_plus - c_minus) / (2.0 * problem.L)
    values = np.outer(problem.f.l2_coefficients, u1)
    values[0] += u0
    return CoefficientMatrix(values, problem.f.basis)


def write_dataset_csv(path, rows: Iterable[tuple], problem: TwoPointProblem) -> None:
    """Write ``(xs, ys, replicate, seed)`` tuples as CSV rows ``x, y_atom, replicate, seed``.

    ``y_atom`` is ``-1`` for ``y_minus`` and ``+1`` for ``y_plus``.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y_atom", "replicate", "seed"])
        for xs, ys, replicate, seed in rows:
            signs = 2 * atom_index(problem, ys) - 1
            for x, s in zip(xs, signs):
                w.writerow([format(float(x), ".17g"), int(s), int(replicate), int(seed)])
