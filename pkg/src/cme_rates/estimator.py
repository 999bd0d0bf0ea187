"""Regularized conditional mean embedding by vector-valued kernel ridge regression.

The fitted embedding is ``F(x) = sum_l beta_l(x) phi_Y(ys[l])`` with dual
weights ``beta(x) = (K_X + n lam I)^{-1} k_x``.  Only the factorization of the
regularized input Gram is stored; outputs enter through their kernel values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DomainError, UsageError
from .kernelspace import DEFAULT_JITTER, Kernel, designed_gram_from_features, gram
from .synthetic import TwoPointProblem, atom_index, true_cme_weights


@dataclass(frozen=True, eq=False)
class CmeModel:
    xs: np.ndarray = field(repr=False)
    ys: np.ndarray = field(repr=False)
    lam: float
    kx: Kernel
    ky: Kernel
    factor: tuple = field(repr=False)
    # Phi[i, l] = e_i(xs[l]); kept for the designed kernel so coefficients need no re-evaluation
    features: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Apply ``(K_X + n lam I)^{-1}`` to ``rhs``."""
        return cho_solve(self.factor, rhs, check_finite=False)

    def cross_kernel(self, x) -> np.ndarray:
        """``[k_X(x[a], xs[l])]`` of shape ``(len(x), n)``."""
        if self.features is not None:
            basis = self.kx.basis
            return basis.features(x).T @ (basis.mu[:, None] * self.features)
        return self.kx.cross(x, self.xs)


def fit(xs, ys, lam: float, kx: Kernel, ky: Kernel, jitter: float | None = None) -> CmeModel:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    n = xs.shape[0] if xs.ndim else 0
    if n < 1:
        raise UsageError("need at least one training pair")
    if ys.shape[0] != n:
        raise UsageError(f"length mismatch: {n} inputs vs {ys.shape[0]} outputs")
    if not lam > 0:
        raise DomainError("regularization lambda must be positive")
    if jitter is None:
        jitter = DEFAULT_JITTER * kx.kappa_sq
    features = None
    if kx.kind == "designed":
        features = kx.basis.features(xs)
        K = designed_gram_from_features(kx.basis, features)
    else:
        K = gram(kx, xs).entries
    K.flat[:: n + 1] += n * lam + jitter
    factor = cho_factor(K, lower=False, overwrite_a=True, check_finite=False)
    return CmeModel(xs, ys, float(lam), kx, ky, factor, features)


def dual_weights(model: CmeModel, x) -> np.ndarray:
    """``beta(x)``: shape ``(n,)`` for a scalar ``x``, else ``(len(x), n)``."""
    scalar = np.ndim(x) == 0
    kx = model.cross_kernel(np.atleast_1d(x))
    beta = model.solve(kx.T).T
    return beta[0] if scalar else beta


def conditional_expectation(model: CmeModel, g_values, x):
    """Estimate of ``E[g(Y) | X = x]`` given ``g`` evaluated at the training outputs."""
    g_values = np.asarray(g_values, dtype=float)
    if g_values.shape != (model.n,):
        raise UsageError(f"expected {model.n} values of g, got shape {g_values.shape}")
    return dual_weights(model, x) @ g_values


def atom_weight_matrix(model: CmeModel, problem: TwoPointProblem) -> np.ndarray:
    """Per-atom dual solves ``V = (K_X + n lam I)^{-1} [1{ys = y_minus}, 1{ys = y_plus}]``."""
    idx = atom_index(problem, model.ys)
    onehot = np.zeros((model.n, 2))
    onehot[np.arange(model.n), idx] = 1.0
    return model.solve(onehot)


def aggregated_atom_weights(model: CmeModel, problem: TwoPointProblem, x) -> np.ndarray:
    """Weights ``w(x)`` with ``F_hat(x) = w_0 phi(y_minus) + w_1 phi(y_plus)``; shape ``(m, 2)``."""
    V = atom_weight_matrix(model, problem)
    return model.cross_kernel(np.atleast_1d(x)) @ V


def cme_error_sq(problem: TwoPointProblem, x, weights) -> np.ndarray:
    """``||w_0 phi(y_minus) + w_1 phi(y_plus) - F*(x)||^2`` via the 2x2 atom Gram."""
    diff = np.atleast_2d(weights) - true_cme_weights(problem, x)
    return np.einsum("mi,ij,mj->m", diff, problem.atom_gram, diff)


def pointwise_error_sq(model: CmeModel, problem: TwoPointProblem, x):
    """Squared output-RKHS distance between the estimate and the true embedding at ``x``."""
    err = cme_error_sq(problem, x, aggregated_atom_weights(model, problem, x))
    err = np.maximum(err, 0.0)
    return float(err[0]) if np.ndim(x) == 0 else err
