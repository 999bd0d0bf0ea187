"""Regularization schedules, (n, replicate) sweeps and log-log slope fits."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import DomainError, UsageError
from .estimator import fit
from .kernelspace import Kernel, effective_dimension, embedding_constant
from .norms import CoefficientMatrix, estimate_coefficients, gamma_norm
from .synthetic import TwoPointProblem, sample_dataset, true_cme_coefficients

LOG_REGIME = "log_regime"
POLY_REGIME = "poly_regime"
DEFAULT_NS = (128, 256, 512, 1024, 2048, 4096)
CALIBRATION_GRID = (0.25, 0.5, 1.0, 2.0, 4.0)


def select_regime(alpha: float, beta: float, p: float) -> str:
    return LOG_REGIME if beta + p <= alpha else POLY_REGIME


@dataclass(frozen=True)
class ScheduleSpec:
    regime: str
    alpha: float
    beta: float
    p: float
    r: float = 2.0
    c_lambda: float = 1.0

    def __post_init__(self):
        if self.regime not in (LOG_REGIME, POLY_REGIME):
            raise UsageError(f"unknown regime {self.regime!r}")
        expected = select_regime(self.alpha, self.beta, self.p)
        if self.regime != expected:
            cond = "beta + p <= alpha" if self.regime == LOG_REGIME else "beta + p > alpha"
            raise UsageError(
                f"regime {self.regime!r} requires {cond}; got beta={self.beta}, p={self.p}, alpha={self.alpha}"
            )
        if not self.r > 1:
            raise DomainError("log power r must exceed 1")
        if not self.c_lambda > 0:
            raise DomainError("c_lambda must be positive")

    @classmethod
    def auto(cls, alpha, beta, p, r=2.0, c_lambda=1.0) -> "ScheduleSpec":
        return cls(select_regime(alpha, beta, p), alpha, beta, p, r, c_lambda)


def lambda_schedule(spec: ScheduleSpec, n: float) -> float:
    if n < 3:
        raise UsageError("schedule needs n >= 3")
    if spec.regime == LOG_REGIME:
        return spec.c_lambda * (n / math.log(n) ** spec.r) ** (-1.0 / spec.alpha)
    return spec.c_lambda * n ** (-1.0 / (spec.beta + spec.p))


def theoretical_exponent(alpha: float, beta: float, p: float, gamma: float) -> float:
    """Decay exponent of the squared gamma-error, ``(beta - gamma) / max(alpha, beta + p)``."""
    if not 0 <= gamma < beta:
        raise DomainError(f"need 0 <= gamma < beta, got gamma={gamma}, beta={beta}")
    return (beta - gamma) / max(alpha, beta + p)


@dataclass(frozen=True)
class RateRecord:
    n: int
    replicate: int
    lam: float
    gamma: float
    err_sq: float
    guard_ok: bool


@dataclass(frozen=True)
class RateResult:
    records: list[RateRecord] = field(repr=False)
    slope: float
    slope_se: float
    theoretical: float
    degenerate: bool = False

    @property
    def ns(self) -> list[int]:
        return sorted({r.n for r in self.records})

    def medians(self) -> dict[int, float]:
        return _medians(self.records)

    def within(self, tol: float) -> bool:
        return not self.degenerate and abs(self.slope - self.theoretical) <= tol


def _medians(records) -> dict[int, float]:
    by_n: dict[int, list[float]] = {}
    for rec in records:
        n, err = (rec.n, rec.err_sq) if isinstance(rec, RateRecord) else rec
        by_n.setdefault(int(n), []).append(float(err))
    return {n: float(np.median(v)) for n, v in sorted(by_n.items())}


def fit_slope(records) -> tuple[float, float]:
    """OLS slope of ``log(median err^2)`` against ``log n`` and its standard error.

    ``records`` holds :class:`RateRecord` objects or ``(n, err_sq)`` pairs.
    Returns ``(nan, nan)`` when a median is not strictly positive.
    """
    med = _medians(records)
    if len(med) < 4:
        raise UsageError(f"slope fit needs at least 4 distinct n, got {len(med)}")
    ns = np.array(list(med), dtype=float)
    errs = np.array(list(med.values()))
    if np.any(errs <= 0) or not np.all(np.isfinite(errs)):
        return math.nan, math.nan
    res = stats.linregress(np.log(ns), np.log(errs))
    return float(res.slope), float(res.stderr)


Learner = Callable[[np.ndarray, np.ndarray, float, TwoPointProblem], CoefficientMatrix]


def krr_learner(kx: Kernel) -> Learner:
    """Default learner: fit the embedding at the given lambda and return its coefficients."""

    def learn(xs, ys, lam, problem):
        model = fit(xs, ys, lam, kx, problem.ky)
        return estimate_coefficients(model, problem)

    return learn


def sample_size_guard(basis, n, lam, alpha, tau=1.0, A=None) -> bool:
    """Whether ``n >= 8 A^2 tau g_lam lam^(-alpha)`` holds."""
    if A is None:
        A = embedding_constant(basis, alpha, grid_size=2)[1]
    N = effective_dimension(basis, lam)
    mu1 = float(basis.mu[0])
    g = math.log(2.0 * math.e * N * (mu1 + lam) / mu1)
    return n >= 8.0 * A * A * tau * g * lam ** (-alpha)


def cell_seed(seed: int, n: int, replicate: int) -> list[int]:
    """Seed material for one (n, replicate) cell; independent of execution order."""
    return [int(seed), int(n), int(replicate)]


def run_experiment(
    problem: TwoPointProblem,
    spec: ScheduleSpec,
    ns: Sequence[int] = DEFAULT_NS,
    replicates: int = 20,
    gamma: float = 0.0,
    seed: int = 0,
    tau: float = 1.0,
    learner: Learner | None = None,
    threads: int = 1,
) -> RateResult:
    ns = sorted(int(n) for n in ns)
    if len(set(ns)) < 4:
        raise UsageError("need at least 4 distinct sample sizes")
    if replicates < 5:
        raise UsageError("need at least 5 replicates")
    basis = problem.f.basis
    if learner is None:
        learner = krr_learner(Kernel.designed(basis))
    truth = true_cme_coefficients(problem)
    A = None
    if spec.alpha > basis.p:
        A = embedding_constant(basis, spec.alpha, grid_size=2)[1]

    def cell(key):
        n, rep = key
        lam = lambda_schedule(spec, n)
        xs, ys = sample_dataset(problem, n, cell_seed(seed, n, rep))
        est = learner(xs, ys, lam, problem)
        err = gamma_norm(est - truth, gamma) ** 2
        guard = A is not None and sample_size_guard(basis, n, lam, spec.alpha, tau, A)
        return RateRecord(n, rep, lam, gamma, err, guard)

    keys = [(n, rep) for n in ns for rep in range(replicates)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(cell, keys))
    else:
        records = [cell(k) for k in keys]
    slope, se = fit_slope(records)
    theo = -theoretical_exponent(spec.alpha, spec.beta, spec.p, gamma)
    return RateResult(records, slope, se, theo, degenerate=math.isnan(slope))


def calibrate_c_lambda(
    problem: TwoPointProblem,
    spec: ScheduleSpec,
    n: int,
    replicates: int = 5,
    gamma: float = 0.0,
    seed: int = 0,
    grid: Sequence[float] = CALIBRATION_GRID,
) -> float:
    """Multiplier from ``grid`` minimizing the median error at sample size ``n``."""
    basis = problem.f.basis
    learner = krr_learner(Kernel.designed(basis))
    truth = true_cme_coefficients(problem)
    best_c, best_err = None, math.inf
    for c in grid:
        trial = ScheduleSpec(spec.regime, spec.alpha, spec.beta, spec.p, spec.r, c)
        lam = lambda_schedule(trial, n)
        errs = []
        for rep in range(replicates):
            xs, ys = sample_dataset(problem, n, cell_seed(seed, n, rep))
            errs.append(gamma_norm(learner(xs, ys, lam, problem) - truth, gamma) ** 2)
        med = float(np.median(errs))
        if med < best_err:
            best_c, best_err = c, med
    return best_c
