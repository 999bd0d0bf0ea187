"""Hard two-point families for the minimax lower bound and concentration checks.

A packing family perturbs the source coefficients on the block of eigenindices
``m+1..2m`` by ``+-eta`` according to binary codewords.  Its members are far
apart in the gamma-norm and close in L2, so the induced two-point laws are hard
to tell apart (small pairwise KL) while their embeddings stay separated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConstructionError, DomainError, UsageError
from .kernelspace import Kernel, SpectralBasis
from .norms import CoefficientMatrix, estimate_coefficients, gamma_norm
from .estimator import fit
from .rates import ScheduleSpec, fit_slope, lambda_schedule, theoretical_exponent
from .synthetic import (
    SUP_GRID,
    SourceFunction,
    TwoPointProblem,
    atom_index,
    conditional_probability,
    sample_dataset,
    true_cme_coefficients,
)

DEFAULT_BUDGET = 10_000
DEFAULT_QUAD_NODES = 256


@dataclass(frozen=True, eq=False)
class PackingFamily:
    """Members ``f_k`` with beta-coefficients ``eta * s_k`` on indices ``m+1..2m``.

    ``C_gamma`` is the construction's own constant in the L2 proximity bound
    ``||f_i - f_j||_L2^2 <= 32 C_gamma eps m^(-gamma/p)``; ``epsilon`` is the
    value actually used after any sup-norm or beta-norm rescaling.
    """

    basis: SpectralBasis
    beta: float
    gamma: float
    epsilon: float
    m: int
    eta: float
    codewords: np.ndarray = field(repr=False)
    members: list[SourceFunction] = field(repr=False)
    C_gamma: float
    B_bar: float
    B_inf: float
    requested_epsilon: float
    alpha: float | None = None

    @property
    def M(self) -> int:
        return len(self.members)

    @property
    def p(self) -> float:
        return self.basis.p

    @property
    def block(self) -> np.ndarray:
        """1-based eigenindices carrying the perturbation."""
        return np.arange(self.m + 1, 2 * self.m + 1)

    @property
    def C(self) -> float:
        """``C`` itself when ``gamma > 0``; at ``gamma = 0`` only ``C^0 = 1`` is meaningful."""
        return self.C_gamma ** (1.0 / self.gamma) if self.gamma > 0 else math.nan

    @property
    def u(self) -> float | None:
        """Exponent ``p / (max(alpha, beta) - gamma)`` of the family-size growth."""
        if self.alpha is None:
            return None
        return self.p / (max(self.alpha, self.beta) - self.gamma)

    def l2_bound(self) -> float:
        return 32.0 * self.C_gamma * self.epsilon * self.m ** (-self.gamma / self.p)

    def kl_bound(self) -> float:
        return 40.0 * self.B_inf**2 * self.C_gamma * self.epsilon * self.m ** (-self.gamma / self.p)

    def pair_norms_sq(self, gamma: float) -> np.ndarray:
        """Matrix of ``||f_i - f_j||_gamma^2`` from the coefficients."""
        c = np.stack([f.l2_coefficients for f in self.members])
        w = self.basis.mu ** (-gamma)
        gram = (c * w) @ c.T
        d = np.diag(gram)
        return np.maximum(d[:, None] + d[None, :] - 2.0 * gram, 0.0)

    def verify(self) -> tuple[bool, bool]:
        """Whether the separation and L2 proximity inequalities hold for every pair."""
        off = ~np.eye(self.M, dtype=bool)
        sep = self.pair_norms_sq(self.gamma)[off]
        l2 = self.pair_norms_sq(0.0)[off]
        sep_ok = bool(np.all(sep >= 4.0 * self.epsilon * (1 - 1e-12)))
        l2_ok = bool(np.all(l2 <= self.l2_bound() * (1 + 1e-12)))
        return sep_ok, l2_ok


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.count_nonzero(a != b))


def greedy_codewords(m: int, rng, budget: int = DEFAULT_BUDGET, max_members: int = 16, min_dist=None):
    """Binary words of length ``m`` with pairwise Hamming distance at least ``m/4``.

    Random words are drawn one at a time and kept when far enough from all kept
    words, until ``max_members`` are kept or ``budget`` draws are spent.
    """
    min_dist = m / 4.0 if min_dist is None else min_dist
    kept: list[np.ndarray] = []
    for _ in range(budget):
        w = rng.integers(0, 2, size=m).astype(np.int8)
        if all(hamming(w, k) >= min_dist for k in kept):
            kept.append(w)
            if len(kept) >= max_members:
                break
    return np.array(kept, dtype=np.int8).reshape(len(kept), m)


def _disagreement_mass(codewords, weights) -> np.ndarray:
    signs = 2.0 * codewords - 1.0
    # indicator of disagreement is (1 - s_i s_j) / 2 per index
    total = weights.sum()
    return 0.5 * (total - (signs * weights) @ signs.T)


def build_packing(
    basis: SpectralBasis,
    beta: float,
    gamma: float,
    p: float | None = None,
    epsilon: float = 1e-3,
    m: int = 16,
    seed: int = 0,
    budget: int = DEFAULT_BUDGET,
    max_members: int = 16,
    B_bar: float = 1.0,
    B_inf: float = 1.0,
    alpha: float | None = None,
    codewords=None,
) -> PackingFamily:
    """Greedy packing family with minimum pairwise gamma-separation exactly ``4 epsilon``.

    ``codewords`` overrides the random search with explicit binary words.  If
    the members would exceed ``B_inf`` on the grid or ``B_bar`` in beta-norm,
    ``epsilon`` is reduced until both hold; the reduced value is recorded.
    """
    if p is not None and not math.isclose(p, basis.p):
        raise UsageError(f"p={p} does not match the basis decay exponent {basis.p}")
    if not 0 <= gamma < beta <= 2:
        raise DomainError(f"need 0 <= gamma < beta <= 2, got gamma={gamma}, beta={beta}")
    if m < 8:
        raise UsageError("block size m must be at least 8")
    if 2 * m > basis.n_trunc:
        raise UsageError(f"block m+1..2m exceeds n_trunc={basis.n_trunc}")
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")

    if codewords is None:
        words = greedy_codewords(m, np.random.default_rng(seed), budget, max_members)
    else:
        words = np.asarray(codewords, dtype=np.int8)
        if words.ndim != 2 or words.shape[1] != m:
            raise UsageError(f"codewords must be binary words of length {m}")
        for i in range(len(words)):
            for j in range(i):
                if hamming(words[i], words[j]) < m / 4.0:
                    raise ConstructionError(f"codewords {j} and {i} are closer than m/4")
    if len(words) < 2:
        raise ConstructionError(f"only {len(words)} codeword(s) found within the draw budget")

    mu_block = basis.mu[m : 2 * m]
    S = _disagreement_mass(words, mu_block ** (beta - gamma))
    off = ~np.eye(len(words), dtype=bool)
    S_min = float(S[off].min())
    S_block = float(np.sum(mu_block ** (beta - gamma)))
    if gamma > 0:
        # ||d||_L2^2 <= mu_{m+1}^gamma ||d||_gamma^2 <= 4 eps (S_block / S_min) (m+1)^(-gamma/p)
        C_gamma = S_block / (8.0 * S_min)
    else:
        C_gamma = 1.0

    requested = float(epsilon)
    eps = requested
    for _ in range(2):
        eta = math.sqrt(eps / S_min)
        members = _members(basis, beta, words, eta, m, B_inf)
        sup = max(f.sup_norm() for f in members)
        beta_norm = eta * math.sqrt(m)
        shrink = min(1.0, B_inf / sup, B_bar / beta_norm)
        if shrink >= 1.0:
            break
        eps *= shrink**2 * (1 - 1e-9)
    else:
        raise ConstructionError("could not bring the family within the sup-norm and beta-norm limits")

    family = PackingFamily(
        basis=basis,
        beta=float(beta),
        gamma=float(gamma),
        epsilon=eps,
        m=int(m),
        eta=eta,
        codewords=words,
        members=members,
        C_gamma=float(C_gamma),
        B_bar=float(B_bar),
        B_inf=float(B_inf),
        requested_epsilon=requested,
        alpha=alpha,
    )
    sep_ok, l2_ok = family.verify()
    if not sep_ok:
        raise ConstructionError("separation calibration failed")
    if not l2_ok:
        raise ConstructionError(
            "L2 proximity fails with the fixed constant; the codewords are too unbalanced for this gamma"
        )
    return family


def _members(basis, beta, words, eta, m, B_inf):
    out = []
    for w in words:
        coeffs = np.zeros(basis.n_trunc)
        coeffs[m : 2 * m] = eta * (2.0 * w - 1.0)
        out.append(SourceFunction(basis, float(beta), coeffs, float(eta * math.sqrt(m)), float(B_inf)))
    return out


def adversarial_family(packing: PackingFamily, template: TwoPointProblem) -> list[TwoPointProblem]:
    """One two-point problem per member, sharing the template's atoms, level and output kernel."""
    out = []
    for k, f in enumerate(packing.members):
        if f.sup_norm(SUP_GRID) > template.B_inf * (1 + 1e-12):
            raise ConstructionError(f"member {k} exceeds the template sup-norm bound")
        out.append(template.with_source(f))
    return out


def _quadrature(nodes: int):
    t, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (t + 1.0), 0.5 * w


def kl_divergence(prob_i: TwoPointProblem, prob_j: TwoPointProblem, quad_nodes: int = DEFAULT_QUAD_NODES) -> float:
    """``KL(P_i, P_j)`` of the joint laws, integrating the pointwise two-point KL over ``x``."""
    if (prob_i.y_minus, prob_i.y_plus, prob_i.L) != (prob_j.y_minus, prob_j.y_plus, prob_j.L):
        raise UsageError("KL requires problems with shared atoms and level")
    x, w = _quadrature(quad_nodes)
    pi_m, pi_p = conditional_probability(prob_i, x)
    pj_m, pj_p = conditional_probability(prob_j, x)
    integrand = pi_m * np.log(pi_m / pj_m) + pi_p * np.log(pi_p / pj_p)
    return max(float(w @ integrand), 0.0)


@dataclass(frozen=True)
class KlReport:
    pair: tuple[int, int]
    kl: float
    bound: float

    @property
    def ok(self) -> bool:
        return self.kl <= self.bound


def kl_bound_check(family: PackingFamily, template: TwoPointProblem | None = None, quad_nodes: int = DEFAULT_QUAD_NODES):
    """Pairwise KL against ``40 B_inf^2 C_gamma eps m^(-gamma/p)`` for all ordered pairs."""
    if template is None:
        from .synthetic import make_problem

        template = make_problem(family.members[0], B_inf=family.B_inf)
    problems = adversarial_family(family, template)
    bound = 40.0 * template.B_inf**2 * family.C_gamma * family.epsilon * family.m ** (-family.gamma / family.p)
    reports = []
    for i, pi in enumerate(problems):
        for j, pj in enumerate(problems):
            kl = 0.0 if i == j else kl_divergence(pi, pj, quad_nodes)
            reports.append(KlReport((i, j), kl, bound))
    return reports


def embedding_deviation_sq(problem: TwoPointProblem, ys) -> float:
    """``||(1/n) sum_l phi(ys[l]) - E phi(Y)||^2`` by 2x2 atom-Gram algebra."""
    idx = atom_index(problem, ys)
    frac_plus = float(np.mean(idx))
    delta = frac_plus - marginal_plus_probability(problem)
    G = problem.atom_gram
    return delta * delta * float(G[0, 0] - 2.0 * G[0, 1] + G[1, 1])


def marginal_plus_probability(problem: TwoPointProblem) -> float:
    """``P(Y = y_plus)`` under the uniform input marginal; the mean of ``f`` is its first coefficient."""
    f_mean = float(problem.f.l2_coefficients[0])
    return 0.5 + f_mean / (2.0 * problem.L)


@dataclass(frozen=True)
class CoverageReport:
    n: int
    tau: float
    trials: int
    exceed: int
    threshold: float
    allowed: float

    @property
    def fraction(self) -> float:
        return self.exceed / self.trials

    @property
    def slack(self) -> float:
        q = min(self.allowed, 1.0)
        return 3.0 * math.sqrt(q * (1.0 - q) / self.trials)

    @property
    def ok(self) -> bool:
        return self.fraction <= self.allowed + self.slack


def bernstein_threshold(n: int, tau: float, kappa_y: float) -> float:
    sigma = L = 2.0 * kappa_y
    return 32.0 * tau**2 / n * (sigma**2 + L**2 / n)


def bernstein_check(problem: TwoPointProblem, n: int, tau: float, trials: int = 2000, seed: int = 0) -> CoverageReport:
    """Exceedance frequency of the Bernstein threshold for the empirical output mean embedding."""
    if tau < 1:
        raise DomainError("tau must be at least 1")
    if trials < 500:
        raise UsageError("need at least 500 trials")
    threshold = bernstein_threshold(n, tau, problem.kappa_y)
    exceed = 0
    for t in range(trials):
        _, ys = sample_dataset(problem, n, [seed, n, t])
        if embedding_deviation_sq(problem, ys) >= threshold:
            exceed += 1
    return CoverageReport(n, float(tau), trials, exceed, threshold, 2.0 * math.exp(-tau))


# learners used by the minimax probe map (xs, ys, problem) to coefficients
ProbeLearner = Callable[[np.ndarray, np.ndarray, TwoPointProblem], CoefficientMatrix]


def schedule_learner(spec: ScheduleSpec, kx: Kernel | None = None) -> ProbeLearner:
    """Kernel ridge embedding with ``lambda = lambda_schedule(spec, n)``."""

    def learn(xs, ys, problem):
        k = Kernel.designed(problem.f.basis) if kx is None else kx
        model = fit(xs, ys, lambda_schedule(spec, len(xs)), k, problem.ky)
        return estimate_coefficients(model, problem)

    return learn


def fixed_truth_learner(problem: TwoPointProblem) -> ProbeLearner:
    """Ignores the data and returns the true embedding of ``problem``."""
    truth = true_cme_coefficients(problem)
    return lambda xs, ys, prob: truth


@dataclass(frozen=True)
class MinimaxResult:
    rows: list[tuple] = field(repr=False)  # (member, n, median_err_sq, failures)
    worst_case: dict[int, float]
    worst_slope: float
    lower_exponent: float | None
    upper_exponent: float | None


def minimax_probe(
    family: PackingFamily,
    learner: ProbeLearner,
    ns: Sequence[int],
    replicates: int = 5,
    gamma: float | None = None,
    seed: int = 0,
    template: TwoPointProblem | None = None,
) -> MinimaxResult:
    """Per-member median risk, its member-wise maximum, and the slope of the maximum in ``n``.

    Learner exceptions are counted per cell and the cell is skipped.
    """
    if template is None:
        from .synthetic import make_problem

        template = make_problem(family.members[0], B_inf=family.B_inf)
    gamma = family.gamma if gamma is None else gamma
    problems = adversarial_family(family, template)
    ns = sorted(int(n) for n in ns)
    rows = []
    worst: dict[int, float] = {}
    for k, prob in enumerate(problems):
        truth = true_cme_coefficients(prob)
        for n in ns:
            errs, failures = [], 0
            for rep in range(replicates):
                xs, ys = sample_dataset(prob, n, [seed, k, n, rep])
                try:
                    est = learner(xs, ys, prob)
                except Exception:
                    failures += 1
                    continue
                errs.append(gamma_norm(est - truth, gamma) ** 2)
            med = float(np.median(errs)) if errs else math.nan
            rows.append((k, n, med, failures))
            if not math.isnan(med):
                worst[n] = max(worst.get(n, -math.inf), med)
    worst_slope = math.nan
    if len(worst) >= 4:
        worst_slope = fit_slope(list(worst.items()))[0]
    lower = upper = None
    if family.alpha is not None:
        a, b, p = family.alpha, family.beta, family.p
        lower = -(max(a, b) - gamma) / (max(a, b) + p)
        upper = -theoretical_exponent(a, b, p, gamma)
    return MinimaxResult(rows, worst, worst_slope, lower, upper)
