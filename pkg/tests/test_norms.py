import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cme_rates.errors import DomainError, UsageError
from cme_rates.estimator import dual_weights, fit
from cme_rates.kernelspace import Kernel, SpectralBasis, effective_dimension, embedding_constant, kernel_eval
from cme_rates.norms import (
    CoefficientMatrix,
    bias_gamma_norm,
    estimate_coefficients,
    gamma_norm,
    mc_l2_error,
    population_coefficients,
    variance_bound_quantities,
    variance_bound_report,
)
from cme_rates.synthetic import make_problem, make_source, sample_dataset, true_cme_coefficients, true_cme_weights

from conftest import gauss_legendre


def _single(basis, i, value, cols=2):
    v = np.zeros((basis.n_trunc, cols))
    v[i - 1, 0] = value
    return CoefficientMatrix(v, basis)


def _quad_coefficients(fun, basis, nodes=512):
    x, w = gauss_legendre(nodes)
    return basis.features(x) @ (w[:, None] * fun(x))


class TestCoefficientMatrix:
    def test_shape_validation(self, small_basis):
        with pytest.raises(UsageError):
            CoefficientMatrix(np.zeros((3, 2)), small_basis)

    def test_arithmetic(self, small_basis):
        a = _single(small_basis, 2, 1.0)
        b = _single(small_basis, 3, 2.0)
        c = 2 * (a + b) - b
        assert c.values[1, 0] == 2.0 and c.values[2, 0] == 2.0

    def test_evaluate_matches_basis(self, small_basis):
        rng = np.random.default_rng(0)
        c = CoefficientMatrix(rng.standard_normal((64, 2)), small_basis)
        x = np.linspace(0, 1, 9)
        np.testing.assert_allclose(c.evaluate(x), small_basis.features(x).T @ c.values, atol=1e-12)


class TestGammaNorm:
    def test_zero(self, small_basis):
        assert gamma_norm(CoefficientMatrix(np.zeros((64, 2)), small_basis), 0.7) == 0.0

    def test_single_term(self, small_basis):
        assert gamma_norm(_single(small_basis, 2, 3.0), 0.5) == pytest.approx(3 * math.sqrt(2), abs=1e-12)
        assert 3 * math.sqrt(2) == pytest.approx(4.2426, abs=1e-4)

    def test_negative_gamma(self, small_basis):
        with pytest.raises(DomainError):
            gamma_norm(_single(small_basis, 2, 1.0), -0.1)

    def test_l2_against_quadrature(self, small_basis):
        c = CoefficientMatrix(np.random.default_rng(1).standard_normal((64, 2)), small_basis)
        x, w = gauss_legendre(512)
        vals = c.evaluate(x)
        assert gamma_norm(c, 0.0) ** 2 == pytest.approx(w @ np.sum(vals**2, axis=1), rel=1e-10)

    @settings(max_examples=30)
    @given(st.integers(0, 2**31))
    def test_nesting_in_gamma(self, seed):
        basis = SpectralBasis.polynomial(0.5, 32)
        c = CoefficientMatrix(np.random.default_rng(seed).standard_normal((32, 2)), basis)
        norms = [gamma_norm(c, g) for g in (0.0, 0.25, 0.5, 0.75, 1.0)]
        assert np.all(np.diff(norms) >= -1e-12)


class TestEstimateCoefficients:
    def test_single_pair(self, small_problem):
        basis = small_problem.f.basis
        kx = Kernel.designed(basis)
        x1 = 0.33
        m = fit([x1], [1.0], 1.0, kx, small_problem.ky)
        t = small_problem.atom_coords[1]
        expected = np.outer(basis.mu * basis.features([x1])[:, 0], t) / (kernel_eval(kx, x1, x1) + 1.0)
        np.testing.assert_allclose(estimate_coefficients(m, small_problem).values, expected, rtol=1e-9, atol=1e-15)

    def test_large_lambda(self, small_problem):
        xs, ys = sample_dataset(small_problem, 10, 0)
        m = fit(xs, ys, 1e12, Kernel.designed(small_problem.f.basis), small_problem.ky)
        assert np.max(np.abs(estimate_coefficients(m, small_problem).values)) < 1e-11

    def test_quadrature_oracle(self, small_problem):
        basis = small_problem.f.basis
        xs, ys = sample_dataset(small_problem, 25, 1)
        m = fit(xs, ys, 0.01, Kernel.designed(basis), small_problem.ky)
        T = small_problem.atom_coords[(ys == 1.0).astype(int)]
        quad = _quad_coefficients(lambda x: dual_weights(m, x) @ T, basis)
        np.testing.assert_allclose(estimate_coefficients(m, small_problem).values, quad, atol=1e-9)

    def test_requires_designed_kernel(self, small_problem):
        m = fit([0.1, 0.5], [1.0, -1.0], 0.1, Kernel.gaussian(0.2), small_problem.ky)
        with pytest.raises(UsageError):
            estimate_coefficients(m, small_problem)


class TestPopulationAndBias:
    def test_lambda_zero_identity(self, small_problem):
        t = true_cme_coefficients(small_problem)
        np.testing.assert_array_equal(population_coefficients(t, 0.0).values, t.values)

    def test_half_shrinkage(self, small_basis):
        c = population_coefficients(_single(small_basis, 2, 1.0), small_basis.mu[1])
        assert c.values[1, 0] == pytest.approx(0.5, abs=1e-15)

    def test_large_lambda(self, small_problem):
        c = population_coefficients(true_cme_coefficients(small_problem), 1e15)
        assert np.max(np.abs(c.values)) < 1e-14

    def test_negative_lambda(self, small_basis):
        with pytest.raises(DomainError):
            population_coefficients(_single(small_basis, 2, 1.0), -1.0)

    def test_bias_vanishes(self, small_problem):
        value, _ = bias_gamma_norm(true_cme_coefficients(small_problem), 1e-14, 0.0, 1.0)
        assert value < 1e-20

    def test_bias_single_coefficient(self, small_basis):
        value, _ = bias_gamma_norm(_single(small_basis, 2, 1.7), small_basis.mu[1], 0.0, 1.0)
        assert value == pytest.approx(0.25 * 1.7**2, rel=1e-14)

    def test_gamma_above_beta(self, small_basis):
        with pytest.raises(DomainError):
            bias_gamma_norm(_single(small_basis, 2, 1.0), 0.1, 0.8, 0.5)

    @pytest.mark.parametrize("beta", [0.3, 1.0, 2.0])
    def test_bias_bound_grid(self, basis, beta):
        for seed in range(3):
            t = true_cme_coefficients(make_problem(make_source(basis, beta, seed=seed)))
            for lam in np.logspace(-4, 0, 9):
                for g in (0.0, beta / 4, beta / 2, beta):
                    value, bound = bias_gamma_norm(t, lam, g, beta)
                    assert value <= bound

    @settings(max_examples=40, deadline=None)
    @given(st.floats(1e-6, 10.0), st.floats(0.0, 1.0), st.floats(0.05, 2.0), st.integers(0, 100))
    def test_bias_bound_property(self, lam, gfrac, beta, seed):
        basis = SpectralBasis.polynomial(0.5, 128)
        t = true_cme_coefficients(make_problem(make_source(basis, beta, seed=seed)))
        value, bound = bias_gamma_norm(t, lam, gfrac * beta, beta)
        assert value <= bound * (1 + 1e-12)

    @pytest.mark.parametrize("beta", [0.5, 1.0])
    def test_population_norm_bound(self, basis, beta):
        # ||[F_lam]||_g^2 <= ||F*||_{min(g, beta)}^2 lam^(-(g - beta)_+)
        t = true_cme_coefficients(make_problem(make_source(basis, beta, seed=1)))
        for lam in np.logspace(-4, 0, 9):
            for g in (0.0, 0.25, 0.5, 1.0, 1.5):
                lhs = gamma_norm(population_coefficients(t, lam), g) ** 2
                rhs = gamma_norm(t, min(g, beta)) ** 2 * lam ** (-max(g - beta, 0.0))
                assert lhs <= rhs * (1 + 1e-12)


@pytest.fixture(scope="module")
def fits(small_problem):
    basis = small_problem.f.basis
    kx = Kernel.designed(basis)
    out = []
    for rep in range(8):
        xs, ys = sample_dataset(small_problem, 48, [5, rep])
        m = fit(xs, ys, 0.02, kx, small_problem.ky)
        out.append((m, xs, ys, estimate_coefficients(m, small_problem)))
    return out


class TestFittedDecompositions:
    @pytest.mark.parametrize("g", [0.0, 0.5, 1.0])
    def test_triangle_decomposition(self, fits, small_problem, g):
        t = true_cme_coefficients(small_problem)
        for m, _, _, est in fits:
            f_lam = population_coefficients(t, m.lam)
            total = gamma_norm(est - t, g)
            variance = gamma_norm(est - f_lam, g)
            bias = gamma_norm(f_lam - t, g)
            assert abs(total - variance) <= bias + 1e-12

    @pytest.mark.parametrize("g", [0.0, 0.25, 0.5, 1.0])
    def test_gamma_norm_transfer(self, fits, small_problem, g):
        # ||[F]||_g <= ||C C_XX^((1-g)/2)||_HS with C = W^T in the sqrt(mu) e_i coordinates
        basis = small_problem.f.basis
        for m, xs, ys, est in fits:
            psi = np.sqrt(basis.mu)[:, None] * basis.features(xs)
            V = m.solve(small_problem.atom_coords[(ys == 1.0).astype(int)])
            W = psi @ V
            hs = np.sqrt(np.sum((basis.mu ** ((1 - g) / 2))[:, None] ** 2 * W**2))
            assert gamma_norm(est, g) <= hs * (1 + 1e-10)

    def test_scalar_reduction(self, fits, small_problem):
        t = true_cme_coefficients(small_problem)
        x, w = gauss_legendre(512)
        for m, _, _, est in fits:
            diff = est - t
            for a in (-1.0, 1.0, 0.0):
                k_atoms = np.array([small_problem.ky(-1.0, a), small_problem.ky(1.0, a)])
                probe = np.linalg.solve(small_problem.atom_coords, k_atoms)
                scalar = diff.evaluate(x) @ probe
                assert math.sqrt(w @ scalar**2) <= small_problem.kappa_y * gamma_norm(diff, 0.0) + 1e-12
                for g in (0.5, 1.0):
                    sc = CoefficientMatrix((diff.values @ probe)[:, None], diff.basis)
                    assert gamma_norm(sc, g) <= small_problem.kappa_y * gamma_norm(diff, g) + 1e-12


class TestMonteCarlo:
    def test_injected_truth(self, small_problem):
        mean, se = mc_l2_error(lambda x: true_cme_weights(small_problem, x), small_problem, 1000, 0)
        assert mean == pytest.approx(0.0, abs=1e-12) and se == pytest.approx(0.0, abs=1e-12)

    def test_matches_exact_l2(self, small_problem):
        xs, ys = sample_dataset(small_problem, 40, 3)
        m = fit(xs, ys, 0.05, Kernel.designed(small_problem.f.basis), small_problem.ky)
        exact = gamma_norm(estimate_coefficients(m, small_problem) - true_cme_coefficients(small_problem), 0.0) ** 2
        mean, se = mc_l2_error(m, small_problem, 20_000, 1)
        assert abs(mean - exact) <= 4 * se

    def test_standard_kernel_path(self, small_problem):
        xs, ys = sample_dataset(small_problem, 40, 3)
        m = fit(xs, ys, 0.05, Kernel.gaussian(0.2), small_problem.ky)
        mean, se = mc_l2_error(m, small_problem, 2000, 1)
        assert mean > 0 and se > 0

    def test_variance_scaling(self, small_problem):
        xs, ys = sample_dataset(small_problem, 40, 3)
        m = fit(xs, ys, 0.05, Kernel.designed(small_problem.f.basis), small_problem.ky)
        sizes = np.array([64, 128, 256, 512, 1024])
        spread = [np.var([mc_l2_error(m, small_problem, int(k), [k, r])[0] for r in range(60)]) for k in sizes]
        slope = np.polyfit(np.log(sizes), np.log(spread), 1)[0]
        assert slope == pytest.approx(-1.0, abs=0.2)

    def test_zero_samples(self, small_problem):
        with pytest.raises(UsageError):
            mc_l2_error(lambda x: true_cme_weights(small_problem, x), small_problem, 0, 0)


class TestVarianceBound:
    def test_three_term_example(self):
        b = SpectralBasis(p=0.5, n_trunc=3, mu=np.array([1.0, 0.25, 1 / 9]))
        t = CoefficientMatrix(np.zeros((3, 2)), b)
        r = variance_bound_quantities(t, 100, 1.0, 1.0, 1.0, 1.0)
        assert r.N_lambda == pytest.approx(0.8, abs=1e-14)
        # log(2 e 0.8 2) evaluated at 30 digits
        assert r.g_lambda == pytest.approx(2.16315080980568086, abs=1e-14)

    def test_fields(self, small_problem):
        basis = small_problem.f.basis
        t = true_cme_coefficients(small_problem)
        A = embedding_constant(basis, 1.0, grid_size=2)[1]
        xs, ys = sample_dataset(small_problem, 64, 0)
        m = fit(xs, ys, 0.1, Kernel.designed(basis), small_problem.ky)
        r = variance_bound_report(m, small_problem, t, 1.0, 1.0, A)
        for v in (r.N_lambda, r.g_lambda, r.M_lambda, r.Q_lambda, r.rhs, r.variance_sq):
            assert v >= 0
        assert r.Q_lambda >= 2 * small_problem.kappa_y
        assert r.N_lambda == pytest.approx(effective_dimension(basis, 0.1), abs=1e-12)
        expected_rhs = (576 / 64) * (4 * r.N_lambda + gamma_norm(population_coefficients(t, 0.1) - t, 0) ** 2 * A**2 / 0.1
                                     + 2 * r.Q_lambda**2 * A**2 / (64 * 0.1))
        assert r.rhs == pytest.approx(expected_rhs, rel=1e-12)

    def test_tau_below_one(self, small_problem):
        with pytest.raises(DomainError):
            variance_bound_quantities(true_cme_coefficients(small_problem), 10, 0.1, 0.5, 1.0, 1.0)

    def test_guard(self, basis, problem):
        t = true_cme_coefficients(problem)
        A = embedding_constant(basis, 1.0, grid_size=2)[1]
        assert variance_bound_quantities(t, 512, 0.25, 2.0, 1.0, A).guard_ok
        assert not variance_bound_quantities(t, 64, 0.25, 2.0, 1.0, A).guard_ok
