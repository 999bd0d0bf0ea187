import numpy as np
import pytest

from cme_rates.kernelspace import SpectralBasis
from cme_rates.synthetic import make_problem, make_source


def gauss_legendre(nodes=512):
    """Nodes and weights on [0, 1]."""
    t, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (t + 1.0), 0.5 * w


@pytest.fixture(scope="session")
def small_basis():
    return SpectralBasis.polynomial(0.5, 64)


@pytest.fixture(scope="session")
def basis():
    return SpectralBasis.polynomial(0.5)


@pytest.fixture(scope="session")
def small_problem(small_basis):
    return make_problem(make_source(small_basis, 1.0, seed=3))


@pytest.fixture(scope="session")
def problem(basis):
    return make_problem(make_source(basis, 1.0, seed=0))
