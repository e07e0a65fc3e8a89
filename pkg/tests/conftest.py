import numpy as np
import pytest

from kim.spectral_grid import Kind, Symmetry, build_background


@pytest.fixture(scope="session")
def sphere():
    return build_background(Kind.SPHERE, 64, V=2.0)


@pytest.fixture(scope="session")
def sphere_even():
    return build_background(Kind.SPHERE, 64, V=2.0, symmetry=Symmetry.EVEN)


@pytest.fixture(scope="session")
def torus():
    return build_background(Kind.TORUS, 32, V=1.0)


@pytest.fixture(scope="session")
def negative():
    return build_background(Kind.NEGATIVE, 32, V=1.0)


def legendre(l, s):
    c = np.zeros(l + 1)
    c[l] = 1.0
    return np.polynomial.legendre.legval(s, c)
