import numpy as np
import pytest

from fluxvol.field import make_tokamak_field

PAPPUS = np.pi ** 2 / 2          # 2 pi^2 R0 r^2 at R0 = 1, r = 0.5
IOTA_HALF = np.sqrt(0.75)        # rotation number of the r = 0.5 surface
TBAR_HALF = 2 * np.pi * np.sqrt(0.75)


def iota(r):
    return np.sqrt(1.0 - r * r)


@pytest.fixture(scope="session")
def tok():
    return make_tokamak_field()


@pytest.fixture(scope="session")
def tok_eps():
    cache = {}

    def make(eps):
        if eps not in cache:
            cache[eps] = make_tokamak_field(eps=eps)
        return cache[eps]
    return make
