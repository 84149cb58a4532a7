import math

import pytest

from insulopt import DiskBody, Medium, build_grid

LN2 = math.log(2.0)
BENCH_FLUX = 2 * math.pi / LN2  # annulus r0 = 0.5, R = 1, phi = 1, p = 2
BENCH_IOTA = 0.75 * math.pi


@pytest.fixture(scope="session")
def grid32():
    return build_grid((-2, 2, -2, 2), 128, 128, DiskBody((0, 0), 0.5))


@pytest.fixture(scope="session")
def grid64():
    return build_grid((-2, 2, -2, 2), 256, 256, DiskBody((0, 0), 0.5))


@pytest.fixture(scope="session")
def grid16():
    return build_grid((-2, 2, -2, 2), 64, 64, DiskBody((0, 0), 0.5))


@pytest.fixture(scope="session")
def medium2_32(grid32):
    return Medium.constant(grid32, 2.0)
