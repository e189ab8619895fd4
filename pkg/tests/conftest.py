import numpy as np
import pytest

from spherical_frustum.frustum import build_frustum_grid
from spherical_frustum.hashindex import build_hash_index

ACCEPTANCE_LINES = []


def random_uvr(rng, n, H, W, cells=None, tie_ranges=False):
    """Random integer cell coordinates and ranges.

    ``cells`` limits the points to that many distinct cells so frustums hold
    several points; ``tie_ranges`` draws ranges from a few values to force
    equal-distance ties.
    """
    if cells is None:
        u = rng.integers(0, W, n)
        v = rng.integers(0, H, n)
    else:
        pool = rng.choice(H * W, size=min(cells, H * W), replace=False)
        pick = pool[rng.integers(0, pool.shape[0], n)]
        u, v = pick % W, pick // W
    r = rng.integers(1, 6, n).astype(float) if tie_ranges else rng.uniform(1.0, 50.0, n)
    return u.astype(np.int64), v.astype(np.int64), r


def make_grid(u, v, r, H, W):
    grid = build_frustum_grid(u, v, r, H, W)
    return grid, build_hash_index(grid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
