import numpy as np
import pytest


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fitted_conv():
    """4x, 9x9 Gaussian operator on 32x32 images with its fitted 5x5 sub-pixel A+ (shared, ~45 s)."""
    from affmap.linops import PinvFitConfig, fit_pseudoinverse, gaussian_downsample
    op = gaussian_downsample((32, 32), stride=4, size=9, sigma=0.9)
    return op, fit_pseudoinverse(op, PinvFitConfig())


@pytest.fixture(scope="session")
def toy_kde():
    from affmap.densities import build_kde
    return build_kde()


@pytest.fixture(scope="session")
def toy_grid():
    """x-grid and its p_X cell weights."""
    from affmap.densities import SwissRollParams, x_grid, x_grid_weights
    xs = x_grid()
    return xs, x_grid_weights(SwissRollParams(), xs)


@pytest.fixture(scope="session")
def toy_oracles(toy_kde, toy_grid):
    """MAP / mean / median oracle sweep over the x-grid (about a minute)."""
    from affmap.densities import oracle_sweep
    return oracle_sweep(toy_kde, toy_grid[0])
