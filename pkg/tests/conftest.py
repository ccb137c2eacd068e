import numpy as np
import pytest

from fbmlab.fbm import SeedSpec, TimeGrid, sample_fbm_batch
from fbmlab.flow import DriverPath, integrate_flow


def make_flow(system, x0, H=0.75, T=1.0, N=64, paths=4, seed=11, scheme="heun", substeps=4, level=None):
    grid = TimeGrid(T, N)
    B = sample_fbm_batch(grid, H, system.dim, SeedSpec(seed), range(paths))
    driver = DriverPath.from_samples(grid, B, H, level=level)
    return integrate_flow(system, driver, x0, scheme=scheme, substeps=substeps)


@pytest.fixture
def flow_factory():
    return make_flow


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
