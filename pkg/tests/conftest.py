import math

import numpy as np
import pytest

from services.fno import FNOConfig, init_params, save_checkpoint
from services.grid_core import GridSpec
from services.problems import problem_settings
from services.sampler import PDEFamily


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow campaign checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def periodic_1d():
    return GridSpec.periodic([64], [2 * math.pi])


@pytest.fixture
def periodic_2d():
    return GridSpec.periodic([32, 32], [2 * math.pi, 2 * math.pi])


@pytest.fixture
def dirichlet_1d():
    return GridSpec.dirichlet([33], [1.0])


@pytest.fixture
def dirichlet_2d():
    return GridSpec.dirichlet([17, 17], [1.0, 1.0])


# Small problem sizes keep every solve and forward pass well under a second.
SMALL_PROBLEMS = {
    PDEFamily.NLS: {"size": 32},
    PDEFamily.NS: {"size": 16, "solver_dt": 0.05, "horizon": 0.5},
    PDEFamily.KS: {"size": 32, "length": 32.0, "horizon": 0.5},
    PDEFamily.BLACK_SCHOLES: {"size": 33, "solver_dt": 0.01},
    PDEFamily.POISSON: {"size": 17},
}


@pytest.fixture
def small_settings():
    def _make(pde):
        return problem_settings(pde, SMALL_PROBLEMS[PDEFamily(pde)])
    return _make


@pytest.fixture
def small_checkpoint(tmp_path, small_settings):
    """Write an untrained narrow model for a PDE and return (stem, settings)."""
    from services.problems import in_channels, out_channels

    def _make(pde, seed=0):
        pde = PDEFamily(pde)
        settings = small_settings(pde)
        grid = settings.grid()
        cfg = FNOConfig(dims=grid.dims, modes=4, width=4, n_layers=2, hidden=8,
                        in_channels=in_channels(pde), out_channels=out_channels(pde),
                        complex_output=pde == PDEFamily.NLS)
        stem = tmp_path / "checkpoints" / pde.value / f"seed{seed}" / "model"
        save_checkpoint(stem, init_params(cfg, seed), seed=seed, pde=pde.value, grid=grid,
                        horizon=settings.horizon)
        return stem, settings
    return _make
