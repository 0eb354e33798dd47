import json

import pytest

from ammlab.amm_pricing import PoolSpec
from ammlab.dp_solver import SolverSettings
from ammlab.market_model import MarketParams


@pytest.fixture
def baseline() -> MarketParams:
    return MarketParams()


@pytest.fixture
def pool() -> PoolSpec:
    return PoolSpec()


@pytest.fixture
def fast_params() -> MarketParams:
    """Baseline market with heavy discounting and one period per phase so value iteration is quick."""
    return MarketParams(delta=0.9, N=1)


@pytest.fixture
def small_settings() -> SolverSettings:
    return SolverSettings(grid_size=11, tol=1e-9, max_iter=2000, nodes_per_dim=5)


@pytest.fixture
def write_config(tmp_path):
    def _write(data, name="config.json"):
        path = tmp_path / name
        path.write_text(data if isinstance(data, str) else json.dumps(data))
        return path
    return _write
