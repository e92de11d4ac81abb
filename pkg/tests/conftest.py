import numpy as np
import pytest

from gridflow import asset_path
from gridflow.circuit import parse_circuit


@pytest.fixture(scope="session")
def ieee4():
    return parse_circuit(asset_path("ieee4.ckt").read_text())


@pytest.fixture(scope="session")
def synth13():
    return parse_circuit(asset_path("synth13.ckt").read_text())


@pytest.fixture(scope="session")
def tiny_dataset(ieee4):
    """Small finalized 4-node dataset shared by training-adjacent tests."""
    from gridflow.scenarios import ScenarioConfig, generate_dataset
    cfg = ScenarioConfig(horizon=96, noise=0.05, shape="synthetic",
                         train_fraction=0.75)
    return generate_dataset(ieee4, cfg, seed=123)


def random_load_scale(rng):
    """Scenario multiplier in (0.3, 1.0]; the bundled 4-node case is already
    heavily loaded, so scaling beyond rated power risks voltage collapse."""
    return 0.3 + 0.7 * rng.random()


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
