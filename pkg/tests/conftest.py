import numpy as np
import pytest

from services.fields import FieldConfig
from services.oracle import OracleRenderConfig, generate_dataset
from services.scenes import stock_scene


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# ---- FIXTURES ----
@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def tiny_fields():
    """Small networks so graph-level tests stay fast."""
    return FieldConfig(
        geometry_layers=2, geometry_width=16, geometry_frequencies=2,
        material_layers=1, material_width=8, material_frequencies=2,
        light_layers=1, light_width=8, light_frequencies=1,
        skip_layer=0,
    )


@pytest.fixture
def sphere_scene():
    return stock_scene("sphere")


@pytest.fixture(scope="session")
def cheap_oracle():
    return OracleRenderConfig(quadrature_k=32, mesh_resolution=32)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, cheap_oracle):
    """Four 16x16 oracle views of the stock sphere."""
    out = tmp_path_factory.mktemp("sphere_data")
    generate_dataset(stock_scene("sphere"), n_views=4, resolution=(16, 16), seed=3, out_dir=out, cfg=cheap_oracle)
    return out
