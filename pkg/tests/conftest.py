import numpy as np
import pytest

from splatnvs import dataset as ds


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Small on-disk dataset shared by integration tests: 3 train + 1 val scene."""
    root = tmp_path_factory.mktemp("data")
    ds.generate_dataset(root, n_scenes=4, n_val=1, resolution=64, seed=11)
    return root


@pytest.fixture(scope="session")
def tiny_scene(tiny_data):
    return ds.load_scene(tiny_data / "scene_0000")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
