import numpy as np
import pytest

import support


@pytest.fixture(scope="session")
def backgrounds():
    return support.make_backgrounds(3, 64, 72, seed=7, sigma=5)


@pytest.fixture()
def triplet_manifest(tmp_path):
    return support.tiny_triplet_dataset(tmp_path / "triplets")


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0)
