import os

import numpy as np
import pytest

from winoprune.transforms import generate_transforms, winograd_instance


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory):
    """CIFAR-10 binary batches: the real dataset when CIFAR10_DIR points at
    it, otherwise a synthetic stand-in in the identical file format."""
    env = os.environ.get("CIFAR10_DIR")
    if env and os.path.exists(os.path.join(env, "data_batch_1.bin")):
        return env
    from winoprune import data

    directory = tmp_path_factory.mktemp("cifar")
    data.write_synthetic_cifar10(str(directory), seed=5)
    return str(directory)


@pytest.fixture(scope="session")
def ts23():
    """F(2,3): tile 4, kernel 3, points {0, 1, -1}."""
    return generate_transforms(winograd_instance(4, 3))


@pytest.fixture(scope="session")
def ts43():
    """F(4,3): tile 6, kernel 3, points {0, 1, -1, 2, -2}."""
    return generate_transforms(winograd_instance(6, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
