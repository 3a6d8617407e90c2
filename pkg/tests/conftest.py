import sys
from pathlib import Path

import pytest

# oracles.py lives next to the tests and is imported as a plain module
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Synthetic stand-in datasets shared across test modules."""
    from dpnas.data import generate_synthetic

    root = tmp_path_factory.mktemp("synth-data")
    generate_synthetic(root, "mnist", n_train=2000, n_test=400, seed=11)
    generate_synthetic(root, "fashionmnist", n_train=1200, n_test=200, seed=12)
    generate_synthetic(root, "cifar10", n_train=600, n_test=300, seed=13)
    return root
