"""Pre-encoded cell architectures, one per benchmark dataset.

These stand in for searched results so budgeted evaluation is runnable
without a full search. Loaded by dataset id via ``fixture_architecture``.
"""

from importlib import resources

from ..search_space import Architecture, architecture_from_json

_FILES = {
    "mnist": "dpnasnet_mnist.json",
    "fashionmnist": "dpnasnet_fashionmnist.json",
    "cifar10": "dpnasnet_cifar10.json",
}


def fixture_architecture(dataset_id: str) -> Architecture:
    import json

    if dataset_id not in _FILES:
        raise KeyError(f"no fixture architecture for dataset {dataset_id!r}")
    text = resources.files(__package__).joinpath(_FILES[dataset_id]).read_text()
    return architecture_from_json(json.loads(text))
