import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile("pkg", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pkg")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_root(tmp_path_factory):
    """Cache for desk-scale datasets and trained networks (see tests/desk.py)."""
    import os
    from pathlib import Path

    root = os.environ.get("MANGARESTORE_DESK_CACHE")
    if root:
        Path(root).mkdir(parents=True, exist_ok=True)
        return Path(root)
    return tmp_path_factory.mktemp("desk")
