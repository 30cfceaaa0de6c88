import numpy as np
import pytest
import torch

from coopsheaf.laplacian import set_deterministic


@pytest.fixture(autouse=True)
def _deterministic():
    set_deterministic(True)
    torch.manual_seed(0)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
