import numpy as np
import pytest
import torch

from dragedit.config import make_backend
from dragedit.masks import Mask


def block_mask(h, w, y0, y1, x0, x1):
    a = np.zeros((h, w), dtype=bool)
    a[y0:y1, x0:x1] = True
    return Mask(a)


def random_image(rng, h=16, w=16):
    return torch.from_numpy(rng.random((3, h, w)))


@pytest.fixture(scope="session")
def backend():
    # immutable after construction, safe to share across tests
    return make_backend("toy", seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(42)
