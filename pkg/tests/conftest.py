import numpy as np
import pytest

from ppap.data import Batch
from ppap.models import build_mlp, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_mlp():
    model = build_mlp([4, 8, 8, 3])
    return model, init_params(model, seed=0)


def random_batch(rng, shape, n_classes, n=6, dtype=np.float32):
    return Batch(rng.standard_normal((n, *shape)).astype(dtype), rng.integers(0, n_classes, n))
