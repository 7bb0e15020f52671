import numpy as np
import pytest
from hypothesis import settings

from vaalab.diffmodel import Batch, ModelSpec

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def make_batch(rng, n, d, k, flags=True):
    X = rng.standard_normal((n, d))
    y = rng.integers(0, k, size=n)
    return Batch(X, y, np.arange(n), np.full(n, flags))


SPECS = [
    ModelSpec("linear-softmax", 5, 3),
    ModelSpec("mlp-1hidden", 4, 3, hidden_dim=6, activation="tanh"),
    ModelSpec("mlp-1hidden", 3, 2, hidden_dim=5, activation="relu"),
]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
