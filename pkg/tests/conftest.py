import numpy as np
import pytest

from dataset.moons import MoonSpec, generate_two_moons
from nn.layers import NetworkConfig, build_network


@pytest.fixture
def make_net():
    """Builder for small networks; keyword arguments override NetworkConfig fields."""
    def _make(**overrides):
        fields = dict(depth=3, h=0.1, width=6, seed=0)
        fields.update(overrides)
        return build_network(NetworkConfig(**fields))
    return _make


@pytest.fixture
def moons():
    return generate_two_moons(MoonSpec(n_per_class=50, seed=3))


@pytest.fixture
def batch(moons):
    """16 samples drawn from both classes."""
    idx = np.concatenate([np.arange(0, 8), np.arange(50, 58)])
    return moons.features[idx], moons.labels[idx]
