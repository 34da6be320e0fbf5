import numpy as np
import pytest
import torch

from agemorph.agecode import AgeCodeConfig
from agemorph.nets import NetworkConfig
from agemorph.phantom import PhantomIdentity


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def age_cfg():
    return AgeCodeConfig()


@pytest.fixture
def small_net_cfg():
    """Tiny architecture for fast structural tests (full default elsewhere)."""
    return NetworkConfig(
        channels=(4, 8, 8),
        age_embed_dim=8,
        mapping_layers=3,
        critic_channels=(4, 8, 8, 8),
    )


@pytest.fixture
def fixed_identity():
    return PhantomIdentity(
        seed=7,
        skull_axes=(0.78, 0.84),
        ventricle_base=0.05,
        sulci_seed=11,
        texture_seed=13,
        asymmetry=0.03,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
