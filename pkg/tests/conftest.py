import numpy as np
import pytest

from gazebench.geometry import Intrinsics
from gazebench.synthworld import SceneConfig, generate_session


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cam64():
    return Intrinsics(fx=100.0, fy=100.0, cx=32.0, cy=32.0, width=64, height=64)


@pytest.fixture(scope="session")
def short_config():
    return SceneConfig(duration=12.0, seed=5, neck_frame_offset=7)


@pytest.fixture(scope="session")
def short_session(short_config):
    """A rendered 12 s session; treat as read-only."""
    return generate_session(short_config)
