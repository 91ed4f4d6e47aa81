import numpy as np
import pytest

from compvid import tensor as T
from compvid.denoiser import Denoiser, ModelConfig


@pytest.fixture
def f64():
    """Run the test body with 64-bit default precision."""
    old = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> ModelConfig:
    base = dict(height=16, width=16, factor=4, base_width=16, head_dim=8, time_dim=16, stc_width=8,
                groups=4, conditions=("motion", "depth", "sketch_seq"), use_style=True, seed=3)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return Denoiser(tiny_config())
