import numpy as np
import pytest

from models.schemas import AttentionConfig, ModelConfig
from services.tensor_service import precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def float64():
    with precision(64):
        yield


@pytest.fixture
def small_attention():
    return AttentionConfig(heads=2, model_dim=8, manifolds="e,s,g", fusion="early")


def tiny_model_config(manifolds="e,s,g", fusion="early", **overrides) -> ModelConfig:
    fields = dict(image_size=8, channels=3, patch_size=4, depth=2, mlp_ratio=2, num_classes=4,
                  attention={"heads": 2, "model_dim": 8, "manifolds": manifolds, "fusion": fusion})
    fields.update(overrides)
    return ModelConfig.model_validate(fields)


@pytest.fixture
def tiny_config():
    return tiny_model_config()
