import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ahnlab.model import Model, ModelConfig

settings.register_profile("default", deadline=None, max_examples=40, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("stress", parent=settings.get_profile("default"), max_examples=1000,
                          derandomize=False)
settings.load_profile("default")


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab=257, d_model=16, n_layers=2, n_q_heads=4, n_kv_heads=2, head_dim=4,
                ffn_mult=2, sinks=2, window=4, dtype="float64", seed=0)
    base.update(kw)
    return ModelConfig(**base)


def randomize_ahn(model: Model, rng: np.random.Generator, scale: float = 0.3):
    """Move AHN parameters away from their near-silent init so tests see a live branch."""
    for layer in model.ahn:
        for name, t in layer.arrays.items():
            if name.startswith("w_") and name != "w_o":
                t.data = (rng.standard_normal(t.shape) * scale).astype(t.dtype)
            elif name == "b_gamma":
                t.data = np.zeros_like(t.data)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model():
    return randomize_ahn(Model(tiny_config()), np.random.default_rng(1))
