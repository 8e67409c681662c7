import numpy as np
import pytest

from ssmq.model import ModelConfig, init_toy_model, inject_outliers, make_corpus


def small_config(**overrides) -> ModelConfig:
    base = dict(
        vocab_size=64, d_model=16, n_layers=2, expand=2,
        d_state=4, d_conv=4, dt_rank=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_model():
    return init_toy_model(small_config(), seed=7)


@pytest.fixture(scope="session")
def small_corpus():
    cfg = small_config()
    return make_corpus(cfg.vocab_size, 8, 48, seed=(7, 2))


@pytest.fixture(scope="session")
def outlier_setup():
    """Seed-42 toy model with injected outliers plus its spiked corpus."""
    cfg = ModelConfig()
    model = init_toy_model(cfg, seed=42)
    info = inject_outliers(model, np.random.default_rng((42, 1)))
    corpus = make_corpus(
        cfg.vocab_size, 64, 128, seed=(42, 2), spike_tokens=info["spike_tokens"]
    )
    clean = make_corpus(cfg.vocab_size, 16, 128, seed=(42, 3))
    return model, info, corpus, clean
