import numpy as np
import pytest

from ponet.config import get_settings
from ponet.models.domain import EncoderConfig, MixerConfig
from ponet.services.encoder import init_encoder
from ponet.services.tensor_core import make_rng
from ponet.storage.in_memory import clear_datasets


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(1234)


@pytest.fixture
def small_encoder_cfg() -> EncoderConfig:
    return EncoderConfig(
        vocab_size=16,
        max_len=12,
        d=8,
        layers=2,
        dropout_rate=0.0,
        mixer=MixerConfig(d=8, heads=2),
    )


@pytest.fixture
def small_encoder(small_encoder_cfg, rng):
    return init_encoder(small_encoder_cfg, rng), small_encoder_cfg


@pytest.fixture(autouse=True)
def _fresh_state(monkeypatch, tmp_path):
    monkeypatch.setenv("PONET_RESULTS_DIR", str(tmp_path / "results"))
    get_settings.cache_clear()
    clear_datasets()
    yield
    get_settings.cache_clear()
    clear_datasets()
