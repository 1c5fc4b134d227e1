import numpy as np
import pytest

from src.autodiff import Tensor
from src.encoder import PretrainedEncoder, init_embedder, init_encoder_base
from src.model import CMPTModel, ModelConfig
from src.synth_data import DatasetConfig, generate


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run reference-experiment tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: reference-experiment checks (need --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_data_config():
    return DatasetConfig(
        n_classes=4,
        n_train=24,
        n_val=8,
        n_test=16,
        latent_dim=4,
        raw_dims=(8, 8),
        patch_sizes=(4, 4),
        noise_sigma=(0.3, 0.3),
        redundancy=0.6,
        exclusive_m1=(0,),
        exclusive_m2=(1,),
        seed=3,
    )


@pytest.fixture
def tiny_splits(tiny_data_config):
    return generate(tiny_data_config)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(d_model=8, n_layers=1, n_heads=2, ff_dim=16, lora_dropout=0.0)


def make_pretrained(model_config, data_config, seed=0):
    """Randomly initialized frozen encoders (no pretraining run)"""
    rng = np.random.default_rng(seed)
    encoders = {}
    for modality, raw_dim, patch in zip(("m1", "m2"), data_config.raw_dims, data_config.patch_sizes):
        embedder = init_embedder(patch, model_config.d_model, raw_dim // patch, rng, trainable=False)
        base = init_encoder_base(
            model_config.d_model, model_config.n_layers, model_config.n_heads, model_config.ff_dim, rng,
            trainable=False,
        )
        cls_token = Tensor(rng.normal(0.0, 0.5, size=(1, model_config.d_model)))
        encoders[modality] = PretrainedEncoder(modality, embedder, cls_token, base)
    return encoders


@pytest.fixture
def tiny_pretrained(tiny_model_config, tiny_data_config):
    return make_pretrained(tiny_model_config, tiny_data_config)


@pytest.fixture
def tiny_cmpt_model(tiny_pretrained, tiny_model_config, tiny_data_config):
    return CMPTModel.from_pretrained(tiny_pretrained, tiny_model_config, "cmpt", tiny_data_config.n_classes, seed=0)
