"""
Shared pytest fixtures: tiny network configs and phantom samples
"""
import os

import pytest
import torch

from app.models.schemas import NetworkHyperparameters, PhantomConfig
from app.modules.phantom import PhantomGenerator


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale experiments, run with FDDM_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("FDDM_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set FDDM_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Keep artifacts, logs and FDDM_* overrides local to each test"""
    from app.config import get_settings

    for key in list(os.environ):
        if key.startswith("FDDM_") and key != "FDDM_RUN_SLOW":
            monkeypatch.delenv(key)
    monkeypatch.setenv("FDDM_ARTIFACTS_DIR", str(tmp_path / "artifacts"))
    monkeypatch.setenv("FDDM_LOG_FILE", str(tmp_path / "logs" / "fddm.log"))
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def tiny_hp():
    return NetworkHyperparameters(
        levels=3,
        base_channels=8,
        channel_multipliers=[1, 2, 2],
        groupnorm_groups=4,
        attention_heads=1,
        time_embedding_dim=16,
    )


@pytest.fixture
def phantom_cfg():
    return PhantomConfig(slice_size=64, seed=11)


@pytest.fixture
def phantom_samples(phantom_cfg):
    generator = PhantomGenerator(phantom_cfg)
    return [generator.generate(i) for i in range(4)]


@pytest.fixture
def torch_rng():
    return torch.Generator().manual_seed(1234)
