import os
from typing import Any, Dict

import pytest

from modalign.config import (
    FinetuneConfig,
    ModelConfig,
    PhantomSpec,
    PretrainConfig,
)
from modalign.volumes.manifest import DatasetManifest
from modalign.volumes.phantom import synthesize_dataset

try:
    from chaoslib.log import configure_logger

    NEED_TO_CONFIGURE_LOGGER = True
except ImportError:
    NEED_TO_CONFIGURE_LOGGER = False


if NEED_TO_CONFIGURE_LOGGER:

    @pytest.fixture(scope="session", autouse=True)
    def setup_logger() -> None:
        configure_logger(verbose=True)


def pytest_collection_modifyitems(config, items):
    if os.environ.get("MODALIGN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set MODALIGN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


# 16^3 volumes, a stride of 8 and a 2x2x2 feature grid
TINY_MODEL: Dict[str, Any] = {
    "grid_size": 16,
    "conv_channels": [4, 8],
    "feature_channels": 8,
    "embed_dim": 16,
    "text_vocab_size": 512,
    "text_dim": 16,
    "max_tokens": 32,
    "patch_size": 4,
    "window_size": 2,
    "swin_dim": 8,
    "swin_depths": [1],
    "num_heads": 2,
    "fusion_layers": 1,
    "fusion_heads": 2,
}

TINY_PHANTOM: Dict[str, Any] = {
    "grid_size": 16,
    "n_records": 60,
    "n_classes": 2,
    "modalities": ["T1", "T2"],
    "seed": 7,
}


@pytest.fixture
def tiny_model() -> ModelConfig:
    return ModelConfig.from_mapping(TINY_MODEL)


@pytest.fixture
def tiny_phantom() -> PhantomSpec:
    return PhantomSpec.from_mapping(TINY_PHANTOM)


@pytest.fixture
def tiny_pretrain() -> PretrainConfig:
    return PretrainConfig.from_mapping(
        {"epochs": 2, "batch_size": 8, "model": TINY_MODEL}
    )


@pytest.fixture
def tiny_finetune() -> FinetuneConfig:
    return FinetuneConfig.from_mapping(
        {
            "epochs": 2,
            "batch_size": 8,
            "ablation_seeds": [0, 1],
            "model": TINY_MODEL,
        }
    )


@pytest.fixture(scope="session")
def phantom_dir(tmp_path_factory) -> str:
    out_dir = str(tmp_path_factory.mktemp("phantoms"))
    synthesize_dataset(PhantomSpec.from_mapping(TINY_PHANTOM), out_dir)
    return out_dir


@pytest.fixture
def manifest(phantom_dir: str) -> DatasetManifest:
    return DatasetManifest.load(os.path.join(phantom_dir, "manifest.json"))
