import numpy as np
import pytest

from glacier.config import DatasetConfig, ModelConfig, TrainConfig
from glacier.nn import LrSchedule


def blobs_config(out_dir: str, **overrides) -> TrainConfig:
    """Small blobs-CNN run config; keyword overrides patch the flat fields."""
    cfg = TrainConfig()
    cfg.model = ModelConfig(
        arch="toy_cnn", conv_channels=(8, 16), hidden=64, input_shape=(1, 8, 8)
    )
    cfg.dataset = DatasetConfig(kind="blobs", classes=4, per_class=250, dim=64, val_per_class=50)
    cfg.epochs = 6
    cfg.batch_size = 32
    cfg.lr = LrSchedule("step_decay", 0.1, 0.1, (3, 5))
    cfg.workers = 1
    cfg.seed = 7
    cfg.out_dir = out_dir
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise AttributeError(key)
        setattr(cfg, key, value)
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(0)
