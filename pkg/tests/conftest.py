import numpy as np
import pytest

from tcjepa import autodiff as ad
from tcjepa.data import DataConfig
from tcjepa.masking import MaskingConfig
from tcjepa.predictor import PredictorConfig
from tcjepa.train import TrainConfig
from tcjepa.vit import EncoderConfig


def tiny_config(conditioner="fine", fusion="max", seed=0, **over):
    """An 8x8-patch model small enough for many short runs per test."""
    cfg = TrainConfig(
        encoder=EncoderConfig(image_size=32, patch_size=4, embed_dim=16, depth=1, heads=2),
        predictor=PredictorConfig(pred_dim=16, depth=2, heads=2, conditioner=conditioner, fusion=fusion),
        masking=MaskingConfig(),
        data=DataConfig(size=32, seed=seed),
        batch_size=4,
        epochs=4,
        warmup_epochs=1,
        seed=seed,
    )
    for key, value in over.items():
        setattr(cfg, key, value)
    return cfg


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with ad.default_dtype(np.float64):
        yield


_CRITERIA = []


def record_criterion(name, ok, detail):
    """Remember one acceptance verdict; all of them are printed at session end."""
    line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
    _CRITERIA.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
