"""Semi-supervised self-normalizing network for EDFA gain spectra, with
one-shot transfer between amplifiers and a synthetic amplifier oracle."""

__version__ = "0.1.0"

from .model import FeatureMode, GainMeasurement, SsnnModel, load_model, save_model  # noqa: E402
from .pipeline import (  # noqa: E402
    PretrainConfig,
    TrainConfig,
    TransferConfig,
    layer_lr_schedule,
    one_shot_transfer,
    pretrain_dae,
    train_base,
)

__all__ = [
    "FeatureMode",
    "GainMeasurement",
    "SsnnModel",
    "load_model",
    "save_model",
    "PretrainConfig",
    "TrainConfig",
    "TransferConfig",
    "layer_lr_schedule",
    "one_shot_transfer",
    "pretrain_dae",
    "train_base",
]
