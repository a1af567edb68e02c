"""Visually guided mono-to-binaural generation on a small numpy autodiff engine."""

from .dsp import DEFAULT_STFT, StftConfig, WaveformClip, istft, recover_channels, stft
from .losses import LossConfig
from .model import BinauralUNet, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "BinauralUNet",
    "DEFAULT_STFT",
    "LossConfig",
    "ModelConfig",
    "StftConfig",
    "WaveformClip",
    "istft",
    "recover_channels",
    "stft",
]
