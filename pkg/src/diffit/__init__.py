"""Diffusion vision transformers with time-dependent self-attention.

Submodules: ``tensor`` (autodiff + RNG), ``tmsa``, ``blocks``, ``networks``,
``diffusion``, ``checkpoint``, ``harness`` (datasets, training, CLI) and
``estimator`` (scikit-learn style wrapper).
"""

from .blocks import AdaLNBlock, DiffiTBlock, DiffiTResBlock, count_params
from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save, load_checkpoint, save_checkpoint
from .diffusion import VE, VP, NoiseSchedule, SamplerConfig, dsm_loss, sample, sample_network
from .networks import (
    PRESETS,
    ConfigError,
    ImageSpaceConfig,
    LatentConfig,
    build_network,
    denoise_forward,
)
from .tmsa import TMSA, TmsaConfig

__version__ = "0.1.0"

__all__ = [
    "AdaLNBlock", "CheckpointError", "ConfigError", "DiffiTBlock", "DiffiTResBlock", "ImageSpaceConfig",
    "LatentConfig", "NoiseSchedule", "PRESETS", "SamplerConfig", "TMSA", "TmsaConfig", "VE", "VP",
    "build_network", "checkpoint_load", "checkpoint_save", "count_params", "denoise_forward", "dsm_loss",
    "load_checkpoint", "sample", "sample_network", "save_checkpoint",
]
