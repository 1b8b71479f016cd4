"""Low-light raw-to-RGB restoration: a U-Net with a global-information bottleneck.

Everything runs on a small reverse-mode autodiff over numpy arrays.
"""

from .estimator import GiaRestorer, RawPreprocessor
from .losses import joint_loss, ms_ssim, psnr, ssim
from .models import ArchConfig, GiaSpec, build, count_flops, count_params, desk_config, variant_config
from .raw import PackedInput, RawFrame, Sample, pack, preprocess, unpack
from .tensor import Tensor, backward
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "GiaRestorer",
    "GiaSpec",
    "PackedInput",
    "RawFrame",
    "RawPreprocessor",
    "Sample",
    "Tensor",
    "TrainConfig",
    "backward",
    "build",
    "count_flops",
    "count_params",
    "desk_config",
    "evaluate",
    "joint_loss",
    "ms_ssim",
    "pack",
    "preprocess",
    "psnr",
    "ssim",
    "train",
    "unpack",
    "variant_config",
]
