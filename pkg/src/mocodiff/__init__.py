"""Motion artifact simulation and correction for 2D MRI slices."""

from .diffusion import NoiseSchedule, build_schedule, correct, q_sample
from .neural import UNet, UNetConfig, build_unet
from .preprocess import RigidParams2D

__all__ = [
    "NoiseSchedule",
    "RigidParams2D",
    "UNet",
    "UNetConfig",
    "build_schedule",
    "build_unet",
    "correct",
    "q_sample",
]

__version__ = "0.1.0"
