"""Diffusion-style feature denoisers fused into a frozen affine backbone."""
from .backbone import ToyBackbone, forward, make_toy_backbone, param_count
from .denoiser import DenoiseLayer, TrainConfig, TrainReport, train_denoisers
from .fusion import FusedModel, FusionMode, fuse_model, verify_equivalence
from .schedule import NoiseSchedule, build_schedule

__all__ = [
    "DenoiseLayer", "FusedModel", "FusionMode", "NoiseSchedule", "ToyBackbone", "TrainConfig",
    "TrainReport", "build_schedule", "forward", "fuse_model", "make_toy_backbone", "param_count",
    "train_denoisers", "verify_equivalence",
]
__version__ = "0.1.0"
