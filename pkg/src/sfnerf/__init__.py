"""Static/transient decomposition of photo collections with a latent-conditional radiance field.

The static scene is a mip-NeRF style field conditioned on per-image
appearance codes; a 2D image-space network (FilterNet) predicts per-pixel
transient color, opacity and uncertainty that are composited over the static
render during training.
"""

from .data import SceneDataset, SyntheticSpec, generate_synthetic_scene, load_photocollection
from .estimator import SFNeRF
from .evaluation import MetricReport, psnr, ssim
from .exceptions import CheckpointError, ConfigError, IngestionError, NumericError, SFNeRFError
from .geometry import Camera, Rays, generate_rays
from .losses import LossWeights
from .trainer import Trainer, TrainConfig, load_checkpoint, train

__all__ = [
    "Camera",
    "CheckpointError",
    "ConfigError",
    "IngestionError",
    "LossWeights",
    "MetricReport",
    "NumericError",
    "Rays",
    "SFNeRF",
    "SFNeRFError",
    "SceneDataset",
    "SyntheticSpec",
    "Trainer",
    "TrainConfig",
    "generate_rays",
    "generate_synthetic_scene",
    "load_checkpoint",
    "load_photocollection",
    "psnr",
    "ssim",
    "train",
]
