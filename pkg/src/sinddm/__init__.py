"""Single-image denoising diffusion toolkit.

Train a compact multi-scale denoiser on one image, then sample new
variants of it at any size, steer generation with masks or an external
text-image embedder, and remix other images through the learned model.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .denoiser import Denoiser, DenoiserSpec
from .estimator import SinDDM
from .imgio import load_png, save_png
from .pyramid import Pyramid, build_pyramids, choose_num_scales, histogram_match, resize
from .sampler import SampleConfig, sample
from .schedule import NoiseSchedule, ScalePlan, build_plan, cosine_alpha_bar
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "Denoiser",
    "DenoiserSpec",
    "NoiseSchedule",
    "Pyramid",
    "SampleConfig",
    "ScalePlan",
    "SinDDM",
    "TrainConfig",
    "build_plan",
    "build_pyramids",
    "choose_num_scales",
    "cosine_alpha_bar",
    "histogram_match",
    "load_checkpoint",
    "load_png",
    "resize",
    "sample",
    "save_checkpoint",
    "save_png",
    "train",
    "__version__",
]
