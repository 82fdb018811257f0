"""Blur-pattern pretraining and motion/semantic guidance for latent-diffusion deblurring."""

from .blur import BlurSpec, DatasetManifest, Trajectory, build_dataset, pattern_stats, render_blur
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .evaluation import cross_matrix, psnr, rank_scores, sharpness_proxy, ssim
from .pipeline import TrainConfig, deblur, run_bpp, run_finetune, run_mixed

__version__ = "0.1.0"

__all__ = [
    "BlurSpec", "Checkpoint", "DatasetManifest", "TrainConfig", "Trajectory", "build_dataset",
    "cross_matrix", "deblur", "load_checkpoint", "pattern_stats", "psnr", "rank_scores",
    "render_blur", "run_bpp", "run_finetune", "run_mixed", "save_checkpoint", "sharpness_proxy", "ssim",
]
