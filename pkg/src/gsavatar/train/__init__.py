"""Optimization: losses, Adam, metrics and the two fitting stages."""
from .adam import AdamState, NonFiniteGradient, OptimConfig, adam_step
from .losses import LossWeights, offset_loss, perceptual_proxy, rgb_loss, silhouette_loss
from .metrics import PSNR_CAP, psnr, ssim, ssim_with_grad
from .stage1 import GeometryModel, Stage1Config, fit_stage1, stage1_loss_and_grad
from .stage2 import Avatar, FitError, Observation, Stage2Config, evaluate_psnr, fit_stage2, stage2_loss_and_grad
from .trace import FitTrace, TraceRow

__all__ = [
    "AdamState",
    "Avatar",
    "FitError",
    "FitTrace",
    "GeometryModel",
    "LossWeights",
    "NonFiniteGradient",
    "Observation",
    "OptimConfig",
    "PSNR_CAP",
    "Stage1Config",
    "Stage2Config",
    "TraceRow",
    "adam_step",
    "evaluate_psnr",
    "fit_stage1",
    "fit_stage2",
    "offset_loss",
    "perceptual_proxy",
    "psnr",
    "rgb_loss",
    "silhouette_loss",
    "ssim",
    "ssim_with_grad",
    "stage1_loss_and_grad",
    "stage2_loss_and_grad",
]
