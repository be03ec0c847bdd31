"""Poisson-Gaussian low-dose simulation and variance-stabilized restoration."""

from .errors import (ConfigError, ImageFormatError, MetricError, PipelineError,
                     TrainingDivergence, VstRestoreError)
from .image import (ImagePlane, RealizationStack, RegionMask, affine_match, load_image,
                    pseudo_ground_truth, save_image, stack_mean, stack_variance)
from .metrics import MnseReport, NpsResult, mean_adjust_then_decompose, mnse_decompose, nps_2d
from .noise import (AcquisitionModel, DoseFactor, inject_ld_from_fd, simulate_fd, simulate_ld,
                    snr_fd, snr_ld)
from .restore import make_denoiser, recombine, restore_pipeline

__version__ = "0.1.0"

__all__ = [
    "AcquisitionModel", "ConfigError", "DoseFactor", "ImageFormatError", "ImagePlane",
    "MetricError", "MnseReport", "NpsResult", "PipelineError", "RealizationStack", "RegionMask",
    "TrainingDivergence", "VstRestoreError", "affine_match", "inject_ld_from_fd", "load_image",
    "make_denoiser", "mean_adjust_then_decompose", "mnse_decompose", "nps_2d",
    "pseudo_ground_truth", "recombine", "restore_pipeline", "save_image", "simulate_fd",
    "simulate_ld", "snr_fd", "snr_ld", "stack_mean", "stack_variance",
]
