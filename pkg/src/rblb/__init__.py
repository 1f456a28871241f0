"""Learn to blur from unpaired data, then learn to deblur from the pairs it makes.

Everything runs on :mod:`rblb.numerics`, a small tape-based autodiff
engine over numpy arrays.
"""

from .blur_synth import (
    BlurKernelSpec,
    CrfParams,
    NoiseMap,
    apply_crf,
    average_blur,
    gen_linear_kernel,
    invert_crf,
    kernel_blur,
    make_noise_map,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import Dataset, load_dataset, synthetic_pairs
from .losses import (
    LossReport,
    LossWeights,
    combined_bgan_loss,
    combined_dbgan_loss,
    content_loss,
    perceptual_loss,
    relativistic_loss,
    standard_adv_loss,
)
from .metrics import MetricResult, psnr, ssim
from .models import (
    NetworkSpec,
    ParamStore,
    bgan_generator_forward,
    dbgan_generator_forward,
    discriminator_forward,
    init_params,
)
from .numerics import Tape, Tensor, backward, finite_diff_check
from .training import TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "BlurKernelSpec",
    "CrfParams",
    "Dataset",
    "LossReport",
    "LossWeights",
    "MetricResult",
    "NetworkSpec",
    "NoiseMap",
    "ParamStore",
    "Tape",
    "Tensor",
    "TrainConfig",
    "apply_crf",
    "average_blur",
    "backward",
    "bgan_generator_forward",
    "combined_bgan_loss",
    "combined_dbgan_loss",
    "content_loss",
    "dbgan_generator_forward",
    "discriminator_forward",
    "finite_diff_check",
    "gen_linear_kernel",
    "init_params",
    "invert_crf",
    "kernel_blur",
    "load_checkpoint",
    "load_dataset",
    "make_noise_map",
    "perceptual_loss",
    "psnr",
    "relativistic_loss",
    "run_training",
    "save_checkpoint",
    "ssim",
    "standard_adv_loss",
    "synthetic_pairs",
]
