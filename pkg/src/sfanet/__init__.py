"""Crowd counting with dual-path multi-scale fusion and supervised attention."""

from .autograd import Parameter, Tensor, backward, no_grad
from .model import ModelConfig, ModelOutput, SFANet, build_model
from .checkpoint import load_checkpoint, save_checkpoint
from .groundtruth import (
    AttentionTarget,
    DensityMap,
    KernelSpec,
    PointAnnotation,
    adaptive_kernel,
    downscale_half_sum,
    render_attention,
    render_density,
)
from .data import AugmentConfig, Sample, augment, eval_prepare, make_batch
from .training import TrainConfig, TrainState, adam_step, attention_loss, combined_loss, density_loss, train
from .evaluate import EvalResult, count_from_density, evaluate, export_maps

__version__ = "0.1.0"
