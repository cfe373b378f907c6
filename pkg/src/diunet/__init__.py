"""Dilated Inception U-Net segmentation library.

Dilated convolutions and receptive-field arithmetic, a small reverse-mode
autodiff engine, the dilated-Inception encoder/decoder network and its
undilated baseline, Dice metrics and loss, the slice preprocessing
pipeline, a synthetic phantom dataset, Adam training with 10-fold
cross-validation, and Shapiro-Wilk / Wilcoxon model comparison. The
`diunet` command drives the whole pipeline; DiuNetSegmenter offers a
scikit-learn style fit/predict interface.
"""

from .estimator import ChannelZScorer, DiuNetSegmenter, IntensityWindower
from .metrics import binarize, compose_from_channels, compose_subregions, dice_loss, dice_score
from .network import (
    ModelConfig,
    build_baseline_inception_unet,
    build_diunet,
    build_model,
    count_params,
    load_model,
    save_model,
)
from .phantom import PhantomSpec, generate_phantoms, kfold_split, read_dataset, write_dataset
from .preprocess import SegmentationSample, preprocess_dataset
from .stats import compare_models, shapiro_wilk, wilcoxon_signed_rank
from .tensorops import (
    DilatedConvSpec,
    conv2d,
    dilated_conv2d,
    effective_kernel_size,
    receptive_field_gain,
)
from .train import TrainConfig, cross_validate, train_model

__version__ = "0.1.0"

__all__ = [
    "ChannelZScorer",
    "DilatedConvSpec",
    "DiuNetSegmenter",
    "IntensityWindower",
    "ModelConfig",
    "PhantomSpec",
    "SegmentationSample",
    "TrainConfig",
    "binarize",
    "build_baseline_inception_unet",
    "build_diunet",
    "build_model",
    "compare_models",
    "compose_from_channels",
    "compose_subregions",
    "conv2d",
    "count_params",
    "cross_validate",
    "dice_loss",
    "dice_score",
    "dilated_conv2d",
    "effective_kernel_size",
    "generate_phantoms",
    "kfold_split",
    "load_model",
    "read_dataset",
    "receptive_field_gain",
    "save_model",
    "shapiro_wilk",
    "train_model",
    "wilcoxon_signed_rank",
    "write_dataset",
    "__version__",
]
