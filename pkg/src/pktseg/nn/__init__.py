"""Minimal reverse-mode autodiff for 3D segmentation networks."""
from .functional import (
    batchnorm3d,
    concat_channels,
    conv3d,
    conv_transpose3d,
    dice_ce_loss,
    downsample,
    one_hot,
    reduce_sum,
    relu,
    softmax_channels,
)
from .gradcheck import finite_difference_check
from .layers import BatchNorm3d, Conv3d, ConvBNReLU, ConvTranspose3d, DoubleConv, LayerParams, Module
from .optim import OptimizerConfig, sgd_momentum_step
from .tensor import DiffTensor, no_grad

__all__ = [
    "DiffTensor", "no_grad", "LayerParams", "Module", "Conv3d", "ConvTranspose3d",
    "BatchNorm3d", "ConvBNReLU", "DoubleConv", "OptimizerConfig", "sgd_momentum_step",
    "finite_difference_check", "conv3d", "conv_transpose3d", "batchnorm3d", "relu",
    "softmax_channels", "downsample", "concat_channels", "dice_ce_loss", "one_hot", "reduce_sum",
]
