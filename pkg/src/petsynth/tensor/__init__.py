"""Numpy reverse-mode autodiff with the 3D layers the GAN needs."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .conv import ShapeError, conv3d, conv3d_transpose, conv_output_size, transpose_output_size
from .core import (GradientError, Tensor, add, as_tensor, concat, concat_channels, get_default_dtype,
                   leaky_relu, mul, no_grad, parameter, precision, relu, reshape, set_default_dtype,
                   sigmoid, tabs, tanh, tmean, tsum)
from .nn import (Conv3d, ConvTranspose3d, InstanceNorm3d, Module, SpectralState, instance_norm3d,
                 power_iteration, spectral_normalize)
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam", "AdamState", "CheckpointError", "Conv3d", "ConvTranspose3d", "GradientError",
    "InstanceNorm3d", "Module", "ShapeError", "SpectralState", "Tensor", "adam_step", "add",
    "as_tensor", "concat", "concat_channels", "conv3d", "conv3d_transpose", "conv_output_size",
    "get_default_dtype", "instance_norm3d", "leaky_relu", "load_checkpoint", "mul", "no_grad",
    "parameter", "power_iteration", "precision", "relu", "reshape", "save_checkpoint",
    "set_default_dtype", "sigmoid", "spectral_normalize", "tabs", "tanh", "tmean",
    "transpose_output_size", "tsum",
]
