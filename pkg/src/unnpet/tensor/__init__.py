"""Minimal dense tensor engine with reverse-mode autodiff."""
from .ops import (
    ConfigurationError,
    ConvSpec,
    absolute,
    box_mean2d,
    concat,
    conv3d,
    fully_connected,
    global_avg_pool,
    maximum,
    mean,
    relu,
    reshape,
    sigmoid,
    softmax,
    tconv3d,
    transpose,
)
from .optim import Adam, AdamConfig, TrainingDivergedError, xavier_init, zeros_param
from .tensor import BackwardError, Tensor, as_tensor, default_dtype, get_default_dtype, no_grad

__all__ = [
    "Adam",
    "AdamConfig",
    "BackwardError",
    "ConfigurationError",
    "ConvSpec",
    "Tensor",
    "TrainingDivergedError",
    "absolute",
    "as_tensor",
    "box_mean2d",
    "concat",
    "conv3d",
    "default_dtype",
    "fully_connected",
    "get_default_dtype",
    "global_avg_pool",
    "maximum",
    "mean",
    "no_grad",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "tconv3d",
    "transpose",
    "xavier_init",
    "zeros_param",
]
