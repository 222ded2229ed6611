"""A small reverse-mode differentiation engine on top of numpy."""

from .ops import (
    add,
    add_scalar,
    conv2d,
    dense,
    flatten,
    maxpool2d,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    total,
    upsample_bilinear,
)
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, backward

__all__ = [
    "AdamState", "Tape", "Tensor", "adam_step", "add", "add_scalar", "backward",
    "conv2d", "dense", "flatten", "maxpool2d", "mul", "relu", "reshape", "scale",
    "sigmoid", "softmax", "softmax_cross_entropy", "total", "upsample_bilinear",
]
