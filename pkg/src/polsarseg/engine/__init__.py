"""Minimal differentiable tensor engine (numpy substrate)."""

from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    add,
    backward,
    concat,
    grad_enabled,
    mul,
    no_grad,
    record,
    relu,
    softmax,
    tape,
    tensor_sum,
)
from .ops import (
    ConvSpec,
    batchnorm2d,
    conv2d,
    conv_transpose2d,
    cross_entropy_loss,
    maxpool2d,
    upsample_bilinear,
)

__all__ = [
    "DEFAULT_DTYPE", "Tensor", "add", "backward", "concat", "grad_enabled",
    "mul", "no_grad", "record", "relu", "softmax", "tape", "tensor_sum",
    "ConvSpec", "batchnorm2d", "conv2d", "conv_transpose2d",
    "cross_entropy_loss", "maxpool2d", "upsample_bilinear",
]
