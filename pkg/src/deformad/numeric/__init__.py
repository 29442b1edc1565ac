"""Numeric core: tensors, tape, layers' primitive ops, optimizer."""

from .tensor import (
    Tape,
    Tensor,
    backward,
    concat,
    default_dtype,
    elementwise,
    mean,
    narrow,
    precision,
    reshape,
    set_precision,
    stop_gradient,
    sum_,
    tensor,
    transpose_axes,
)
from .convolution import conv2d, conv_transpose2d
from .sampling import (
    bilinear_upsample,
    grid_sample,
    identity_grid,
    pixel_centers,
    spatial_gradient,
)
from .optim import AdamW, cosine_lr
from .gradcheck import check_gradients, max_relative_error, numerical_gradient

__all__ = [
    "AdamW",
    "Tape",
    "Tensor",
    "backward",
    "bilinear_upsample",
    "check_gradients",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "cosine_lr",
    "default_dtype",
    "elementwise",
    "grid_sample",
    "identity_grid",
    "max_relative_error",
    "mean",
    "narrow",
    "numerical_gradient",
    "pixel_centers",
    "precision",
    "reshape",
    "set_precision",
    "spatial_gradient",
    "stop_gradient",
    "sum_",
    "tensor",
    "transpose_axes",
]
