"""Differentiable numeric substrate: tensors, ops, gradients, Adam."""

from .adam import AdamState, NonFiniteGradientError, adam_step, zero_grads
from .functional import (
    BCE_EPS,
    BN_EPS,
    add,
    batchnorm,
    bce_from_probability,
    concat,
    conv1d,
    conv2d,
    linear,
    maxpool1d,
    maxpool2d,
    mean_over_axis,
    mul,
    permute,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sum_over_axis,
    transpose_c1t_to_1ct,
)
from .gradcheck import check_gradients, numeric_grad, relative_error
from .tensor import (
    NumericsError,
    ShapeError,
    Tensor,
    as_tensor,
    default_dtype,
    grad_enabled,
    no_grad,
    parameter,
    set_debug_checks,
    set_default_dtype,
    using_dtype,
)

__all__ = [
    "AdamState",
    "NonFiniteGradientError",
    "NumericsError",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "batchnorm",
    "bce_from_probability",
    "BCE_EPS",
    "BN_EPS",
    "check_gradients",
    "concat",
    "conv1d",
    "conv2d",
    "default_dtype",
    "grad_enabled",
    "linear",
    "maxpool1d",
    "maxpool2d",
    "mean_over_axis",
    "mul",
    "no_grad",
    "numeric_grad",
    "parameter",
    "permute",
    "relative_error",
    "relu",
    "reshape",
    "scale",
    "set_debug_checks",
    "set_default_dtype",
    "sigmoid",
    "softmax",
    "sum_over_axis",
    "transpose_c1t_to_1ct",
    "using_dtype",
    "zero_grads",
]
