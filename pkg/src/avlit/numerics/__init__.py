"""Tensor storage, neural primitives and reverse-mode autodiff."""

from . import functional
from .functional import (
    add,
    clip,
    concat,
    conv1d,
    conv2d,
    conv_output_length,
    conv_transpose1d,
    conv_transpose2d,
    div,
    fit_length,
    getitem,
    global_channel_norm,
    leaky_relu,
    log,
    mul,
    nearest_indices,
    nearest_interp1d,
    prelu,
    relu,
    reshape,
    sub,
    transpose,
)
from .module import Module, uniform_init
from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    count_macs,
    get_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    set_dtype,
)

__all__ = [
    "Module",
    "ShapeError",
    "Tensor",
    "add",
    "as_tensor",
    "clip",
    "concat",
    "conv1d",
    "conv2d",
    "conv_output_length",
    "conv_transpose1d",
    "conv_transpose2d",
    "count_macs",
    "div",
    "fit_length",
    "functional",
    "get_dtype",
    "getitem",
    "global_channel_norm",
    "is_grad_enabled",
    "leaky_relu",
    "log",
    "mul",
    "nearest_indices",
    "nearest_interp1d",
    "no_grad",
    "precision",
    "prelu",
    "relu",
    "reshape",
    "set_dtype",
    "sub",
    "transpose",
    "uniform_init",
]
