"""Minimal differentiable-computation substrate (numpy-backed, reverse mode)."""

from .gradcheck import GradcheckReport, UnreliableGradcheck, gradcheck, relative_error
from .nn import Conv2d, LayerNorm, Linear, Module
from .tensor import (
    PRIMITIVES,
    DimensionError,
    NonFiniteError,
    Parameter,
    Tensor,
    add,
    as_tensor,
    backward,
    bilinear_resize,
    concat,
    conv2d,
    div,
    exp,
    getitem,
    interpolation_matrix,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    resize_array,
    sigmoid,
    single_threaded,
    softmax,
    stop_gradient,
    sub,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "PRIMITIVES", "Conv2d", "DimensionError", "GradcheckReport", "LayerNorm", "Linear",
    "Module", "NonFiniteError", "Parameter", "Tensor", "UnreliableGradcheck", "add",
    "as_tensor", "backward", "bilinear_resize", "concat", "conv2d", "div", "exp", "getitem",
    "gradcheck", "interpolation_matrix", "layer_norm", "log", "log_softmax", "matmul", "mean",
    "mul", "neg", "no_grad", "power", "relu", "relative_error", "reshape", "resize_array",
    "sigmoid", "single_threaded", "softmax", "stop_gradient", "sub", "tanh", "transpose", "tsum",
]
