"""Reverse-mode autodiff on dense numpy tensors, with second-order support."""

from .tensor import (
    Tensor, gradient, no_grad, set_grad_enabled, grad_enabled,
    paranoid_finite_checks, check_finite,
)
from .ops import (
    constant, add, sub, mul, div, neg, exp, log, sqrt, square, absolute,
    pow_const, sigmoid, relu, maximum_scalar, reshape, transpose, expand,
    concat, getslice, embed_slice, pad, take, scatter_add, tsum, tmean,
    max_axis, matmul, softmax, batch_norm, sum_to, channel_sum, channel_dot,
    channel_affine, add_relu, masked_grad,
)
from .conv import (
    im2col, col2im, conv2d, conv_transpose2d, conv2d_via_unfold,
    conv_transpose2d_via_unfold, max_pool2d, avg_pool2d,
    bilinear_resize, bilinear_resize_adjoint,
)
from .gradcheck import finite_difference_check, perturbed_backward

__all__ = [
    "Tensor", "gradient", "no_grad", "set_grad_enabled", "grad_enabled",
    "paranoid_finite_checks", "check_finite",
    "constant", "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt",
    "square", "absolute", "pow_const", "sigmoid", "relu", "maximum_scalar",
    "reshape", "transpose", "expand", "concat", "getslice", "embed_slice",
    "pad", "take", "scatter_add", "tsum", "tmean", "max_axis", "matmul",
    "softmax", "batch_norm", "sum_to",
    "im2col", "col2im", "conv2d", "conv_transpose2d", "conv2d_via_unfold",
    "conv_transpose2d_via_unfold", "max_pool2d",
    "avg_pool2d", "bilinear_resize", "bilinear_resize_adjoint",
    "finite_difference_check", "perturbed_backward",
]
