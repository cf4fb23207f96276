"""Minimal differentiable numeric kernel."""
from .check import grad_check, numerical_gradient, relative_error
from .ops import (
    bilinear_resize,
    concat,
    conv2d,
    elu,
    instance_norm,
    linear,
    matmul,
    mse,
    relu,
    sigmoid,
    softplus,
    stack,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, as_tensor, default_dtype, grad_enabled, no_grad, parameter, precision

__all__ = [
    "Adam",
    "AdamState",
    "Tensor",
    "adam_step",
    "as_tensor",
    "bilinear_resize",
    "concat",
    "conv2d",
    "default_dtype",
    "elu",
    "grad_check",
    "grad_enabled",
    "instance_norm",
    "linear",
    "matmul",
    "mse",
    "no_grad",
    "numerical_gradient",
    "parameter",
    "precision",
    "relative_error",
    "relu",
    "sigmoid",
    "softplus",
    "stack",
]
