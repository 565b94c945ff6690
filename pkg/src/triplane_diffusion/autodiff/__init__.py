"""Minimal reverse-mode autodiff over dense numpy tensors."""

from .tensor import (
    NonDeterministicError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    backward,
    config,
    no_grad,
    parameter,
)
from . import ops
from .ops import (
    absolute,
    add,
    clamp,
    concat,
    constant,
    conv2d,
    cumsum,
    div,
    exp,
    getitem,
    grid_sample,
    group_norm,
    linear,
    log,
    matmul,
    mul,
    neg,
    permute_along_axis,
    power,
    relu,
    reshape,
    sigmoid,
    silu,
    softmax,
    softplus,
    stack,
    sub,
    swapaxes,
    tensor_mean,
    tensor_sum,
    upsample_bilinear,
    upsample_nearest,
)
from .gradcheck import GradCheckReport, grad_check
