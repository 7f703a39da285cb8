"""Minimal reverse-mode tensor engine."""
from .gradcheck import GRADCHECK_CASES, GradcheckReport, gradcheck, kink_mask, run_all, run_case, scale_grad
from .ops import (
    add,
    batch_norm,
    concat_channels,
    conv2d,
    conv_transpose2d,
    cross_entropy,
    dropout,
    global_avg_pool,
    l2_normalize,
    leaky_relu,
    linear,
    mean,
    mse,
    mul,
    relu,
    reshape,
    resize,
    sigmoid,
    sub,
)
from .ops import sum as tsum
from .optim import Adam, AdamState, adam_step
from .tensor import Node, Parameter, Tape, Tensor, backward, default_dtype, grad_enabled, make_result, no_grad, precision
