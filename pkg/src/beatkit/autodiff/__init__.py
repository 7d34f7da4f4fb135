"""Minimal reverse-mode autodiff, AdamW and cosine schedule."""

from .engine import (
    OPS,
    Gradients,
    Tape,
    TapeError,
    Tensor,
    abs_,
    add,
    apply,
    as_tensor,
    backward,
    broadcast,
    concat,
    cumsum,
    div,
    fold,
    gelu,
    index_select,
    matmul,
    max_reduce,
    mean,
    min_reduce,
    minmax_attention,
    mul,
    relu_hinge,
    reshape,
    scale,
    split,
    sqrt,
    square,
    sub,
    sum_,
    transpose,
)
from .gradcheck import GradCheckResult, grad_check
from .optim import NonFiniteGradientError, OptimizerState, adamw_step, cosine_lr
