"""Reverse-mode automatic differentiation over float64 numpy arrays."""

from prunedistill.autodiff.ops import (
    add,
    batch_norm,
    clamp_min,
    conv2d,
    exp,
    flatten,
    global_avg_pool,
    linear,
    log,
    log_softmax_with_temperature,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    scale,
    softmax_with_temperature,
    sub,
    sum,
)
from prunedistill.autodiff.tensor import Node, Tape, Tensor, as_tensor, backward, zero_grads

__all__ = [
    "Node", "Tape", "Tensor", "as_tensor", "backward", "zero_grads",
    "add", "batch_norm", "clamp_min", "conv2d", "exp", "flatten", "global_avg_pool",
    "linear", "log", "log_softmax_with_temperature", "matmul", "mean", "mul", "neg",
    "relu", "reshape", "scale", "softmax_with_temperature", "sub", "sum",
]
