"""Reverse-mode differentiation core: tensors, tape, primitives, gradient checks."""
from .gradcheck import GradCheckReport, finite_difference_check, relative_error
from .kernels import BACKEND
from .ops import (
    add, affine, bilstm_encode, concat, conv1d_wide, cross_entropy, embedding, getitem,
    lstm_sequence, lstm_step, matmul, mean_all, mul, relu, reshape, scale, sigmoid,
    softmax, stack, sub, sum_all, tanh, time_maxpool, transpose,
)
from .tensor import Tape, Tensor, active_tape, as_tensor, backprop

__all__ = [
    "BACKEND", "GradCheckReport", "Tape", "Tensor", "active_tape", "add", "affine",
    "as_tensor", "backprop", "bilstm_encode", "concat", "conv1d_wide", "cross_entropy",
    "embedding", "finite_difference_check", "getitem", "lstm_sequence", "lstm_step",
    "matmul", "mean_all", "mul", "relative_error", "relu", "reshape", "scale", "sigmoid",
    "softmax", "stack", "sub", "sum_all", "tanh", "time_maxpool", "transpose",
]
