"""Dense tensor arithmetic and reverse-mode differentiation."""
from .tensor import GradTape, Primitive, Tensor, apply, as_tensor, current_tape
from .ops import (
    add, causal_softmax, concat, cross_entropy, div, exp, getitem, layer_norm, log, matmul, mean,
    mul, relu, reshape, rope, softmax_scale, square, sub, swap_last, sum, take, transpose,
)
from .gradcheck import finite_diff_grad, relative_error

__all__ = [
    "GradTape", "Primitive", "Tensor", "apply", "as_tensor", "current_tape",
    "add", "causal_softmax", "concat", "cross_entropy", "div", "exp", "getitem", "layer_norm",
    "log", "matmul", "mean", "mul", "relu", "reshape", "rope", "softmax_scale", "square", "sub",
    "swap_last", "sum", "take", "transpose", "finite_diff_grad", "relative_error",
]
