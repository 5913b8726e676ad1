"""Numeric substrate: autodiff tensors, Adam, gradient checking."""

from emorag.numkit.gradcheck import grad_check
from emorag.numkit.optim import Adam, AdamState, adam_step
from emorag.numkit.autodiff import (
    DiffTensor,
    Function,
    add,
    backward,
    concat,
    div,
    exp,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    softmax,
    softmax_rows,
    sub,
    tanh,
    tensor,
    transpose,
    tsum,
)

__all__ = [
    "Adam",
    "AdamState",
    "DiffTensor",
    "Function",
    "adam_step",
    "add",
    "backward",
    "concat",
    "div",
    "exp",
    "grad_check",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "power",
    "relu",
    "reshape",
    "softmax",
    "softmax_rows",
    "sub",
    "tanh",
    "tensor",
    "transpose",
    "tsum",
]
