"""Dense float64 kernel: autodiff tensors, layers, optimizer, grad checking."""

from agd.nn.tensor import (
    Tensor,
    concat_cols,
    gather_rows,
    matmul,
    mean_all,
    no_grad,
    row_softmax,
    softmax_attention,
    sum_all,
    sum_cols,
    sum_rows,
)
from agd.nn.layers import FourierEncoder, Linear, Mlp, xavier_uniform
from agd.nn.optim import AdamState, adam_step, lr_schedule
from agd.nn.gradcheck import grad_check

__all__ = [
    "Tensor",
    "concat_cols",
    "gather_rows",
    "matmul",
    "mean_all",
    "no_grad",
    "row_softmax",
    "softmax_attention",
    "sum_all",
    "sum_cols",
    "sum_rows",
    "FourierEncoder",
    "Linear",
    "Mlp",
    "xavier_uniform",
    "AdamState",
    "adam_step",
    "lr_schedule",
    "grad_check",
]
