"""Tensor tape, layers, optimizer and gradient checking."""

from .tensor import (
    Tensor,
    as_tensor,
    constant,
    parameter,
    no_grad,
    grad_enabled,
    make_op,
    add,
    sub,
    mul,
    div,
    matmul,
    transpose,
    reshape,
    getitem,
    pad_slack,
    tensor_sum,
    tensor_mean,
    tensor_abs,
    tensor_exp,
    tensor_log,
    sqrt,
)
from .ops import (
    dense,
    relu,
    softplus,
    group_norm,
    segment_max,
    max_pool,
    l2_normalize,
    pairwise_sqdist,
    GN_EPS,
    L2_EPS,
)
from .params import (
    ParamBundle,
    AdamState,
    adam_step,
    grad_check,
    GradCheckReport,
    GradCheckEntry,
    he_weights,
    glorot_weights,
)
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError

__all__ = [
    "Tensor", "as_tensor", "constant", "parameter", "no_grad", "grad_enabled",
    "make_op", "add", "sub", "mul", "div", "matmul", "transpose", "reshape",
    "getitem", "pad_slack", "tensor_sum", "tensor_mean", "tensor_abs",
    "tensor_exp", "tensor_log", "sqrt",
    "dense", "relu", "softplus", "group_norm", "segment_max", "max_pool",
    "l2_normalize", "pairwise_sqdist", "GN_EPS", "L2_EPS",
    "ParamBundle", "AdamState", "adam_step", "grad_check", "GradCheckReport",
    "GradCheckEntry", "he_weights", "glorot_weights",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]
