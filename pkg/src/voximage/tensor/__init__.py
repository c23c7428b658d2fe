"""Autodiff tensor engine: float64 arrays, dynamic graph, AdamW, checkpoints."""

from .core import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    embedding,
    exp,
    gelu,
    im2col,
    layernorm,
    log,
    logsumexp,
    matmul,
    mul,
    narrow,
    neg,
    no_grad,
    power,
    reshape,
    scatter_tokens,
    set_finite_check,
    softmax,
    sqrt,
    sub,
    take_per_row,
    take_tokens,
    tmean,
    topo_order,
    transpose,
    tsum,
    upsample_nearest2x,
)
from .checkpoint import assign_params, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .optim import AdamW, AdamWState, WarmupCosine

__all__ = [
    "AdamW", "AdamWState", "GradCheckReport", "Tensor", "WarmupCosine",
    "add", "as_tensor", "assign_params", "backward", "concat", "div",
    "embedding", "exp", "gelu", "grad_check", "im2col", "layernorm",
    "load_checkpoint", "log", "logsumexp", "matmul", "mul", "narrow", "neg", "no_grad",
    "power", "reshape", "save_checkpoint", "scatter_tokens",
    "set_finite_check", "softmax", "sqrt", "sub", "take_per_row",
    "take_tokens", "tmean", "topo_order", "transpose", "tsum",
    "upsample_nearest2x",
]
