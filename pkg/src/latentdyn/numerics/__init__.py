"""Differentiable computation core: tensors, autodiff, AdamW, RNG streams."""

from .gradcheck import grad_check
from .optim import OptState, adamw_step
from .params import ParamStore
from .rng import RandomStream
from .tensor import (
    NumericsError,
    Tensor,
    add,
    attention,
    concat,
    div,
    gelu,
    layer_norm,
    linear,
    matmul,
    maximum,
    mul,
    reshape,
    slice_last,
    softmax,
    square,
    sub,
    terf,
    texp,
    tmax,
    tmean,
    tsqrt,
    tsum,
    transpose_last,
)

__all__ = [
    "NumericsError",
    "OptState",
    "ParamStore",
    "RandomStream",
    "Tensor",
    "adamw_step",
    "add",
    "attention",
    "concat",
    "div",
    "gelu",
    "grad_check",
    "layer_norm",
    "linear",
    "matmul",
    "maximum",
    "mul",
    "reshape",
    "slice_last",
    "softmax",
    "square",
    "sub",
    "terf",
    "texp",
    "tmax",
    "tmean",
    "tsqrt",
    "tsum",
    "transpose_last",
]
