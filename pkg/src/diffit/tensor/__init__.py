"""Minimal autodiff tensor, deterministic RNG and gradient oracle."""

from .core import (
    ContractError,
    NumericError,
    PRIMITIVES,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    add,
    as_tensor,
    backward,
    concat,
    conv2d_3x3,
    count_macs,
    default_dtype,
    div,
    gelu,
    get_default_dtype,
    group_norm,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    primitive_forward,
    reshape,
    set_default_dtype,
    softmax_lastdim,
    split,
    sub,
    sum_,
    swish,
    take,
    transpose,
    upsample_nearest2x,
)
from .factory import ones, rand_uniform, randn, zeros
from .gradcheck import check_gradients, finite_diff_check
from .rng import Rng, splitmix64

__all__ = [name for name in dir() if not name.startswith("_")]
