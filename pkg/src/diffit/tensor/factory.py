"""Tensor constructors drawing from :class:`~diffit.tensor.rng.Rng`."""

from __future__ import annotations

import numpy as np

from .core import Tensor, get_default_dtype
from .rng import Rng


def randn(shape, rng: Rng, dtype=None, requires_grad: bool = False) -> Tensor:
    """Standard normal tensor (Box-Muller over xoshiro256**)."""
    dtype = dtype or get_default_dtype()
    return Tensor(rng.normal(tuple(shape)).astype(dtype), requires_grad=requires_grad)


def rand_uniform(shape, rng: Rng, dtype=None, requires_grad: bool = False) -> Tensor:
    """Uniform on [0, 1)."""
    dtype = dtype or get_default_dtype()
    return Tensor(rng.uniform(tuple(shape)).astype(dtype), requires_grad=requires_grad)


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype or get_default_dtype()), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=dtype or get_default_dtype()), requires_grad=requires_grad)
