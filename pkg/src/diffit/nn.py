"""Parameter containers and the small layers the networks are built from."""

from __future__ import annotations

import contextlib
import threading
from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Rng, Tensor, conv2d_3x3, get_default_dtype, group_norm, layer_norm, linear
from .tensor.core import ContractError

_init = threading.local()


@contextlib.contextmanager
def meta_init():
    """Build modules with shape-only parameters (zero-stride views, no memory).

    Lets full-scale configs be constructed and counted without allocating
    hundreds of millions of floats. Such modules cannot be run.
    """
    prev = getattr(_init, "meta", False)
    _init.meta = True
    try:
        yield
    finally:
        _init.meta = prev


def _alloc(shape, fill):
    dtype = get_default_dtype()
    if getattr(_init, "meta", False):
        return np.broadcast_to(np.zeros((), dtype=dtype), shape)
    return fill().astype(dtype) if callable(fill) else np.full(shape, fill, dtype=dtype)


def lecun_normal(shape, fan_in: int, rng: Rng) -> Tensor:
    std = 1.0 / np.sqrt(fan_in)
    data = _alloc(shape, lambda: rng.normal(shape) * std)
    return Tensor(data, requires_grad=True)


def constant(shape, value: float = 0.0) -> Tensor:
    return Tensor(_alloc(shape, value), requires_grad=True)


class Module:
    """Attribute-scanning container: parameters are the Tensor attributes and
    those of child modules (including lists of modules), in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ContractError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ContractError(f"state mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(int(np.prod(p.shape)) for p in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_(self) -> "Module":
        """Set every parameter to zero in place (wiring tests)."""
        for p in self.parameters():
            p.data = np.zeros(p.shape, dtype=p.dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True):
        self.weight = lecun_normal((d_in, d_out), d_in, rng)
        self.bias = constant((d_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv3x3(Module):
    def __init__(self, c_in: int, c_out: int, rng: Rng, stride: int = 1):
        self.weight = lecun_normal((3, 3, c_in, c_out), 9 * c_in, rng)
        self.bias = constant((c_out,))
        self._stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_3x3(x, self.weight, self.bias, stride=self._stride)


class LayerNorm(Module):
    def __init__(self, d: int, affine: bool = True, eps: float = 1e-5):
        self.weight = constant((d,), 1.0) if affine else None
        self.bias = constant((d,)) if affine else None
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self._eps)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 32, eps: float = 1e-5):
        groups = min(groups, channels)
        while channels % groups:
            groups -= 1
        self._groups = groups
        self.weight = constant((channels,), 1.0)
        self.bias = constant((channels,))
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return group_norm(x, self._groups, self.weight, self.bias, self._eps)
