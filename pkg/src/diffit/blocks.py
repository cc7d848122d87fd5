"""Residual cells: the DiffiT transformer block, the image-space DiffiT
ResBlock, and an adaLN-Zero block used as the modulation baseline."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .nn import GroupNorm, LayerNorm, Linear, Module, constant, lecun_normal
from .tensor import Rng, Tensor, add, conv2d_3x3, gelu, linear, mul, reshape, split, swish
from .tensor.core import ContractError, ShapeError
from .tmsa import TMSA, TmsaConfig

TIME_INJECTIONS = ("tmsa", "bias", "mlp")

# parameter-name suffixes that carry time conditioning inside a block
_TIME_COND = ("qkv_time", "time_bias", "time_mlp.weight", "cond.weight", "cond.bias")


class MLP(Module):
    def __init__(self, d: int, ratio: int, rng: Rng):
        self.fc1 = Linear(d, ratio * d, rng)
        self.fc2 = Linear(ratio * d, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class DiffiTBlock(Module):
    """Pre-LN residual TMSA followed by a pre-LN residual MLP.

    ``time_injection`` selects where the time token enters: ``"tmsa"`` (q/k/v
    projections), ``"bias"`` (relative position bias only) or ``"mlp"``
    (added to the MLP input only).
    """

    def __init__(self, d: int, d_t: int, heads: int, rng: Rng, window: int = 0, grid=(0, 0),
                 mlp_ratio: int = 4, time_mode: str = "mixed", bias_mode: str = "relative_2d",
                 time_injection: str = "tmsa", scale: str = "head", out_proj: bool = True):
        if time_injection not in TIME_INJECTIONS:
            raise ContractError(f"time_injection must be one of {TIME_INJECTIONS}")
        attn_inj = {"tmsa": "qkv", "bias": "bias", "mlp": "none"}[time_injection]
        self.ln1 = LayerNorm(d)
        self.attn = TMSA(TmsaConfig(d, d_t, heads, window, tuple(grid), time_mode, bias_mode,
                                    attn_inj, scale, out_proj), rng)
        self.ln2 = LayerNorm(d)
        self.time_mlp = Linear(d_t, d, rng, bias=False) if time_injection == "mlp" else None
        self.mlp = MLP(d, mlp_ratio, rng)

    def forward(self, x: Tensor, x_t: Tensor) -> Tensor:
        return diffit_block_forward(x, x_t, self)


def diffit_block_forward(x: Tensor, x_t: Tensor, block: DiffiTBlock) -> Tensor:
    d = block.attn.config.d
    if x.ndim != 4 or x.shape[-1] != d:
        raise ShapeError(f"diffit block: input {x.shape} does not match width {d}")
    h = add(block.attn(block.ln1(x), x_t), x)
    z = block.ln2(h)
    if block.time_mlp is not None:
        z = add(z, reshape(block.time_mlp(x_t), (x_t.shape[0], 1, 1, d)))
    return add(block.mlp(z), h)


class DiffiTResBlock(Module):
    """``x + DiffiTBlock(Conv3x3(swish(GN(x))), x_t)``.

    ``block_kind="adaln"`` swaps the inner block for :class:`AdaLNBlock`
    (modulation-baseline twin of the image-space network).
    """

    def __init__(self, d: int, d_t: int, heads: int, rng: Rng, groups: int = 32,
                 block_kind: str = "diffit", **block_kw):
        self.norm = GroupNorm(d, groups)
        self.conv_weight = lecun_normal((3, 3, d, d), 9 * d, rng)
        self.conv_bias = constant((d,))
        if block_kind == "diffit":
            self.block = DiffiTBlock(d, d_t, heads, rng, **block_kw)
        elif block_kind == "adaln":
            keep = {k: v for k, v in block_kw.items() if k in ("window", "grid", "mlp_ratio", "bias_mode", "scale")}
            self.block = AdaLNBlock(d, d_t, heads, rng, **keep)
        else:
            raise ContractError(f"unknown block kind {block_kind!r}")

    def forward(self, x: Tensor, x_t: Tensor) -> Tensor:
        return diffit_resblock_forward(x, x_t, self)


def diffit_resblock_forward(x: Tensor, x_t: Tensor, cell: DiffiTResBlock) -> Tensor:
    if x.ndim != 4 or x.shape[-1] != cell.conv_weight.shape[2]:
        raise ShapeError(f"diffit resblock: input {x.shape} does not match width {cell.conv_weight.shape[2]}")
    xh = conv2d_3x3(swish(cell.norm(x)), cell.conv_weight, cell.conv_bias)
    return add(cell.block(xh, x_t), x)


class AdaLNBlock(Module):
    """DiT-style block: shift/scale/gate for both branches predicted from
    ``swish(x_t)``. The conditioning layer is zero-initialised (adaLN-Zero),
    so the block is the identity at init."""

    def __init__(self, d: int, d_t: int, heads: int, rng: Rng, window: int = 0, grid=(0, 0),
                 mlp_ratio: int = 4, bias_mode: str = "none", scale: str = "head"):
        self.ln1 = LayerNorm(d, affine=False, eps=1e-6)
        self.attn = TMSA(TmsaConfig(d, d_t, heads, window, tuple(grid), "mixed", bias_mode, "none",
                                    scale, True, qkv_bias=True), rng)
        self.ln2 = LayerNorm(d, affine=False, eps=1e-6)
        self.mlp = MLP(d, mlp_ratio, rng)
        self.cond = Linear(d_t, 6 * d, rng)
        self.cond.weight.data = np.zeros_like(self.cond.weight.data)

    def forward(self, x: Tensor, x_t: Tensor) -> Tensor:
        return adaln_block_forward(x, x_t, self)


def modulate(z: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return add(mul(z, add(scale, 1.0)), shift)


def adaln_block_forward(x: Tensor, x_t: Tensor, block: AdaLNBlock) -> Tensor:
    d = block.attn.config.d
    if x.ndim != 4 or x.shape[-1] != d:
        raise ShapeError(f"adaln block: input {x.shape} does not match width {d}")
    b = x.shape[0]
    mods = split(linear(swish(x_t), block.cond.weight, block.cond.bias), [d] * 6, axis=-1)
    shift1, scale1, gate1, shift2, scale2, gate2 = (reshape(m, (b, 1, 1, d)) for m in mods)
    h = add(x, mul(gate1, block.attn(modulate(block.ln1(x), shift1, scale1), x_t)))
    return add(h, mul(gate2, block.mlp(modulate(block.ln2(h), shift2, scale2))))


# ---------------------------------------------------------------------------
# parameter accounting


def is_time_conditioning(name: str) -> bool:
    return any(name == s or name.endswith("." + s) for s in _TIME_COND)


def count_params(module: Module, depth: int = 1) -> "OrderedDict[str, int]":
    """Exact parameter counts grouped by the first ``depth`` name components.

    Extra rows: ``time_conditioning`` (per-block time pathways: TMSA temporal
    projections, time-bias/MLP injections, adaLN modulation incl. its bias),
    ``time_conditioning_weights`` (same without biases) and ``total``.
    """
    table: "OrderedDict[str, int]" = OrderedDict()
    tc = tcw = total = 0
    for name, p in module.named_parameters():
        n = int(np.prod(p.shape))
        key = ".".join(name.split(".")[:depth])
        table[key] = table.get(key, 0) + n
        total += n
        if is_time_conditioning(name):
            tc += n
            if not name.endswith("bias") or name.endswith("time_bias"):
                tcw += n
    table["time_conditioning"] = tc
    table["time_conditioning_weights"] = tcw
    table["total"] = total
    return table
