"""Closed-form multiply-accumulate counts for one forward pass (batch 1).

Counted: linear layers, convolutions and the two attention matmuls
(``n_q * n_k * d`` each for logits and value aggregation). Norms, softmax,
activations and additions are free. One MAC is reported as one FLOP.
The counts agree exactly with :func:`diffit.tensor.count_macs` run on a
real forward.
"""

from __future__ import annotations

from collections import OrderedDict

from ..networks import ImageSpaceConfig, LatentConfig, NetworkConfig

COMPONENTS = ("time_embed", "stem", "conv", "qkv", "qkv_time", "time_bias", "attn_logits", "attn_values",
              "attn_out", "mlp", "time_mlp", "adaln_cond", "down", "up", "fuse", "head")


def attention_logit_macs(h: int, w: int, d: int, window: int = 0, extra_keys: int = 0) -> int:
    """MACs of q k^T over an h x w grid: ``H W * n_k * d`` with n_k = w^2
    (windowed) or H W (global). Windowed / global = w^2 / (H W) exactly."""
    n_k = (window * window if window else h * w) + extra_keys
    return h * w * n_k * d


def _rel_entries(side: int) -> int:
    return (2 * side - 1) ** 2


def _block(acc: dict, n_side: int, d: int, d_t: int, heads: int, window: int, mlp_ratio: int,
           kind: str, time_mode: str, bias_mode: str, injection: str, out_proj: bool) -> None:
    """Add one transformer block on an n_side x n_side grid."""
    n = n_side * n_side
    if kind == "adaln":
        acc["adaln_cond"] += d_t * 6 * d
        out_proj, injection, extra = True, "mlp_off", 0
    else:
        extra = 1 if time_mode == "separate_token" and injection == "tmsa" else 0
    acc["qkv"] += n * d * 3 * d
    if injection == "tmsa":
        acc["qkv_time"] += d_t * 3 * d
    if injection == "bias" and bias_mode == "relative_2d":
        side = window or n_side
        acc["time_bias"] += d_t * _rel_entries(side) * heads
    if injection == "mlp":
        acc["time_mlp"] += d_t * d
    logits = attention_logit_macs(n_side, n_side, d, window, extra)
    acc["attn_logits"] += logits
    acc["attn_values"] += logits
    if out_proj:
        acc["attn_out"] += n * d * d
    acc["mlp"] += 2 * n * d * mlp_ratio * d


def _image(c: ImageSpaceConfig, acc: dict) -> None:
    r0 = c.resolution
    acc["stem"] += r0 * r0 * 9 * c.in_channels * c.widths[0]

    def stage(i):
        r, d = c.stage_resolution(i), c.widths[i]
        for _ in range(c.blocks[i]):
            acc["conv"] += r * r * 9 * d * d
            _block(acc, r, d, c.d_t, c.heads, c.windows[i], c.mlp_ratio, c.block_kind, c.time_mode,
                   c.bias_mode, c.time_injection, c.out_proj)

    for i in range(c.stages):
        stage(i)
        if i < c.stages - 1:
            r = c.stage_resolution(i + 1)
            acc["down"] += r * r * 9 * c.widths[i] * c.widths[i + 1]
    for i in reversed(range(c.stages - 1)):
        r, d = c.stage_resolution(i), c.widths[i]
        acc["up"] += r * r * 9 * c.widths[i + 1] * d
        acc["fuse"] += r * r * 2 * d * d
        stage(i)
    acc["head"] += r0 * r0 * 9 * c.widths[0] * c.in_channels


def _latent(c: LatentConfig, acc: dict) -> None:
    g, pc = c.grid, c.patch * c.patch * c.channels
    n = g * g
    acc["stem"] += n * pc * c.hidden
    for _ in range(c.depth):
        _block(acc, g, c.hidden, c.d_t, c.heads, 0, c.mlp_ratio, c.block_kind, c.time_mode, c.bias_mode,
               c.time_injection, c.out_proj)
    acc["head"] += n * c.hidden * pc


def flops(config: NetworkConfig) -> "OrderedDict[str, int]":
    """MACs per single-sample forward, by component, plus ``total``."""
    acc = OrderedDict((k, 0) for k in COMPONENTS)
    acc["time_embed"] = 2 * config.d_t * config.d_t
    if config.family == "image":
        _image(config, acc)
    else:
        _latent(config, acc)
    acc["total"] = sum(acc.values())
    return acc
