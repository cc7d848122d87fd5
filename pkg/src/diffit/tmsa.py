"""Time-dependent multi-head self-attention (TMSA) and time-token construction.

Queries, keys and values are linear in both the spatial token and a shared
time token::

    q = x_s @ W_qs + x_t @ W_qt      (likewise k, v)
    attn = softmax(q k^T / sqrt(d_h) + B) v

Attention runs globally or inside non-overlapping ``w x w`` windows. ``B`` is
a learned 2D relative-position table of ``(2w - 1)**2`` entries per head.
Spatial and temporal projections are stored fused, columns ``[q | k | v]``:
``qkv_spatial`` is ``(d, 3d)`` and ``qkv_time`` is ``(d_t, 3d)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nn import Linear, Module, constant, lecun_normal
from .tensor import (
    Rng,
    Tensor,
    add,
    concat,
    linear,
    matmul,
    mul,
    reshape,
    softmax_lastdim,
    split,
    swish,
    take,
    transpose,
)
from .tensor.core import ContractError, ShapeError

TIME_MODES = ("mixed", "separate_token")
BIAS_MODES = ("relative_2d", "none")
TIME_INJECTIONS = ("qkv", "bias", "none")
FOURIER_SCALE = 16.0
_FOURIER_SEED = 0x7F4A7C15


# ---------------------------------------------------------------------------
# time token


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Interleaved ``[sin(t f_0), cos(t f_0), sin(t f_1), ...]`` with
    ``f_i = 10000 ** (-i / (dim/2))``, i.e. periods geometric from 2*pi to 2*pi*1e4."""
    if dim % 2:
        raise ContractError(f"time embedding width must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half, dtype=np.float64) / half)
    ang = t[:, None] * freqs[None, :]
    out = np.empty((t.size, dim), dtype=np.float64)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def fourier_frequencies(dim: int) -> np.ndarray:
    """Fixed Gaussian frequencies (std 16) drawn from a constant seed."""
    if dim % 2:
        raise ContractError(f"time embedding width must be even, got {dim}")
    return Rng(_FOURIER_SEED).normal(dim // 2) * FOURIER_SCALE


def fourier_embedding(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    ang = 2 * np.pi * t[:, None] * fourier_frequencies(dim)[None, :]
    out = np.empty((t.size, dim), dtype=np.float64)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


class TimeEmbedding(Module):
    """Embedding of the scalar time fed through ``Linear -> swish -> Linear``.

    ``extra`` (e.g. a class-label embedding) is added to the embedding before
    the MLP.
    """

    def __init__(self, d_t: int, rng: Rng, kind: str = "positional"):
        if d_t % 2:
            raise ContractError(f"time embedding width must be even, got {d_t}")
        if kind not in ("positional", "fourier"):
            raise ContractError(f"unknown time embedding kind {kind!r}")
        self._kind = kind
        self._d_t = d_t
        self.fc1 = Linear(d_t, d_t, rng)
        self.fc2 = Linear(d_t, d_t, rng)

    def embed(self, t) -> np.ndarray:
        fn = sinusoidal_embedding if self._kind == "positional" else fourier_embedding
        return fn(t, self._d_t)

    def forward(self, t, extra: Optional[Tensor] = None) -> Tensor:
        e = Tensor(self.embed(t).astype(self.fc1.weight.dtype))
        if extra is not None:
            e = add(e, extra)
        return self.fc2(swish(self.fc1(e)))


def make_time_token(t, kind: str, d_t: int, mlp: TimeEmbedding) -> Tensor:
    if d_t % 2:
        raise ContractError(f"time embedding width must be even, got {d_t}")
    if mlp._kind != kind or mlp._d_t != d_t:
        raise ContractError("time MLP was built for a different embedding kind or width")
    return mlp(t)


# ---------------------------------------------------------------------------
# windows


def window_partition(x: Tensor, w: int) -> Tensor:
    """(b, H, W, C) -> (b * H/w * W/w, w*w, C), windows in row-major order."""
    b, h, wd, c = x.shape
    if w <= 0 or h % w or wd % w:
        raise ContractError(f"window size {w} must divide grid {h}x{wd}")
    x = reshape(x, (b, h // w, w, wd // w, w, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b * (h // w) * (wd // w), w * w, c))


def window_merge(windows: Tensor, h: int, wd: int, w: int | None = None) -> Tensor:
    """Inverse of :func:`window_partition`."""
    n = windows.shape[1]
    if w is None:
        w = int(round(np.sqrt(n)))
    if w * w != n or h % w or wd % w:
        raise ContractError(f"window merge: {n} tokens per window do not tile {h}x{wd}")
    c = windows.shape[2]
    b = windows.shape[0] // ((h // w) * (wd // w))
    x = reshape(windows, (b, h // w, wd // w, w, w, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (b, h, wd, c))


def relative_position_index(h: int, w: int, side: int) -> np.ndarray:
    """(h*w, h*w) indices into a ``(2*side-1)**2`` table for an ``h x w`` token patch."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ys, xs = ys.reshape(-1), xs.reshape(-1)
    dy = ys[:, None] - ys[None, :] + side - 1
    dx = xs[:, None] - xs[None, :] + side - 1
    return dy * (2 * side - 1) + dx


# ---------------------------------------------------------------------------
# config / module


@dataclass(frozen=True)
class TmsaConfig:
    d: int
    d_t: int
    heads: int
    window: int = 0
    grid: tuple[int, int] = (0, 0)
    time_mode: str = "mixed"
    bias_mode: str = "relative_2d"
    time_injection: str = "qkv"
    scale: str = "head"
    out_proj: bool = True
    qkv_bias: bool = False

    def __post_init__(self):
        if self.d % self.heads:
            raise ContractError(f"d={self.d} not divisible by heads={self.heads}")
        if self.time_mode not in TIME_MODES:
            raise ContractError(f"time_mode must be one of {TIME_MODES}")
        if self.bias_mode not in BIAS_MODES:
            raise ContractError(f"bias_mode must be one of {BIAS_MODES}")
        if self.time_injection not in TIME_INJECTIONS:
            raise ContractError(f"time_injection must be one of {TIME_INJECTIONS}")
        if self.scale not in ("head", "model"):
            raise ContractError("scale must be 'head' or 'model'")
        if self.time_injection == "bias" and self.bias_mode != "relative_2d":
            raise ContractError("time_injection='bias' needs bias_mode='relative_2d'")
        if self.time_mode == "separate_token" and self.time_injection != "qkv":
            raise ContractError("separate_token mode projects the time token through qkv_time")
        if self.window == 0 and self.bias_mode == "relative_2d" and min(self.grid) <= 0:
            raise ContractError("global attention with a relative bias needs the grid size")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def bias_side(self) -> int:
        return self.window if self.window else max(self.grid)

    def check_grid(self, h: int, w: int) -> None:
        if self.window and (h % self.window or w % self.window):
            raise ContractError(f"window {self.window} does not divide grid {h}x{w}")
        if not self.window and self.bias_mode == "relative_2d" and max(h, w) > self.bias_side:
            raise ContractError(f"grid {h}x{w} exceeds the bias table built for side {self.bias_side}")


class TMSA(Module):
    def __init__(self, config: TmsaConfig, rng: Rng):
        c = config
        self._config = c
        self.qkv_spatial = lecun_normal((c.d, 3 * c.d), c.d, rng)
        self.qkv_spatial_bias = constant((3 * c.d,)) if c.qkv_bias else None
        self.qkv_time = lecun_normal((c.d_t, 3 * c.d), c.d_t, rng) if c.time_injection == "qkv" else None
        n_rel = (2 * c.bias_side - 1) ** 2 if c.bias_mode == "relative_2d" else 0
        self.rel_bias = constant((n_rel, c.heads)) if n_rel else None
        self.time_bias = (lecun_normal((c.d_t, n_rel * c.heads), c.d_t, rng)
                          if c.time_injection == "bias" else None)
        self.out = Linear(c.d, c.d, rng) if c.out_proj else None
        self._record = False
        self.last_attention: np.ndarray | None = None

    @property
    def config(self) -> TmsaConfig:
        return self._config

    def record_attention(self, on: bool = True) -> None:
        self._record = on
        if not on:
            self.last_attention = None

    def forward(self, x_s: Tensor, x_t: Tensor) -> Tensor:
        return tmsa_forward(x_s, x_t, self)


# ---------------------------------------------------------------------------
# functional pieces


def _check_inputs(x_s: Tensor, x_t: Tensor, m: TMSA) -> None:
    c = m.config
    if x_s.ndim != 4 or x_s.shape[-1] != c.d:
        raise ShapeError(f"tmsa: x_s {x_s.shape} does not match d={c.d}")
    if x_t.ndim != 2 or x_t.shape != (x_s.shape[0], c.d_t):
        raise ShapeError(f"tmsa: x_t {x_t.shape} does not match (batch={x_s.shape[0]}, d_t={c.d_t})")


def tmsa_qkv(x_s: Tensor, x_t: Tensor, m: TMSA) -> tuple[Tensor, Tensor, Tensor]:
    """Q, K, V of shape (b, H*W, d): spatial projection plus the broadcast
    temporal projection of the shared time token."""
    _check_inputs(x_s, x_t, m)
    b, h, w, d = x_s.shape
    qkv = _project(x_s, x_t, m)
    q, k, v = split(reshape(qkv, (b, h * w, 3 * d)), [d, d, d], axis=-1)
    return q, k, v


def _project(x_s: Tensor, x_t: Tensor, m: TMSA) -> Tensor:
    qkv = linear(x_s, m.qkv_spatial, m.qkv_spatial_bias)
    if m.qkv_time is not None and m.config.time_mode == "mixed":
        tq = linear(x_t, m.qkv_time)
        qkv = add(qkv, reshape(tq, (x_t.shape[0], 1, 1, tq.shape[-1])))
    return qkv


def _heads(x: Tensor, heads: int) -> Tensor:
    """(B, n, d) -> (B, heads, n, d_h)."""
    bsz, n, d = x.shape
    return transpose(reshape(x, (bsz, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    bsz, heads, n, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (bsz, n, heads * dh))


def attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int, bias: Tensor | None = None,
                   scale: float | None = None, out: Linear | None = None,
                   keep: list | None = None) -> Tensor:
    """softmax(q k^T * scale + bias) v per head; heads concatenated, then ``out``.

    q: (B, n_q, d); k, v: (B, n_k, d); bias broadcastable to (B, heads, n_q, n_k).
    ``scale`` defaults to 1/sqrt(d_h). If ``keep`` is a list the attention
    probabilities are appended to it.
    """
    if k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not conform")
    d = q.shape[-1]
    if d % heads:
        raise ContractError(f"attention: d={d} not divisible by heads={heads}")
    if scale is None:
        scale = 1.0 / np.sqrt(d // heads)
    qh, kh, vh = _heads(q, heads), _heads(k, heads), _heads(v, heads)
    logits = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), scale)
    if bias is not None:
        logits = add(logits, bias)
    attn = softmax_lastdim(logits)
    if keep is not None:
        keep.append(attn.data)
    y = _merge_heads(matmul(attn, vh))
    return out(y) if out is not None else y


def relative_bias(m: TMSA, h: int, w: int, x_t: Tensor | None = None) -> Tensor | None:
    """Bias for an ``h x w`` token patch: (heads, n, n), or (b, 1, heads, n, n)
    when the time token modulates the table."""
    c = m.config
    if m.rel_bias is None:
        return None
    n = h * w
    idx = relative_position_index(h, w, c.bias_side)
    table = m.rel_bias
    if m.time_bias is not None:
        b = x_t.shape[0]
        shift = reshape(linear(x_t, m.time_bias), (b, table.shape[0], c.heads))
        table = add(table, shift)  # (b, n_rel, heads)
        gathered = take(transpose(table, (1, 0, 2)), idx)  # (n, n, b, heads)
        return reshape(transpose(gathered, (2, 3, 0, 1)), (b, 1, c.heads, n, n))
    return transpose(take(table, idx), (2, 0, 1))


def tmsa_forward(x_s: Tensor, x_t: Tensor, m: TMSA) -> Tensor:
    """TMSA over a (b, H, W, d) grid, globally or per window; returns (b, H, W, d)."""
    _check_inputs(x_s, x_t, m)
    c = m.config
    b, h, w, d = x_s.shape
    c.check_grid(h, w)
    win_h, win_w = (c.window, c.window) if c.window else (h, w)
    nw = (h // win_h) * (w // win_w)
    n = win_h * win_w
    scale = 1.0 / np.sqrt(c.head_dim if c.scale == "head" else c.d)

    qkv = _project(x_s, x_t, m)
    tokens = window_partition(qkv, c.window) if c.window else reshape(qkv, (b, n, 3 * d))
    q, k, v = split(tokens, [d, d, d], axis=-1)
    bias = relative_bias(m, win_h, win_w, x_t)
    keep = [] if m._record else None

    if c.time_mode == "separate_token":
        t_qkv = linear(x_t, m.qkv_time)  # (b, 3d)
        _, tk, tv = split(t_qkv, [d, d, d], axis=-1)
        zeros = np.zeros((b, nw, 1, d), dtype=x_s.dtype)
        tk = reshape(add(reshape(tk, (b, 1, 1, d)), zeros), (b * nw, 1, d))
        tv = reshape(add(reshape(tv, (b, 1, 1, d)), zeros), (b * nw, 1, d))
        k = concat([k, tk], axis=1)
        v = concat([v, tv], axis=1)
        if bias is not None:
            bias = concat([bias, Tensor(np.zeros((c.heads, n, 1), dtype=x_s.dtype))], axis=-1)

    if bias is not None and bias.ndim == 5:
        # per-sample bias: attend in (b, nw) layout so the bias broadcasts over windows
        y = _attention_per_sample(q, k, v, c.heads, bias, scale, b, nw, keep)
    else:
        y = attention_core(q, k, v, c.heads, bias, scale, None, keep)
    if keep:
        m.last_attention = keep[0]
    y = window_merge(y, h, w, c.window) if c.window else reshape(y, (b, h, w, d))
    return m.out(y) if m.out is not None else y


def _attention_per_sample(q, k, v, heads, bias, scale, b, nw, keep):
    n, d = q.shape[1], q.shape[2]
    qh = reshape(_heads(q, heads), (b, nw, heads, n, d // heads))
    kh = reshape(_heads(k, heads), (b, nw, heads, k.shape[1], d // heads))
    vh = reshape(_heads(v, heads), (b, nw, heads, v.shape[1], d // heads))
    logits = add(mul(matmul(qh, transpose(kh, (0, 1, 2, 4, 3))), scale), bias)
    attn = softmax_lastdim(logits)
    if keep is not None:
        keep.append(attn.data.reshape(b * nw, heads, n, -1))
    y = reshape(matmul(attn, vh), (b * nw, heads, n, d // heads))
    return _merge_heads(y)


def center_token_map(m: TMSA, h: int, w: int, item: int = 0) -> np.ndarray:
    """H x W attention of the grid-centre query token (averaged over heads)
    from the last recorded forward. Zero outside the query's window.

    In ``separate_token`` mode the time token's share is dropped and the
    spatial part renormalised, so the map is still a distribution.
    """
    if m.last_attention is None:
        raise ContractError("no attention recorded; call record_attention() before the forward")
    c = m.config
    win = c.window or None
    cy, cx = h // 2, w // 2
    attn = m.last_attention.astype(np.float64).mean(axis=1)  # (B', n_q, n_k)
    out = np.zeros((h, w), dtype=np.float64)
    if win is None:
        row = attn[item, cy * w + cx, : h * w]
        out[:] = row.reshape(h, w) / row.sum()
    else:
        nwx = w // win
        widx = item * (h // win) * nwx + (cy // win) * nwx + (cx // win)
        row = attn[widx, (cy % win) * win + (cx % win), : win * win]
        y0, x0 = (cy // win) * win, (cx // win) * win
        out[y0:y0 + win, x0:x0 + win] = row.reshape(win, win) / row.sum()
    return out
