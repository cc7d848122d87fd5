"""Dense tensor with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient; outside a tape every op is a plain numpy call.
Layouts follow the rest of the package: images and token grids are
channel-last ``(b, H, W, C)``.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count(1)
_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


class NumericError(FloatingPointError):
    """An op produced NaN or Inf."""


class ContractError(ValueError):
    """A documented precondition was violated."""


# ---------------------------------------------------------------------------
# precision


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# multiply-accumulate counter (cross-check for analytic FLOP accounting)


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of matmul/linear/conv ops run in the block.

    Yields a one-element list whose entry holds the running total.
    """
    prev = getattr(_state, "macs", None)
    box = [0]
    _state.macs = box
    try:
        yield box
    finally:
        _state.macs = prev


def _add_macs(n: int) -> None:
    box = getattr(_state, "macs", None)
    if box is not None:
        box[0] += int(n)


# ---------------------------------------------------------------------------
# tape


@dataclass
class TapeEntry:
    kind: str
    inputs: tuple[Tensor, ...]
    output_id: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered op record. Use as a context manager to enable gradient tracking."""

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        return backward(loss, self)


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording (e.g. for EMA updates inside a training step)."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def backward(loss: Tensor, tape: Tape) -> dict[int, Tensor]:
    """Propagate d(loss)/d(node) through ``tape``.

    Returns the map node id -> gradient for every node reachable from ``loss``
    that requires a gradient. Leaf tensors also get ``.grad`` assigned.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.entries:
        raise ContractError("backward called with an empty tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    produced = {e.output_id for e in tape.entries}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = grads.get(entry.output_id)
        if g is None:
            continue
        in_grads = entry.backward(g)
        for inp, gi in zip(entry.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
            if inp.id not in produced:
                leaves[inp.id] = inp
    for tid, t in leaves.items():
        t.grad = grads[tid]
    return {k: Tensor(v) for k, v in grads.items()}


# ---------------------------------------------------------------------------
# op plumbing


def _finite(kind: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"{kind}: non-finite output")
    return arr


def _record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, bwd) -> Tensor:
    out = Tensor(_finite(kind, out_data))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append(TapeEntry(kind, tuple(inputs), out.id, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _broadcast_check(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("add", a, b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("sub", a, b)
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("mul", a, b)
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_check("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data  # non-finite results raise below
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: never overflows and avoids masked indexing
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def swish(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s
    return _record("swish", (x,), out, lambda g: (g * (s + out * (1.0 - s)),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    v2 = v * v
    inner = _GELU_C * v * (1.0 + 0.044715 * v2)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner),)

    return _record("gelu", (x,), out, bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _record("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}: {e}") from None
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _record("concat", tensors, out, lambda g: tuple(np.split(g, cuts, axis=axis)))


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    sizes = [int(s) for s in sizes]
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {sizes} do not sum to dim {x.shape[axis]} (axis {axis})")
    ax = axis % x.ndim
    outs = []
    start = 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + s)
        idx = tuple(idx)

        def bwd(g, idx=idx):
            full = np.zeros_like(x.data)
            full[idx] = g
            return (full,)

        outs.append(_record("split", (x,), x.data[idx], bwd))
        start += s
    return outs


def take(table: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``table[index]`` along axis 0 (embedding / bias-table lookup)."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"take: index out of range for table of {table.shape[0]} rows")

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (full,)

    return _record("take", (table,), table.data[index], bwd)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: expected (b,H,W,C), got {x.shape}")
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def bwd(g):
        b, h, w, c = x.shape
        return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _record("upsample_nearest2x", (x,), out, bwd)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", (x,), np.asarray(out), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _record("mean", (x,), np.asarray(out), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims do not broadcast, {a.shape} @ {b.shape}") from None
    _add_macs(out.size * a.shape[-1])

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", (a, b), out, bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored ``(d_in, d_out)``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input last dim {x.shape[-1]} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    x2 = x.data.reshape(-1, weight.shape[0])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))
    _add_macs(out.size * weight.shape[0])

    def bwd(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", inputs, out, bwd)


def _im2col3x3(xp: np.ndarray, h_out: int, w_out: int, stride: int) -> np.ndarray:
    b, _, _, c = xp.shape
    cols = np.empty((b, h_out, w_out, 9, c), dtype=xp.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky * 3 + kx, :] = xp[:, ky:ky + stride * h_out:stride, kx:kx + stride * w_out:stride, :]
    return cols


def conv2d_3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution, zero 'same' padding, stride 1 or 2.

    x: (b, H, W, C_in); weight: (3, 3, C_in, C_out). With stride 2 the output
    is (b, ceil(H/2), ceil(W/2), C_out).
    """
    if stride not in (1, 2):
        raise ContractError(f"conv2d_3x3: stride must be 1 or 2, got {stride}")
    if x.ndim != 4 or weight.shape[:2] != (3, 3) or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError(f"conv2d_3x3: input {x.shape} incompatible with weight {weight.shape}")
    b, h, w, cin = x.shape
    cout = weight.shape[3]
    h_out, w_out = (h + stride - 1) // stride, (w + stride - 1) // stride
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = _im2col3x3(xp, h_out, w_out, stride).reshape(-1, 9 * cin)
    wmat = weight.data.reshape(9 * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b, h_out, w_out, cout)
    _add_macs(out.size * 9 * cin)

    def bwd(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gcols = (g2 @ wmat.T).reshape(b, h_out, w_out, 9, cin)
        gxp = np.zeros_like(xp)
        for ky in range(3):
            for kx in range(3):
                gxp[:, ky:ky + stride * h_out:stride, kx:kx + stride * w_out:stride, :] += gcols[:, :, :, ky * 3 + kx, :]
        grads = [gxp[:, 1:-1, 1:-1, :], gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d_3x3", inputs, out, bwd)


# ---------------------------------------------------------------------------
# normalisation / softmax


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("softmax_lastdim", (x,), p, bwd)


def _affine_bwd(g, xhat, gamma, beta, reduce_axes):
    grads = []
    if gamma is not None:
        grads.append(_unbroadcast((g * xhat).sum(axis=reduce_axes), gamma.shape))
    if beta is not None:
        grads.append(_unbroadcast(g.sum(axis=reduce_axes), beta.shape))
    return grads


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last dim, then optional elementwise affine."""
    d = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: affine param {p.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    reduce_axes = tuple(range(x.ndim - 1))

    def bwd(g):
        gx_hat = g * gamma.data if gamma is not None else g
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return [gx] + _affine_bwd(g, xhat, gamma, beta, reduce_axes)

    inputs = [x] + [p for p in (gamma, beta) if p is not None]
    return _record("layer_norm", inputs, out, bwd)


def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """GroupNorm over channel-last (b, H, W, C): statistics per (sample, group)."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm: expected (b,H,W,C), got {x.shape}")
    b, h, w, c = x.shape
    if groups <= 0 or c % groups:
        raise ShapeError(f"group_norm: groups={groups} does not divide channels={c}")
    for p in (gamma, beta):
        if p is not None and p.shape != (c,):
            raise ShapeError(f"group_norm: affine param {p.shape} vs channels {c}")
    xg = x.data.reshape(b, h * w, groups, c // groups)
    mu = xg.mean(axis=(1, 3), keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=(1, 3), keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat_g = xc * rstd
    xhat = xhat_g.reshape(x.shape)
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    def bwd(g):
        gx_hat = g * gamma.data if gamma is not None else g
        gg = gx_hat.reshape(b, h * w, groups, c // groups)
        gx = rstd * (gg - gg.mean(axis=(1, 3), keepdims=True)
                     - xhat_g * (gg * xhat_g).mean(axis=(1, 3), keepdims=True))
        return [gx.reshape(x.shape)] + _affine_bwd(g, xhat, gamma, beta, (0, 1, 2))

    inputs = [x] + [p for p in (gamma, beta) if p is not None]
    return _record("group_norm", inputs, out, bwd)


# ---------------------------------------------------------------------------
# dispatch by kind name


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "linear": linear,
    "conv2d_3x3": conv2d_3x3,
    "softmax_lastdim": softmax_lastdim,
    "layer_norm": layer_norm,
    "group_norm": group_norm,
    "swish": swish,
    "gelu": gelu,
    "concat": concat,
    "split": split,
    "mean": mean,
}


def primitive_forward(kind: str, *inputs, **params):
    """Run a primitive by name, e.g. ``primitive_forward("group_norm", x, groups=4)``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive kind {kind!r}") from None
    return fn(*inputs, **params)
