"""Central finite-difference oracle for the tape's analytic gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .core import ContractError, NumericError, Tape, Tensor
from .rng import Rng


def _scalar(f, *args) -> float:
    out = f(*args)
    val = float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)
    if not np.isfinite(val):
        raise NumericError("finite_diff_check: non-finite objective")
    return val


def _analytic(f: Callable[[], Tensor], tensors: list[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise ContractError(f"finite_diff_check: objective must be scalar, got {loss.shape}")
    if tape.entries:
        grads = tape.backward(loss)
        return [grads[t.id].data if t.id in grads else np.zeros_like(t.data) for t in tensors]
    return [np.zeros_like(t.data) for t in tensors]


def _rel_err(g_analytic: float, g_fd: float) -> float:
    return abs(g_analytic - g_fd) / max(1.0, abs(g_fd))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                      coords: Iterable[int] | None = None) -> float:
    """Max over coordinates of |g_analytic - g_fd| / max(1, |g_fd|).

    ``f`` maps ``x`` to a scalar Tensor. ``coords`` restricts the check to a
    subset of flat indices (default: every coordinate). Use float64 inputs.
    """
    if x.dtype != np.float64:
        raise ContractError("finite_diff_check requires float64 tensors")
    _scalar(f, x)
    (g,) = _analytic(lambda: f(x), [x])
    return _fd_against(lambda: _scalar(f, x), x, g, eps, coords)


def _fd_against(objective, x: Tensor, g: np.ndarray, eps: float, coords) -> float:
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = objective()
        flat[i] = orig - eps
        fm = objective()
        flat[i] = orig
        worst = max(worst, _rel_err(float(gflat[i]), (fp - fm) / (2 * eps)))
    return worst


def check_gradients(f: Callable[[], Tensor], tensors: dict[str, Tensor], eps: float = 1e-5,
                    max_coords: int | None = 16, directions: int = 2,
                    rng: Rng | None = None) -> dict[str, float]:
    """Check d f / d t for several tensors at once.

    Per tensor: up to ``max_coords`` randomly chosen coordinates (all if None).
    Additionally ``directions`` random joint directions over every tensor
    compare the directional derivative <g, v> to a central difference,
    reported under the key ``"<directional>"``.
    """
    rng = rng or Rng(0)
    items = list(tensors.items())
    for _, t in items:
        if t.dtype != np.float64:
            raise ContractError("check_gradients requires float64 tensors")
    grads = _analytic(f, [t for _, t in items])
    obj = lambda: _scalar(f)  # noqa: E731
    report: dict[str, float] = {}
    for (name, t), g in zip(items, grads):
        n = t.size
        if max_coords is None or n <= max_coords:
            coords = range(n)
        else:
            coords = rng.permutation(n)[:max_coords].tolist()
        report[name] = _fd_against(obj, t, g, eps, coords)
    worst = 0.0
    for _ in range(directions):
        vs = [rng.normal(t.shape) for _, t in items]
        norm = np.sqrt(sum(float((v * v).sum()) for v in vs)) or 1.0
        vs = [v / norm for v in vs]
        analytic = sum(float((g * v).sum()) for g, v in zip(grads, vs))
        saved = [t.data.copy() for _, t in items]
        for (_, t), v in zip(items, vs):
            t.data += eps * v
        fp = obj()
        for (_, t), v, s in zip(items, vs, saved):
            t.data[...] = s - eps * v
        fm = obj()
        for (_, t), s in zip(items, saved):
            t.data[...] = s
        worst = max(worst, _rel_err(analytic, (fp - fm) / (2 * eps)))
    if directions:
        report["<directional>"] = worst
    return report
