"""Procedural toy image datasets. Every pixel is a pure function of
``(kind, seed, count, resolution, channels)``; values lie in [-1, 1]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..tensor import Rng
from ..tensor.core import ContractError

KINDS = ("dirac", "gaussian_blobs", "checkerboard16", "rasterized_two_moons", "shapes16")

# gaussian_blobs: K fixed templates, amplitude a ~ U(A_LO, A_HI)
BLOB_TEMPLATES = 4
A_LO, A_HI = 0.5, 1.0


@dataclass
class ToyDataset:
    kind: str
    seed: int
    data: np.ndarray  # (count, H, W, C) float64
    labels: np.ndarray  # (count,) int64
    num_classes: int
    expected_mean: np.ndarray | None = None  # population mean when known in closed form

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:]

    def stats(self) -> dict:
        """Empirical per-pixel mean and covariance diagonal."""
        return {"mean": self.data.mean(axis=0), "var": self.data.var(axis=0)}


def _grid(res: int):
    c = (np.arange(res) + 0.5) / res
    return np.meshgrid(c, c, indexing="ij")


def _blob_templates(res: int, rng: Rng) -> np.ndarray:
    yy, xx = _grid(res)
    centres = 0.25 + 0.5 * rng.uniform((BLOB_TEMPLATES, 2))
    width = 0.12
    return np.stack([np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2)) for cy, cx in centres])


def _dirac(res, count, rng):
    yy, xx = _grid(res)
    phase = 2 * np.pi * rng.uniform(2)
    x0 = 0.8 * np.sin(2 * np.pi * yy + phase[0]) * np.cos(2 * np.pi * xx + phase[1])
    return np.broadcast_to(x0, (count, res, res)).copy(), np.zeros(count, np.int64), 0, x0


def _gaussian_blobs(res, count, rng):
    tpl = _blob_templates(res, rng)
    k = rng.integers(BLOB_TEMPLATES, count)
    a = A_LO + (A_HI - A_LO) * rng.uniform(count)
    imgs = -1.0 + 2.0 * a[:, None, None] * tpl[k]
    mean = -1.0 + (A_LO + A_HI) * tpl.mean(axis=0)
    return imgs, k.astype(np.int64), BLOB_TEMPLATES, mean


def _checkerboard(res, count, rng):
    shift = rng.integers(4, (count, 2))
    flip = rng.integers(2, count)
    iy = np.arange(res)
    imgs = np.empty((count, res, res))
    for n in range(count):
        ty = (iy + shift[n, 0]) // 4
        tx = (iy + shift[n, 1]) // 4
        parity = (ty[:, None] + tx[None, :] + flip[n]) % 2
        imgs[n] = 2.0 * parity - 1.0
    return imgs, flip.astype(np.int64), 2, None


def _two_moons(res, count, rng):
    which = rng.integers(2, count)
    ang = np.pi * rng.uniform(count)
    px = np.where(which == 0, np.cos(ang), 1.0 - np.cos(ang))
    py = np.where(which == 0, np.sin(ang), 0.5 - np.sin(ang))
    px = px + 0.05 * rng.normal(count)
    py = py + 0.05 * rng.normal(count)
    # moons span x in [-1, 2], y in [-0.5, 1]; map into the unit square with a margin
    u = 0.1 + 0.8 * (px + 1.0) / 3.0
    v = 0.1 + 0.8 * (1.0 - (py + 0.5) / 1.5) * 0.5 + 0.2
    yy, xx = _grid(res)
    w = 1.0 / res
    blob = np.exp(-((yy[None] - v[:, None, None]) ** 2 + (xx[None] - u[:, None, None]) ** 2) / (2 * w**2))
    return -1.0 + 2.0 * blob, which.astype(np.int64), 2, None


def _shapes(res, count, rng):
    kind = rng.integers(3, count)
    size = 0.15 + 0.15 * rng.uniform(count)
    cy = 0.3 + 0.4 * rng.uniform(count)
    cx = 0.3 + 0.4 * rng.uniform(count)
    yy, xx = _grid(res)
    imgs = np.empty((count, res, res))
    for n in range(count):
        dy, dx = np.abs(yy - cy[n]), np.abs(xx - cx[n])
        if kind[n] == 0:
            mask = (dy <= size[n]) & (dx <= size[n])
        elif kind[n] == 1:
            mask = dy**2 + dx**2 <= size[n] ** 2
        else:
            arm = size[n] / 3
            mask = ((dy <= arm) & (dx <= size[n])) | ((dx <= arm) & (dy <= size[n]))
        imgs[n] = np.where(mask, 1.0, -1.0)
    return imgs, kind.astype(np.int64), 3, None


_MAKERS = {
    "dirac": _dirac,
    "gaussian_blobs": _gaussian_blobs,
    "checkerboard16": _checkerboard,
    "rasterized_two_moons": _two_moons,
    "shapes16": _shapes,
}


def make_dataset(kind: str, count: int, seed: int = 0, resolution: int = 16, channels: int = 1) -> ToyDataset:
    """Build a toy dataset; channels > 1 replicate the grayscale image."""
    if kind not in _MAKERS:
        raise ContractError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if count < 1 or resolution < 4 or channels < 1:
        raise ContractError("dataset needs count >= 1, resolution >= 4, channels >= 1")
    rng = Rng(seed)
    imgs, labels, k, mean = _MAKERS[kind](resolution, count, rng)
    data = np.clip(np.repeat(imgs[..., None], channels, axis=-1), -1.0, 1.0)
    if mean is not None:
        mean = np.repeat(mean[..., None], channels, axis=-1)
    return ToyDataset(kind, seed, data, labels, k, mean)
