"""Binary PGM/PPM writers (maxval 255, row-major) and sample grids."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..tensor.core import ContractError


def to_uint8(x, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.clip(np.round((x - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> Path:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ContractError(f"PGM needs a 2-D uint8 array, got {img.shape} {img.dtype}")
    path = Path(path)
    path.write_bytes(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes())
    return path


def write_ppm(path, img: np.ndarray) -> Path:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ContractError(f"PPM needs an (H, W, 3) uint8 array, got {img.shape} {img.dtype}")
    path = Path(path)
    path.write_bytes(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    """Read back a file written by :func:`write_pgm` / :func:`write_ppm`."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    magic, dims, maxval, body = parts
    w, h = (int(v) for v in dims.split())
    if magic not in (b"P5", b"P6") or int(maxval) != 255:
        raise ContractError(f"{path}: unsupported PNM header")
    chans = 1 if magic == b"P5" else 3
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w) if chans == 1 else arr.reshape(h, w, 3)


def tile(images: np.ndarray, pad: int = 1) -> np.ndarray:
    """(n, H, W[, C]) -> one grid image with ceil(sqrt(n)) columns."""
    images = np.asarray(images)
    n, h, w = images.shape[:3]
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad) + images.shape[3:], dtype=images.dtype)
    for i in range(n):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y:y + h, x:x + w] = images[i]
    return grid


def write_image(path_stem, img: np.ndarray) -> list[Path]:
    """Write an (H, W, C) uint8 image: PGM for C=1, PPM for C=3, and one PGM
    per channel otherwise. Returns the written paths."""
    stem = Path(path_stem)
    if img.ndim == 2:
        img = img[..., None]
    c = img.shape[-1]
    if c == 1:
        return [write_pgm(stem.with_suffix(".pgm"), img[..., 0])]
    if c == 3:
        return [write_ppm(stem.with_suffix(".ppm"), img)]
    return [write_pgm(stem.parent / f"{stem.name}_c{k}.pgm", img[..., k]) for k in range(c)]


def save_samples(out_dir, samples: np.ndarray, prefix: str = "sample") -> list[Path]:
    """Per-sample files plus a ``grid`` image for a batch (n, H, W, C) in [-1, 1]."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    u8 = to_uint8(samples)
    paths = []
    for i in range(u8.shape[0]):
        paths += write_image(out / f"{prefix}_{i:04d}", u8[i])
    paths += write_image(out / "grid", tile(u8))
    return paths
