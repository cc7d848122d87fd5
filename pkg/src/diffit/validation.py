"""Input checks for the estimator layer."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .tensor.core import ContractError


def check_images(X, allow_flat_side: int | None = None) -> np.ndarray:
    """Coerce ``X`` to a finite float64 array of shape (n, H, W, C).

    Accepts (n, H, W) (adds C=1) and flattened (n, side*side) rows; the side
    is inferred unless ``allow_flat_side`` pins it. Requires square images
    and n >= 2.
    """
    arr = np.asarray(X)
    if arr.ndim == 2:
        s = allow_flat_side or int(round(np.sqrt(arr.shape[1])))
        if arr.shape[1] != s * s:
            raise ContractError(f"flat input has {arr.shape[1]} features, expected {s * s}")
        arr = arr.reshape(arr.shape[0], s, s)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ContractError(f"expected images of shape (n, H, W[, C]), got {arr.shape}")
    if arr.shape[0] < 2:
        raise ContractError(f"need at least 2 images, got {arr.shape[0]}")
    flat = check_array(arr.reshape(arr.shape[0], -1), dtype=np.float64, ensure_min_samples=2)
    arr = flat.reshape(arr.shape)
    if arr.shape[1] != arr.shape[2]:
        raise ContractError(f"images must be square, got {arr.shape[1]}x{arr.shape[2]}")
    return arr


def check_labels(y, n: int, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ContractError(f"labels must have shape ({n},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ContractError("labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0 or (num_classes is not None and y.max() >= num_classes):
        raise ContractError("labels out of range")
    return y.astype(np.int64)


def check_positive_int(value, name: str) -> int:
    if isinstance(value, (bool, np.bool_)) or int(value) != value or value < 1:
        raise ContractError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
