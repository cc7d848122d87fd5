"""Sample-quality surrogates: moment errors and the energy distance."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..tensor.core import ContractError


@dataclass(frozen=True)
class MetricReport:
    mean_error: float  # mean over pixels of |mean_x - mean_y|
    var_error: float  # mean over pixels of |var_x - var_y|
    energy: float  # energy distance on flattened images (Euclidean norm)
    n_samples: int
    n_reference: int

    def as_dict(self) -> dict:
        return asdict(self)


def _flat(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] == 0:
        raise ContractError(f"{name}: empty input")
    return x.reshape(x.shape[0], -1)


def _mean_pairwise(a: np.ndarray, b: np.ndarray, block: int = 512) -> float:
    """Mean Euclidean distance over all pairs (a_i, b_j), blockwise."""
    bb = np.einsum("ij,ij->i", b, b)
    total = 0.0
    for s in range(0, a.shape[0], block):
        ab = a[s:s + block]
        d2 = np.einsum("ij,ij->i", ab, ab)[:, None] + bb[None, :] - 2.0 * ab @ b.T
        total += np.sqrt(np.maximum(d2, 0.0)).sum()
    return total / (a.shape[0] * b.shape[0])


def energy_distance(x, y) -> float:
    """``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` with V-statistics, so identical
    sample sets give exactly 0. For point masses at a and b this is
    ``2 |a - b|``."""
    x, y = _flat(x, "samples"), _flat(y, "reference")
    if x.shape[1] != y.shape[1]:
        raise ContractError(f"energy_distance: dimension mismatch {x.shape[1]} vs {y.shape[1]}")
    e = 2.0 * _mean_pairwise(x, y) - _mean_pairwise(x, x) - _mean_pairwise(y, y)
    return max(float(e), 0.0)


def metrics(samples, reference) -> MetricReport:
    x, y = _flat(samples, "samples"), _flat(reference, "reference")
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise ContractError("metrics need at least 2 samples on each side")
    if x.shape[1] != y.shape[1]:
        raise ContractError(f"metrics: dimension mismatch {x.shape[1]} vs {y.shape[1]}")
    return MetricReport(
        mean_error=float(np.abs(x.mean(0) - y.mean(0)).mean()),
        var_error=float(np.abs(x.var(0) - y.var(0)).mean()),
        energy=energy_distance(x, y),
        n_samples=x.shape[0],
        n_reference=y.shape[0],
    )
