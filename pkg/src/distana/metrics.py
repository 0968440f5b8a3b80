"""Evaluation metrics: MSE, latitude-weighted RMSE, SNR, rank correlation.

The latitude weighting serves gridded geospatial data where rows cover
equal latitude bands but shrinking surface area toward the poles:

    rmse = sqrt( (1/(#lat #lon)) sum_ij L(i) (pred_ij - target_ij)^2 )
    L(i) = cos(lat(i)) / mean_i cos(lat(i))

Row latitudes sit at cell centers, lat(i) = -pi/2 + (i+0.5) pi / #lat,
so no row lands on a pole and every weight is positive.  The weights
average to 1 exactly, which makes a spatially uniform error of size k
come out as exactly k.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LatGrid",
    "RankCorrelation",
    "mse",
    "lat_weighted_rmse",
    "spearman",
    "measure_snr",
]


@dataclass(frozen=True)
class LatGrid:
    """Row/column extents of a latitude-longitude grid."""

    n_lat: int
    n_lon: int

    def __post_init__(self):
        if self.n_lat < 1 or self.n_lon < 1:
            raise ValueError("grid extents must be >= 1")

    def latitudes(self) -> np.ndarray:
        """Row-center latitudes in radians, strictly inside (-pi/2, pi/2)."""
        i = np.arange(self.n_lat, dtype=np.float64)
        return -math.pi / 2.0 + (i + 0.5) * math.pi / self.n_lat

    def weights(self) -> np.ndarray:
        """L(i) = cos(lat(i)) normalized so the row mean is exactly 1."""
        cos = np.cos(self.latitudes())
        return cos / np.mean(cos)


@dataclass(frozen=True)
class RankCorrelation:
    """Spearman rho, or undefined when an input is constant."""

    rho: float | None

    @property
    def defined(self) -> bool:
        return self.rho is not None


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def lat_weighted_rmse(pred: np.ndarray, target: np.ndarray, grid: LatGrid) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != (grid.n_lat, grid.n_lon) or target.shape != pred.shape:
        raise ValueError(
            f"shapes {pred.shape}/{target.shape} do not match "
            f"{grid.n_lat}x{grid.n_lon} grid"
        )
    sq = (pred - target) ** 2
    weighted = grid.weights()[:, None] * sq
    return float(np.sqrt(np.mean(weighted)))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties replaced by the mean rank of the tie group."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(a: np.ndarray, b: np.ndarray) -> RankCorrelation:
    """Rank correlation with average-rank tie handling.

    Computed as the Pearson correlation of the rank vectors, which stays
    correct in the presence of ties.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise ValueError("need at least 2 values")
    ra, rb = _average_ranks(a), _average_ranks(b)
    da, db = ra - ra.mean(), rb - rb.mean()
    denom = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    if denom == 0.0:
        return RankCorrelation(None)
    return RankCorrelation(float(np.sum(da * db)) / denom)


def measure_snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    """power(clean) / power(noisy - clean); infinity when noise-free."""
    clean = np.asarray(clean, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    if clean.shape != noisy.shape:
        raise ValueError(f"shape mismatch: {clean.shape} vs {noisy.shape}")
    noise_power = float(np.mean((noisy - clean) ** 2))
    signal_power = float(np.mean(clean**2))
    if noise_power == 0.0:
        return math.inf
    return signal_power / noise_power
