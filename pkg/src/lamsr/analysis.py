"""Statistics over attribution maps: Gini concentration, the diffusion
index, visualization normalization, KDE heat maps, cross-model
consensus/difference areas, PSNR, and rank correlations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attribution import AttributionMap, gaussian_kernel
from .errors import DataError, DimensionError, NumericError, RangeError

__all__ = [
    "DiffusionStats",
    "HeatMap",
    "gini",
    "diffusion_index",
    "diffusion_stats",
    "normalize_for_viz",
    "kde_heatmap",
    "area_of_interest",
    "psnr",
    "correlate",
    "average_ranks",
]


@dataclass(frozen=True)
class DiffusionStats:
    gini: float
    di: float


@dataclass(frozen=True)
class HeatMap:
    """A KDE grid over pixel coordinates plus its plotting extent."""

    grid: np.ndarray
    bandwidth: float
    extent: tuple[int, int, int, int]


def _magnitudes(values) -> np.ndarray:
    if isinstance(values, AttributionMap):
        values = values.reduced
    return np.abs(np.asarray(values, dtype=np.float64))


def gini(values) -> float:
    """Gini coefficient of the absolute, channel-summed attribution map.

    Computed via the sorted form, equivalent to the mean absolute
    difference between all entry pairs divided by twice the mean. The
    all-zero map is defined to have coefficient 0.
    """
    g = _magnitudes(values).ravel()
    n = g.size
    if n == 0:
        raise DataError("gini needs a non-empty map")
    total = g.sum()
    if total == 0.0:
        return 0.0
    ordered = np.sort(g)
    ranks = np.arange(1, n + 1, dtype=np.float64)
    return float(2.0 * np.sum(ranks * ordered) / (n * total) - (n + 1) / n)


def diffusion_index(g: float) -> float:
    """DI = (1 - gini) * 100: higher means attribution spread over more pixels."""
    if not 0.0 <= g <= 1.0:
        raise RangeError(f"gini coefficient must lie in [0, 1], got {g}")
    return (1.0 - g) * 100.0


def diffusion_stats(values) -> DiffusionStats:
    g = gini(values)
    return DiffusionStats(gini=g, di=diffusion_index(g))


def normalize_for_viz(values) -> np.ndarray:
    """Map magnitudes scaled into [0, 1] by the peak absolute entry."""
    if isinstance(values, AttributionMap):
        values = values.reduced
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"normalize_for_viz expects a 2-D map, got shape {arr.shape}")
    peak = np.abs(arr).max()
    if peak == 0.0:
        return np.zeros_like(arr)
    return np.abs(arr / peak)


def kde_heatmap(maps, bandwidth: float = 2.0) -> HeatMap:
    """Gaussian KDE of attribution mass, evaluated on the pixel grid.

    Every pixel contributes its magnitude as a point mass; boundary mass
    is reflected back so the grid total stays close to the input total.
    ``maps`` may be one 2-D map or a sequence of same-shape maps, whose
    masses pool.
    """
    if not math.isfinite(bandwidth) or bandwidth <= 0:
        raise RangeError(f"bandwidth must be positive, got {bandwidth}")
    arrays = [maps] if isinstance(maps, (np.ndarray, AttributionMap)) else list(maps)
    if not arrays:
        raise DataError("kde_heatmap needs at least one map")
    mass = _magnitudes(arrays[0])
    if mass.ndim != 2:
        raise DimensionError(f"kde_heatmap expects 2-D maps, got shape {mass.shape}")
    for extra in arrays[1:]:
        more = _magnitudes(extra)
        if more.shape != mass.shape:
            raise DimensionError(f"map shapes differ: {mass.shape} vs {more.shape}")
        mass = mass + more

    radius = max(1, int(math.ceil(4.0 * bandwidth)))
    kernel = gaussian_kernel(bandwidth, radius)
    grid = mass
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(grid, pad, mode="reflect")
        acc = np.zeros_like(grid)
        for tap, weight in enumerate(kernel):
            sliced = [slice(None)] * 2
            sliced[axis] = slice(tap, tap + grid.shape[axis])
            acc += weight * padded[tuple(sliced)]
        grid = acc
    h, w = grid.shape
    return HeatMap(grid=grid, bandwidth=float(bandwidth), extent=(0, h - 1, 0, w - 1))


def area_of_interest(maps: Sequence[np.ndarray], threshold: float = 0.1
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Consensus and difference masks across models' normalized maps.

    Consensus marks pixels above ``threshold`` in at least 80% of the
    maps. Difference marks pixels used by the top half of models ranked
    by diffusion index but by none of the bottom half; with fewer than
    two maps it is empty.
    """
    arrays = [np.asarray(m, dtype=np.float64) for m in maps]
    if not arrays:
        raise DataError("area_of_interest needs at least one map")
    shape = arrays[0].shape
    for arr in arrays:
        if arr.shape != shape:
            raise DimensionError(f"map shapes differ: {shape} vs {arr.shape}")
    above = np.stack([arr > threshold for arr in arrays])
    n = len(arrays)
    consensus = (above.sum(axis=0) / n >= 0.8 - 1e-9).astype(np.float32)

    half = n // 2
    if half == 0:
        return consensus, np.zeros(shape, dtype=np.float32)
    dis = np.array([diffusion_stats(arr).di for arr in arrays])
    order = np.argsort(-dis, kind="stable")
    high = above[order[:half]].any(axis=0)
    low = above[order[n - half:]].any(axis=0)
    return consensus, (high & ~low).astype(np.float32)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images scaled to [0, 1].

    Identical inputs return ``inf``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with tied values sharing their average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def correlate(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(Pearson, Spearman) correlation; Spearman uses average ranks for ties."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise DimensionError(f"correlate lengths differ: {x.size} vs {y.size}")
    if x.size < 3:
        raise DataError(f"correlate needs at least 3 points, got {x.size}")
    return _pearson(x, y), _pearson(average_ranks(x), average_ranks(y))


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sx = math.sqrt(np.sum(xc * xc))
    sy = math.sqrt(np.sum(yc * yc))
    if sx == 0.0 or sy == 0.0:
        raise NumericError("correlation undefined: an input has zero variance")
    return float(np.sum(xc * yc) / (sx * sy))
