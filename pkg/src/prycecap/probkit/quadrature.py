"""Integration kernels shared across the package."""
from __future__ import annotations

import functools
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .distributions import ParetoWeight

METHODS = ("auto", "quadrature", "monte-carlo")


class FallbackToMonteCarlo(UserWarning):
    """Quadrature was requested for a model that only supports sampling."""


@dataclass(frozen=True)
class Integrator:
    """Integration settings.

    ``nodes`` is the per-axis count for tensor quadrature, ``draws`` and
    ``seed`` configure Monte Carlo, ``order`` is the Gauss-Legendre order used
    on smooth pieces when no exact order is known, and ``tolerance`` is the
    stopping width for root bracketing.
    """

    method: str = "auto"
    nodes: int = 4096
    draws: int = 100_000
    seed: int = 0
    order: int = 24
    tolerance: float = 1e-12

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.nodes < 1 or self.draws < 2 or self.order < 1:
            raise ValueError("nodes, draws and order must be positive")


@functools.lru_cache(maxsize=64)
def gauss_legendre(order: int) -> tuple[np.ndarray, np.ndarray]:
    z, w = np.polynomial.legendre.leggauss(order)
    z.setflags(write=False)
    w.setflags(write=False)
    return z, w


def exact_order(degree: int | None, fallback: int) -> int:
    """Gauss order that integrates polynomials of ``degree`` exactly."""
    if degree is None:
        return fallback
    return max(1, degree // 2 + 1)


def integrate_pieces(func: Callable[[np.ndarray], np.ndarray], breaks: np.ndarray,
                     order: int) -> np.ndarray:
    """Row-wise Gauss-Legendre integral over consecutive intervals.

    ``breaks`` has shape (M, P) and is sorted along each row; ``func``
    receives nodes of shape (M, P - 1, order).
    """
    z, w = gauss_legendre(order)
    lo = breaks[:, :-1, None]
    half = (breaks[:, 1:, None] - lo) / 2.0
    nodes = lo + half * (z + 1.0)
    vals = func(nodes)
    return np.sum(vals * half * w, axis=(1, 2))


def midpoints(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def spawn_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(count)


def parallel_map(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """Ordered map; results never depend on ``threads``."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def chunks(n: int, size: int) -> Iterable[slice]:
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def stieltjes_weights(grid, weight: ParetoWeight, tol: float = 1e-12) -> np.ndarray:
    """Coefficients ``c`` with ``stieltjes(grid, values, weight) == c @ values``."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be a strictly increasing 1-D array")
    jumps = weight.jump_points
    inside = jumps[(jumps >= grid[0] - tol) & (jumps <= grid[-1] + tol)]
    for j in inside:
        if np.min(np.abs(grid - j)) > tol:
            raise ValueError(f"grid is missing the weight jump at theta={j!r}")
    right = weight(grid)
    left = weight.left(grid)
    coef = right - left
    cont = 0.5 * (left[1:] - right[:-1])
    coef[:-1] += cont
    coef[1:] += cont
    return coef


def stieltjes(grid, values, weight: ParetoWeight, tol: float = 1e-12) -> float:
    """Integral of a tabulated curve against a Pareto weight.

    Jumps contribute ``value * jump``; between grid points the continuous
    part of the weight is integrated by the trapezoid rule. Every jump of
    the weight inside the grid range must be a grid point.
    """
    values = np.asarray(values, dtype=float)
    if np.shape(grid) != values.shape:
        raise ValueError("grid and values must have matching shapes")
    return float(stieltjes_weights(grid, weight, tol) @ values)


def warn_fallback(reason: str) -> None:
    warnings.warn(f"fallback to monte-carlo: {reason}", FallbackToMonteCarlo, stacklevel=3)
