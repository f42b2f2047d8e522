"""Ironed virtual costs.

The virtual cost of a firm is the slope, in quantile coordinates, of the
lower convex envelope of the cumulative of ``theta * g + (G - weight)``.
Everything is tabulated on a grid that is uniform in the quantile and
refined at the jumps of the Pareto weight.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from .probkit import ParetoWeight, TypeDistribution

DEFAULT_GRID = 10_000
MIN_GRID = 16
EVEN_SHARE = 4          # one evenly spaced node per this many quantile nodes
NODE_MERGE = 1e-9       # relative distance below which nodes are merged


@dataclass(frozen=True)
class CumulativeMeasure:
    grid: np.ndarray
    quantiles: np.ndarray
    values: np.ndarray

    def at(self, theta):
        return np.interp(theta, self.grid, self.values)


def type_nodes(dist: TypeDistribution, size: int) -> np.ndarray:
    """Quantile-spaced nodes refined by evenly spaced ones.

    The even part keeps cells narrow where the density is thin, so a
    vanishing density at an endpoint cannot leave one cell spanning a large
    share of the support.
    """
    grid = dist.quantile(np.linspace(0.0, 1.0, size + 1))
    grid[0], grid[-1] = dist.lower, dist.upper
    even = np.linspace(dist.lower, dist.upper, size // EVEN_SHARE + 1)
    gaps = np.abs(grid[np.clip(np.searchsorted(grid, even), 0, len(grid) - 1)] - even)
    below = np.abs(grid[np.clip(np.searchsorted(grid, even) - 1, 0, len(grid) - 1)] - even)
    keep = np.minimum(gaps, below) > NODE_MERGE * (dist.upper - dist.lower)
    return np.unique(np.concatenate([grid, even[keep]]))


def _type_grid(dist: TypeDistribution, weight: ParetoWeight, size: int,
               extra=None) -> np.ndarray:
    grid = type_nodes(dist, size)
    pts = [weight.jump_points]
    if extra is not None:
        pts.append(np.atleast_1d(np.asarray(extra, dtype=float)))
    add = np.concatenate(pts) if pts else np.empty(0)
    add = add[(add > dist.lower) & (add < dist.upper)]
    if len(add):
        grid = np.unique(np.concatenate([grid, add]))
    return grid


def cumulative(dist: TypeDistribution, weight: ParetoWeight, size: int = DEFAULT_GRID,
               extra=None) -> CumulativeMeasure:
    """Cumulative of the signed measure ``theta dG + (G - weight) dtheta``."""
    weight.validate(dist)
    grid = _type_grid(dist, weight, size, extra)
    u = dist.cdf(grid)
    u[0], u[-1] = 0.0, 1.0
    dt = np.diff(grid)
    first = np.diff(u) * (grid[:-1] + grid[1:]) / 2.0
    gap_right = u[:-1] - weight(grid[:-1])
    gap_left = u[1:] - weight.left(grid[1:])
    second = dt * (gap_right + gap_left) / 2.0
    values = np.concatenate([[0.0], np.cumsum(first + second)])
    return CumulativeMeasure(grid, u, values)


def lower_convex_envelope(x, y) -> np.ndarray:
    """Indices of the lower hull of points sorted by ``x`` (monotone chain)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    hull: list[int] = []
    for k in range(len(x)):
        while len(hull) >= 2:
            i, j = hull[-2], hull[-1]
            cross = (x[j] - x[i]) * (y[k] - y[i]) - (y[j] - y[i]) * (x[k] - x[i])
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(k)
    return np.asarray(hull, dtype=int)


@dataclass(frozen=True)
class VirtualCost:
    """Nondecreasing virtual cost, piecewise linear in the own quantile."""

    thetas: np.ndarray
    quantiles: np.ndarray
    values: np.ndarray
    envelope: np.ndarray
    hull: np.ndarray
    dist: TypeDistribution
    weight: ParetoWeight

    def __call__(self, theta):
        return np.interp(self.dist.cdf(theta), self.quantiles, self.values)

    def inverse(self, s):
        return pseudo_inverse(self, s)

    def envelope_at(self, q):
        return np.interp(q, self.quantiles, self.envelope)

    @property
    def lower(self) -> float:
        return float(self.values[0])

    @property
    def upper(self) -> float:
        return float(self.values[-1])

    def flat_segments(self) -> list[tuple[float, float, float]]:
        """Ironed intervals ``(theta_start, theta_end, value)``."""
        out = []
        for a, b in zip(self.hull[:-1], self.hull[1:]):
            if b - a >= 2:
                slope = (self.envelope[b] - self.envelope[a]) / (self.quantiles[b] - self.quantiles[a])
                out.append((float(self.thetas[a]), float(self.thetas[b]), float(slope)))
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "quantiles": self.quantiles.tolist(),
            "values": self.values.tolist(),
            "thetas": self.thetas.tolist(),
            "flat_segments": [list(seg) for seg in self.flat_segments()],
        }


def iron(dist: TypeDistribution, weight: ParetoWeight, size: int = DEFAULT_GRID) -> VirtualCost:
    """Ironed virtual cost on a quantile grid of ``size`` intervals."""
    if size < MIN_GRID:
        raise ValueError(f"grid size must be at least {MIN_GRID}, got {size}")
    cm = cumulative(dist, weight, size)
    q, h = cm.quantiles, cm.values
    hull = lower_convex_envelope(q, h)
    env = np.interp(q, q[hull], h[hull])
    # slope of the hull segment covering each grid interval
    seg = np.searchsorted(q[hull], q[:-1], side="right") - 1
    seg_slope = np.diff(h[hull]) / np.diff(q[hull])
    slopes = seg_slope[seg]
    values = np.empty(len(q))
    values[1:-1] = 0.5 * (slopes[:-1] + slopes[1:])
    if len(slopes) >= 2:
        values[0] = slopes[0] - 0.5 * (slopes[1] - slopes[0])
        values[-1] = slopes[-1] + 0.5 * (slopes[-1] - slopes[-2])
    else:
        values[0] = values[-1] = slopes[0]
    values[0] = max(values[0], dist.lower, 0.0)
    values[0] = min(values[0], values[1])
    values = np.maximum.accumulate(values)
    return VirtualCost(cm.grid, q, values, env, hull, dist, weight)


FLAT_SNAP = 1e-7


def pseudo_inverse(vc: VirtualCost, s):
    """Smallest type whose virtual cost reaches ``s``, clamped to the support.

    A query within ``FLAT_SNAP`` of an ironed value is treated as that value,
    so it resolves to the left end of the flat despite discretization error.
    """
    s = np.asarray(s, dtype=float)
    vals = vc.values
    j = np.clip(np.searchsorted(vals, s - FLAT_SNAP, side="left"), 0, len(vals) - 2)
    snap = (vals[j] == vals[j + 1]) & (np.abs(vals[j] - s) <= FLAT_SNAP)
    s = np.where(snap, vals[j], s)
    k = np.clip(np.searchsorted(vals, s, side="left"), 1, len(vals) - 1)
    v0, v1 = vals[k - 1], vals[k]
    span = v1 - v0
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(span > 0, (s - v0) / span, 1.0)
    q = vc.quantiles[k - 1] + np.clip(frac, 0.0, 1.0) * (vc.quantiles[k] - vc.quantiles[k - 1])
    theta = vc.dist.quantile(q)
    on_node = frac >= 1.0
    theta = np.where(on_node, vc.thetas[k], theta)
    theta = np.where(s <= vals[0], vc.thetas[0], theta)
    theta = np.where(s > vals[-1], vc.thetas[-1], theta)
    return theta if theta.ndim else float(theta)


@dataclass(frozen=True)
class StepFunction:
    """Left-continuous step function: ``levels[j]`` on ``(cuts[j-1], cuts[j]]``."""

    cuts: tuple[float, ...]
    levels: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "cuts", tuple(float(c) for c in self.cuts))
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        if len(self.levels) != len(self.cuts) + 1:
            raise ValueError("need exactly one more level than cuts")
        if np.any(np.diff(self.cuts) <= 0):
            raise ValueError("cuts must be strictly increasing")

    def __call__(self, theta):
        idx = np.searchsorted(self.cuts, np.asarray(theta, dtype=float), side="left")
        return np.asarray(self.levels)[idx]

    @property
    def nonincreasing(self) -> bool:
        return bool(np.all(np.diff(self.levels) <= 0))


def majorization_gap(dist: TypeDistribution, weight: ParetoWeight, vc: VirtualCost,
                     step: StepFunction, size: int | None = None) -> tuple[float, float]:
    """Both sides of the ironing inequality for a nonincreasing ``step``.

    Returns ``(lhs, rhs)`` where ``lhs`` integrates ``step`` against the raw
    signed measure and ``rhs`` against the ironed one.
    """
    if not step.nonincreasing:
        raise ValueError("step function must be nonincreasing")
    if min(step.levels) < 0:
        raise ValueError("step function must be nonnegative")
    size = len(vc.quantiles) - 1 if size is None else size
    cm = cumulative(dist, weight, size, extra=step.cuts)
    mids = 0.5 * (cm.grid[:-1] + cm.grid[1:])
    level = step(mids)
    lhs = float(np.sum(level * np.diff(cm.values)))
    env = vc.envelope_at(cm.quantiles)
    rhs = float(np.sum(level * np.diff(env)))
    return lhs, rhs
