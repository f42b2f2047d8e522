"""Atomless distributions on bounded intervals and Pareto weight functions."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np


class TypeDistribution:
    """Continuous, strictly increasing CDF on ``[lower, upper]``.

    Subclasses provide ``cdf``, ``pdf``, ``quantile`` and ``partial_moment``.
    ``poly_degree`` is the polynomial degree of the CDF between breakpoints
    (``None`` when not polynomial); quadrature routines use it to pick exact
    Gauss orders.
    """

    lower: float
    upper: float

    def cdf(self, x):
        raise NotImplementedError

    def pdf(self, x):
        raise NotImplementedError

    def quantile(self, u):
        raise NotImplementedError

    def partial_moment(self, p):
        """E[v 1{v >= p}]."""
        raise NotImplementedError

    def survival(self, p):
        return 1.0 - self.cdf(p)

    @property
    def mean(self) -> float:
        return float(self.partial_moment(self.lower))

    @property
    def breakpoints(self) -> np.ndarray:
        return np.array([self.lower, self.upper])

    @property
    def poly_degree(self) -> int | None:
        return None

    @property
    def singular_density(self) -> bool:
        return False

    @property
    def max_density(self) -> float:
        return float(np.max(self.pdf(np.linspace(self.lower, self.upper, 1001)[1:-1])))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.quantile(rng.random(size))

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


def _check_support(lower: float, upper: float) -> None:
    if not (math.isfinite(lower) and math.isfinite(upper)):
        raise ValueError("support bounds must be finite")
    if lower < 0:
        raise ValueError(f"lower bound must be >= 0, got {lower}")
    if not upper > lower:
        raise ValueError(f"upper bound must exceed lower bound, got [{lower}, {upper}]")


@dataclass(frozen=True)
class Uniform(TypeDistribution):
    lower: float = 0.0
    upper: float = 1.0

    def __post_init__(self):
        _check_support(self.lower, self.upper)

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def cdf(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.lower) / self.width, 0.0, 1.0)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where((x >= self.lower) & (x <= self.upper), 1.0 / self.width, 0.0)

    def quantile(self, u):
        return self.lower + self.width * np.clip(np.asarray(u, dtype=float), 0.0, 1.0)

    def partial_moment(self, p):
        pc = np.clip(np.asarray(p, dtype=float), self.lower, self.upper)
        return (self.upper**2 - pc**2) / (2.0 * self.width)

    @property
    def poly_degree(self) -> int:
        return 1

    def to_dict(self):
        return {"family": "uniform", "lower": self.lower, "upper": self.upper}


@dataclass(frozen=True)
class Power(TypeDistribution):
    """G(x) = ((x - lower) / (upper - lower)) ** exponent."""

    lower: float = 0.0
    upper: float = 1.0
    exponent: float = 1.0

    def __post_init__(self):
        _check_support(self.lower, self.upper)
        if not (self.exponent > 0 and math.isfinite(self.exponent)):
            raise ValueError(f"exponent must be positive, got {self.exponent}")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def _z(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.lower) / self.width, 0.0, 1.0)

    def cdf(self, x):
        return self._z(x) ** self.exponent

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        z = self._z(x)
        with np.errstate(divide="ignore"):
            dens = self.exponent * z ** (self.exponent - 1.0) / self.width
        return np.where((x >= self.lower) & (x <= self.upper), dens, 0.0)

    def quantile(self, u):
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        return self.lower + self.width * u ** (1.0 / self.exponent)

    def partial_moment(self, p):
        c = self.exponent
        w = self._z(p)
        return self.lower * (1.0 - w**c) + self.width * c / (c + 1.0) * (1.0 - w ** (c + 1.0))

    @property
    def poly_degree(self) -> int | None:
        c = self.exponent
        return int(round(c)) if abs(c - round(c)) < 1e-12 else None

    @property
    def singular_density(self) -> bool:
        return self.exponent < 1.0

    @property
    def max_density(self) -> float:
        if self.exponent < 1.0:
            return math.inf
        return self.exponent / self.width

    def to_dict(self):
        return {"family": "power", "lower": self.lower, "upper": self.upper, "exponent": self.exponent}


@dataclass(frozen=True)
class Tabulated(TypeDistribution):
    """Piecewise-linear CDF through ``(points[k], probs[k])``."""

    points: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        xs = tuple(float(v) for v in self.points)
        ps = tuple(float(v) for v in self.probs)
        object.__setattr__(self, "points", xs)
        object.__setattr__(self, "probs", ps)
        if len(xs) != len(ps) or len(xs) < 2:
            raise ValueError("points and probs must have equal length >= 2")
        _check_support(xs[0], xs[-1])
        if np.any(np.diff(xs) <= 0):
            raise ValueError("points must be strictly increasing")
        if np.any(np.diff(ps) <= 0):
            raise ValueError("probs must be strictly increasing (atomless, full support)")
        if ps[0] != 0.0 or ps[-1] != 1.0:
            raise ValueError("probs must start at 0 and end at 1")

    @property
    def lower(self) -> float:
        return self.points[0]

    @property
    def upper(self) -> float:
        return self.points[-1]

    @property
    def _slopes(self) -> np.ndarray:
        return np.diff(self.probs) / np.diff(self.points)

    def cdf(self, x):
        return np.interp(np.asarray(x, dtype=float), self.points, self.probs)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.clip(np.searchsorted(self.points, x, side="right") - 1, 0, len(self.points) - 2)
        inside = (x >= self.lower) & (x <= self.upper)
        return np.where(inside, self._slopes[idx], 0.0)

    def quantile(self, u):
        return np.interp(np.clip(np.asarray(u, dtype=float), 0.0, 1.0), self.probs, self.points)

    def partial_moment(self, p):
        p = np.asarray(p, dtype=float)
        xs = np.asarray(self.points)
        lo = np.maximum(xs[:-1], p[..., None])
        hi = xs[1:]
        seg = np.where(hi > lo, self._slopes * (hi**2 - lo**2) / 2.0, 0.0)
        return seg.sum(axis=-1)

    @property
    def breakpoints(self) -> np.ndarray:
        return np.asarray(self.points)

    @property
    def poly_degree(self) -> int:
        return 1

    @property
    def max_density(self) -> float:
        return float(self._slopes.max())

    def to_dict(self):
        return {"family": "tabulated", "points": list(self.points), "probs": list(self.probs)}


@dataclass(frozen=True)
class Reflected(TypeDistribution):
    """Law of ``total - v`` for ``v`` drawn from ``base``."""

    base: TypeDistribution
    total: float

    def __post_init__(self):
        if self.total < self.base.upper:
            raise ValueError("reflection total must be >= base upper bound")

    @property
    def lower(self) -> float:
        return self.total - self.base.upper

    @property
    def upper(self) -> float:
        return self.total - self.base.lower

    def cdf(self, x):
        return 1.0 - self.base.cdf(self.total - np.asarray(x, dtype=float))

    def pdf(self, x):
        return self.base.pdf(self.total - np.asarray(x, dtype=float))

    def quantile(self, u):
        return self.total - self.base.quantile(1.0 - np.asarray(u, dtype=float))

    def partial_moment(self, p):
        # E[(T - v) 1{v <= T - p}]
        c = self.total - np.asarray(p, dtype=float)
        below = self.base.cdf(c)
        return self.total * below - (self.base.mean - self.base.partial_moment(c))

    @property
    def breakpoints(self) -> np.ndarray:
        return np.sort(self.total - self.base.breakpoints)

    @property
    def poly_degree(self) -> int | None:
        return self.base.poly_degree

    @property
    def max_density(self) -> float:
        return self.base.max_density

    def to_dict(self):
        return {"family": "reflected", "base": self.base.to_dict(), "total": self.total}


def distribution_from_dict(spec: Mapping[str, Any]) -> TypeDistribution:
    family = spec.get("family")
    if family == "uniform":
        return Uniform(float(spec.get("lower", 0.0)), float(spec.get("upper", 1.0)))
    if family == "power":
        return Power(float(spec.get("lower", 0.0)), float(spec.get("upper", 1.0)),
                     float(spec["exponent"]))
    if family == "tabulated":
        return Tabulated(tuple(spec["points"]), tuple(spec["probs"]))
    raise ValueError(f"unknown distribution family {family!r}")


@dataclass(frozen=True)
class ParetoWeight:
    """Nondecreasing right-continuous piecewise-linear weight on types.

    ``knots`` are ``(theta, value)`` pairs with nondecreasing ``theta``; a
    repeated ``theta`` encodes a jump (the later value is the right limit).
    Outside the knot range the function is extended flat. With ``base`` set
    the knots describe a multiplier and the weight is ``base.cdf * knots``.
    """

    knots: tuple[tuple[float, float], ...]
    base: TypeDistribution | None = None

    def __post_init__(self):
        knots = tuple((float(t), float(v)) for t, v in self.knots)
        if not knots:
            raise ValueError("at least one knot is required")
        object.__setattr__(self, "knots", knots)
        ts = np.array([k[0] for k in knots])
        vs = np.array([k[1] for k in knots])
        if np.any(np.diff(ts) < 0):
            raise ValueError("knot locations must be nondecreasing")
        if np.any(np.diff(vs) < 0):
            raise ValueError("knot values must be nondecreasing")
        if vs[0] < 0:
            raise ValueError("knot values must be nonnegative")
        for j in range(len(ts) - 2):
            if ts[j] == ts[j + 2]:
                raise ValueError("at most two knots may share a location")

    @classmethod
    def full(cls, dist: TypeDistribution) -> ParetoWeight:
        return cls(((dist.lower, 1.0),), base=dist)

    @classmethod
    def zero(cls) -> ParetoWeight:
        return cls(((0.0, 0.0),))

    @classmethod
    def scaled(cls, dist: TypeDistribution, alpha: float) -> ParetoWeight:
        return cls(((dist.lower, alpha),), base=dist)

    @classmethod
    def cutoff(cls, dist: TypeDistribution, theta0: float) -> ParetoWeight:
        """Full weight on types at or above ``theta0``, none below."""
        return cls(((theta0, 0.0), (theta0, 1.0)), base=dist)

    @property
    def _ts(self) -> np.ndarray:
        return np.array([k[0] for k in self.knots])

    @property
    def _vs(self) -> np.ndarray:
        return np.array([k[1] for k in self.knots])

    def _knot_eval(self, theta, side: str):
        theta = np.asarray(theta, dtype=float)
        ts, vs = self._ts, self._vs
        if len(ts) == 1:
            return np.full(theta.shape, vs[0])
        idx = np.searchsorted(ts, theta, side=side)
        hi = np.clip(idx, 1, len(ts) - 1)
        lo = hi - 1
        span = ts[hi] - ts[lo]
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(span > 0, (theta - ts[lo]) / span, 0.0)
        val = vs[lo] + (vs[hi] - vs[lo]) * np.clip(frac, 0.0, 1.0)
        val = np.where(idx == 0, vs[0], val)
        return np.where(idx >= len(ts), vs[-1], val)

    def __call__(self, theta):
        val = self._knot_eval(theta, "right")
        if self.base is not None:
            val = self.base.cdf(theta) * val
        return val

    def left(self, theta):
        """Left limit at ``theta``."""
        val = self._knot_eval(theta, "left")
        if self.base is not None:
            val = self.base.cdf(theta) * val
        return val

    @property
    def jump_points(self) -> np.ndarray:
        ts, vs = self._ts, self._vs
        pts = [ts[j] for j in range(len(ts) - 1) if ts[j] == ts[j + 1] and vs[j + 1] > vs[j]]
        return np.array(pts, dtype=float)

    @property
    def is_full(self) -> bool:
        return self.base is not None and all(v == 1.0 for _, v in self.knots)

    def validate(self, dist: TypeDistribution, n: int = 1000, atol: float = 1e-12) -> None:
        if self.base is not None and self.base != dist:
            raise ValueError("relative weight is tied to a different distribution")
        if self.base is not None and self._vs[-1] > 1.0 + atol:
            raise ValueError("relative weight multiplier exceeds 1")
        grid = np.linspace(dist.lower, dist.upper, n)
        jumps = self.jump_points
        grid = np.concatenate([grid, jumps[(jumps >= dist.lower) & (jumps <= dist.upper)]])
        lam = self(grid)
        if np.any(lam < -atol):
            raise ValueError("weight is negative somewhere on the support")
        excess = lam - dist.cdf(grid)
        if np.any(excess > atol):
            k = int(np.argmax(excess))
            raise ValueError(f"weight exceeds the type CDF at theta={grid[k]:.6g}")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"knots": [list(k) for k in self.knots]}
        out["relative"] = self.base is not None
        return out


def weight_from_dict(spec: Mapping[str, Any], dist: TypeDistribution) -> ParetoWeight:
    kind = spec.get("type", "knots")
    if kind == "full":
        return ParetoWeight.full(dist)
    if kind == "zero":
        return ParetoWeight.zero()
    if kind == "scaled":
        return ParetoWeight.scaled(dist, float(spec["alpha"]))
    if kind == "cutoff":
        return ParetoWeight.cutoff(dist, float(spec["theta"]))
    if kind == "knots":
        knots = tuple((float(t), float(v)) for t, v in spec["knots"])
        return ParetoWeight(knots, base=dist if spec.get("relative", False) else None)
    raise ValueError(f"unknown weight type {kind!r}")
