"""Market instances: firms, consumer values and numerical settings."""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .ironing import DEFAULT_GRID, VirtualCost, iron
from .probkit import Integrator, ParetoWeight, TypeDistribution, ValueModel

MAX_FIRMS = 16


@dataclass(frozen=True)
class Firm:
    dist: TypeDistribution
    weight: ParetoWeight
    kappa: float = 0.0


@dataclass(frozen=True)
class Grids:
    """Grid sizes used by the mechanism, caps and welfare evaluation."""

    types: int = 256
    prices: int = 512
    deviations: int = 128
    opponents: int = 256
    opponent_draws: int = 512
    profile_draws: int = 20_000
    ironing: int = DEFAULT_GRID


@dataclass(frozen=True)
class MarketInstance:
    firms: tuple[Firm, ...]
    values: ValueModel
    integrator: Integrator = field(default_factory=Integrator)
    grids: Grids = field(default_factory=Grids)

    def __post_init__(self):
        object.__setattr__(self, "firms", tuple(self.firms))
        n = len(self.firms)
        if not 1 <= n <= MAX_FIRMS:
            raise ValueError(f"firm count must be in [1, {MAX_FIRMS}], got {n}")
        if self.values.dimension != n:
            raise ValueError("value model dimension does not match the firm count")
        for f in self.firms:
            if not f.kappa >= 0:
                raise ValueError(f"kappa must be >= 0, got {f.kappa}")
            f.weight.validate(f.dist)

    @property
    def n(self) -> int:
        return len(self.firms)

    @property
    def kappa(self) -> np.ndarray:
        return np.array([f.kappa for f in self.firms])

    @property
    def v_max(self) -> float:
        return self.values.v_max

    @property
    def scale(self) -> float:
        return max(1.0, self.v_max) * (1.0 + float(self.kappa.sum()))

    @functools.cached_property
    def virtual_costs(self) -> tuple[VirtualCost, ...]:
        return tuple(iron(f.dist, f.weight, self.grids.ironing) for f in self.firms)

    def with_weights(self, weights) -> MarketInstance:
        firms = tuple(Firm(f.dist, w, f.kappa) for f, w in zip(self.firms, weights))
        return MarketInstance(firms, self.values, self.integrator, self.grids)


def symmetric_uniform(n: int = 2, kappa: float = 1.0, weight: str = "full") -> MarketInstance:
    """Uniform types and iid uniform values on the unit interval."""
    from .probkit import Uniform

    u = Uniform(0.0, 1.0)
    makers = {
        "full": lambda: ParetoWeight.full(u),
        "zero": ParetoWeight.zero,
        "cutoff": lambda: ParetoWeight.cutoff(u, 0.5),
    }
    firms = tuple(Firm(u, makers[weight](), kappa) for _ in range(n))
    return MarketInstance(firms, ValueModel.independent([u] * n))
