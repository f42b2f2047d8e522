"""Random market instances for property tests and acceptance runs."""
from __future__ import annotations

import numpy as np

from .instance import Firm, MarketInstance
from .probkit import ParetoWeight, Power, Tabulated, TypeDistribution, Uniform, ValueModel


def random_distribution(rng: np.random.Generator, lower: float = 0.0,
                        upper: float | None = None) -> TypeDistribution:
    """Uniform, power-law or piecewise-uniform law on a random interval."""
    lo = lower + (0.0 if upper is not None else rng.uniform(0.0, 0.3))
    hi = upper if upper is not None else lo + rng.uniform(0.5, 1.2)
    kind = rng.integers(3)
    if kind == 0:
        return Uniform(lo, hi)
    if kind == 1:
        return Power(lo, hi, float(rng.choice([0.5, 1.5, 2.0, 3.0])))
    cuts = np.sort(rng.uniform(lo, hi, 3))
    points = (lo, *cuts.tolist(), hi)
    mass = rng.dirichlet(np.full(4, 0.7)) * 0.9 + 0.025
    probs = np.concatenate([[0.0], np.cumsum(mass / mass.sum())])
    probs[-1] = 1.0
    return Tabulated(points, tuple(probs.tolist()))


def random_weight(rng: np.random.Generator, dist: TypeDistribution) -> ParetoWeight:
    kind = rng.integers(4)
    if kind == 0:
        return ParetoWeight.full(dist)
    if kind == 1:
        return ParetoWeight.zero()
    if kind == 2:
        return ParetoWeight.scaled(dist, float(rng.uniform(0.0, 1.0)))
    return ParetoWeight.cutoff(dist, float(dist.quantile(rng.uniform(0.2, 0.8))))


def random_instance(rng: np.random.Generator, n: int) -> MarketInstance:
    v_max = float(rng.uniform(1.0, 2.0))
    firms = []
    for _ in range(n):
        dist = random_distribution(rng)
        firms.append(Firm(dist, random_weight(rng, dist), float(rng.uniform(0.0, 1.5))))
    mode = rng.integers(4) if n == 2 else rng.integers(2)
    if mode == 0 or n == 1:
        values = ValueModel.independent([random_distribution(rng, 0.0, v_max) for _ in range(n)])
    elif mode == 1:
        values = ValueModel.independent([Uniform(0.0, v_max)] * n)
    elif mode == 2:
        values = ValueModel.comonotone(random_distribution(rng, 0.0, v_max), n)
    else:
        values = ValueModel.antithetic(random_distribution(rng, 0.0, v_max))
    return MarketInstance(tuple(firms), values)


def battery(count: int = 50, seed: int = 2024, sizes=(1, 2, 3)) -> list[MarketInstance]:
    """Deterministic list of instances cycling through the firm counts."""
    rng = np.random.default_rng(seed)
    return [random_instance(rng, sizes[k % len(sizes)]) for k in range(count)]


def symmetric_instance(rng: np.random.Generator, n: int) -> MarketInstance:
    """Identical value marginals and a common fixed cost; types may differ."""
    v_max = float(rng.uniform(1.0, 2.0))
    marginal = random_distribution(rng, 0.0, v_max)
    kappa = float(rng.uniform(0.2, 1.5))
    firms = []
    for _ in range(n):
        dist = random_distribution(rng)
        firms.append(Firm(dist, random_weight(rng, dist), kappa))
    return MarketInstance(tuple(firms), ValueModel.independent([marginal] * n))
