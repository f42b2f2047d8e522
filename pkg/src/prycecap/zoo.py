"""Canonical market structures and welfare evaluation.

Every structure maps a batch of strategy profiles to expected outcomes over
consumer values: entry indicators, quantities sold, gross consumer value
and revenues. Scalar strategies use NaN for the opt-out action.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .instance import MarketInstance
from .mechanism import _composite_midpoints, share_at
from .probkit.quadrature import midpoints, spawn_seeds, stieltjes_weights
from .probkit.values import TIE_TOL

OPT_OUT = float("nan")


@dataclass(frozen=True)
class Outcome:
    entry: np.ndarray
    sales: np.ndarray
    gross: np.ndarray
    revenue: np.ndarray

    def __post_init__(self):
        total = self.sales.sum(axis=1)
        if np.any(total > 1.0 + 1e-9):
            raise AssertionError(f"infeasible allocation: total share {total.max()!r} > 1")

    def profits(self, theta, kappa) -> np.ndarray:
        """Ex-post profits for types ``theta`` (shape (M, N)) and fixed costs ``kappa``."""
        return self.revenue - self.entry * theta * (self.sales + kappa)

    @property
    def consumer_surplus(self) -> np.ndarray:
        return self.gross.sum(axis=1) - self.revenue.sum(axis=1)


def _participation(strategies) -> np.ndarray:
    return np.column_stack([~np.isnan(s) for s in strategies])


def _mask_of(active: np.ndarray) -> np.ndarray:
    return (active.astype(np.int64) << np.arange(active.shape[1])).sum(axis=1)


class MarketStructure:
    """Base class; subclasses implement :meth:`outcome` and :meth:`allocation`."""

    name = "structure"

    def __init__(self, inst: MarketInstance):
        self.inst = inst

    @property
    def n(self) -> int:
        return self.inst.n

    def outcome(self, strategies: Sequence[np.ndarray], firms=None) -> Outcome:
        """Expected outcomes for a batch of profiles.

        ``firms`` optionally lists the firms whose revenues the caller needs;
        structures may skip the rest (their revenues are then NaN).
        """
        raise NotImplementedError

    def allocation(self, v, strategies) -> np.ndarray:
        """Pointwise shares for value draws ``v`` under one strategy profile."""
        raise NotImplementedError

    def opt_out(self, i: int, size: int) -> np.ndarray:
        return np.full(size, OPT_OUT)

    def type_breakpoints(self, i: int) -> list[float]:
        """Own types where outcomes may jump (used to align quadrature)."""
        return []

    def opponent_rows(self, i: int, seed: int):
        return opponent_rows(self.inst, i, seed, [self.type_breakpoints(j) for j in range(self.n)])

    def _pack(self, entry, sales, gross, revenue) -> Outcome:
        return Outcome(entry, sales, gross, revenue)


# --------------------------------------------------------------- structures
class Monopoly(MarketStructure):
    name = "monopoly"

    def outcome(self, strategies, firms=None):
        s = np.asarray(strategies[0], dtype=float)
        m = len(s)
        n = self.n
        on = ~np.isnan(s)
        p = np.where(on, s, 0.0)
        entry = np.zeros((m, n))
        sales = np.zeros((m, n))
        gross = np.zeros((m, n))
        entry[:, 0] = on
        sales[:, 0] = np.where(on, self.inst.values.survival(0, p), 0.0)
        gross[:, 0] = np.where(on, self.inst.values.partial_moment(0, p), 0.0)
        return self._pack(entry, sales, gross, np.nan_to_num(sales * _prices(strategies, n)))

    def allocation(self, v, strategies):
        v = np.atleast_2d(v)
        out = np.zeros_like(v, dtype=float)
        s = float(strategies[0])
        if not np.isnan(s):
            out[:, 0] = v[:, 0] >= s
        return out


def _prices(strategies, n) -> np.ndarray:
    cols = [np.asarray(strategies[i], dtype=float) for i in range(n)]
    return np.column_stack([np.where(np.isnan(c), 0.0, c) for c in cols])


class PriceCompetition(MarketStructure):
    name = "price-competition"

    def outcome(self, strategies, firms=None):
        on = _participation(strategies)
        x = _prices(strategies, self.n)
        sales, gross = self.inst.values.shares_by_mask(x, _mask_of(on), self.inst.integrator.order)
        return self._pack(on.astype(float), sales, gross, x * sales)

    def allocation(self, v, strategies):
        s = np.asarray(strategies, dtype=float)
        on = ~np.isnan(s)
        return share_at(v, np.where(on, s, 0.0), _mask_of(on[None, :]))


def inverse_demand(inst: MarketInstance, quantities, steps: int = 64) -> np.ndarray:
    """Common price clearing total demand ``sum(quantities)``.

    Returns one price per row: ``v_max`` when nothing is offered, 0 when the
    offer exceeds the market, otherwise the root of joint survival = total.
    """
    q = np.atleast_2d(np.asarray(quantities, dtype=float))
    total = np.nansum(q, axis=1)
    lo = np.zeros(len(q))
    hi = np.full(len(q), inst.v_max)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        above = inst.values.joint_survival(mid) >= total
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    price = 0.5 * (lo + hi)
    price = np.where(total > 1.0, 0.0, price)
    price = np.where(total <= 0.0, inst.v_max, price)
    return price


class QuantityCompetition(MarketStructure):
    name = "quantity-competition"

    def _check(self, q):
        if np.any(q[~np.isnan(q)] < 0) or np.any(q[~np.isnan(q)] > 1):
            raise ValueError("quantities must lie in [0, 1]")

    def outcome(self, strategies, firms=None):
        on = _participation(strategies)
        q = _prices(strategies, self.n)
        self._check(q)
        total = q.sum(axis=1)
        price = inverse_demand(self.inst, q)
        frac = np.where(total[:, None] > 0, q / np.where(total > 0, total, 1.0)[:, None], 0.0)
        mass = self.inst.values.joint_survival(price)
        sales = frac * np.where(total > 1.0, 1.0, mass)[:, None]
        sales = np.where(total[:, None] > 0, sales, 0.0)
        gross = frac * self.inst.values.joint_partial(price)
        gross = np.where(total[:, None] > 0, gross, 0.0)
        return self._pack(on.astype(float), sales, gross, price[:, None] * sales)

    def allocation(self, v, strategies):
        v = np.atleast_2d(np.asarray(v, dtype=float))
        q = np.nan_to_num(np.asarray(strategies, dtype=float))
        self._check(q)
        total = q.sum()
        if total <= 0:
            return np.zeros_like(v)
        price = inverse_demand(self.inst, q[None, :])[0]
        ok = np.all(v >= price, axis=1)
        return ok[:, None] * (q / total)[None, :]


@dataclass(frozen=True)
class EntryDeterrenceSpec:
    """Incumbent-price grid on which entrant strategies are tabulated."""

    grid: np.ndarray = field(default_factory=lambda: np.linspace(0.0, 1.0, 128))

    @classmethod
    def for_instance(cls, inst: MarketInstance, size: int = 128) -> EntryDeterrenceSpec:
        return cls(np.linspace(0.0, inst.v_max, size))


class EntryDeterrence(MarketStructure):
    """Incumbent (firm 0) posts a price; entrants respond with entry and price tables.

    Entrant strategies have shape (M, 2, G): row 0 is the entry indicator and
    row 1 the price, both indexed by the incumbent-price grid with step
    interpolation. If the incumbent opts out, entrants read the last column.
    """

    name = "entry-deterrence"

    def __init__(self, inst, spec: EntryDeterrenceSpec | None = None):
        super().__init__(inst)
        self.spec = EntryDeterrenceSpec.for_instance(inst) if spec is None else spec

    def opt_out(self, i, size):
        if i == 0:
            return np.full(size, OPT_OUT)
        return np.full((size, 2, len(self.spec.grid)), OPT_OUT)

    def tabulate(self, enter: Callable, price: Callable) -> np.ndarray:
        """Entrant strategy from functions of the incumbent price."""
        g = self.spec.grid
        return np.stack([np.asarray(enter(g), dtype=float), np.asarray(price(g), dtype=float)])

    def _resolve(self, strategies):
        s1 = np.asarray(strategies[0], dtype=float)
        m = len(s1)
        g = self.spec.grid
        lookup = np.where(np.isnan(s1), np.inf, s1)
        k = np.clip(np.searchsorted(g, lookup, side="right") - 1, 0, len(g) - 1)
        active = np.zeros((m, self.n), dtype=bool)
        price = np.zeros((m, self.n))
        active[:, 0] = ~np.isnan(s1)
        price[:, 0] = np.where(active[:, 0], s1, 0.0)
        rows = np.arange(m)
        for i in range(1, self.n):
            tab = np.asarray(strategies[i], dtype=float)
            e = tab[rows, 0, k]
            p = tab[rows, 1, k]
            ok = ~np.isnan(e) & (np.nan_to_num(e) > 0.5) & ~np.isnan(p)
            active[:, i] = ok
            price[:, i] = np.where(ok, p, 0.0)
        return active, price

    def outcome(self, strategies, firms=None):
        active, price = self._resolve(strategies)
        sales, gross = self.inst.values.shares_by_mask(price, _mask_of(active),
                                                        self.inst.integrator.order)
        return self._pack(active.astype(float), sales, gross, price * sales)

    def allocation(self, v, strategies):
        strat = [np.asarray([strategies[0]], dtype=float)]
        strat += [np.asarray(s, dtype=float)[None] for s in strategies[1:]]
        active, price = self._resolve(strat)
        return share_at(v, price[0], _mask_of(active))


@dataclass(frozen=True)
class PromotionalSalesSpec:
    shares: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "shares", tuple(float(g) for g in self.shares))
        if any(g < 0 or g > 1 for g in self.shares):
            raise ValueError("captive shares must lie in [0, 1]")
        if sum(self.shares) > 1.0 + 1e-12:
            raise ValueError(f"captive shares sum to {sum(self.shares)} > 1")


class PromotionalSales(MarketStructure):
    name = "promotional-sales"

    def __init__(self, inst, spec: PromotionalSalesSpec):
        super().__init__(inst)
        if len(spec.shares) != inst.n:
            raise ValueError("need one captive share per firm")
        self.spec = spec
        self.gamma = np.asarray(spec.shares)

    def outcome(self, strategies, firms=None):
        on = _participation(strategies)
        x = _prices(strategies, self.n)
        vals = self.inst.values
        shop_s, shop_g = vals.shares_by_mask(x, _mask_of(on), self.inst.integrator.order)
        cap_s = np.column_stack([vals.survival(i, x[:, i]) for i in range(self.n)])
        cap_g = np.column_stack([vals.partial_moment(i, x[:, i]) for i in range(self.n)])
        rest = 1.0 - self.gamma.sum()
        sales = on * (self.gamma * cap_s + rest * shop_s)
        gross = on * (self.gamma * cap_g + rest * shop_g)
        return self._pack(on.astype(float), sales, gross, x * sales)

    def allocation(self, v, strategies):
        v = np.atleast_2d(np.asarray(v, dtype=float))
        s = np.asarray(strategies, dtype=float)
        on = ~np.isnan(s)
        x = np.where(on, s, 0.0)
        captive = on & (v >= x)
        shop = share_at(v, x, _mask_of(on[None, :]))
        return self.gamma * captive + (1.0 - self.gamma.sum()) * shop


class ReverseAuction(MarketStructure):
    name = "reverse-auction"

    def _winners(self, on, x):
        bid = np.where(on, x, np.inf)
        low = bid.min(axis=1, keepdims=True)
        win = on & (bid <= low + TIE_TOL)
        return win / np.maximum(win.sum(axis=1, keepdims=True), 1)

    def outcome(self, strategies, firms=None):
        on = _participation(strategies)
        x = _prices(strategies, self.n)
        w = self._winners(on, x)
        vals = self.inst.values
        sales = w * np.column_stack([vals.survival(i, x[:, i]) for i in range(self.n)])
        gross = w * np.column_stack([vals.partial_moment(i, x[:, i]) for i in range(self.n)])
        return self._pack(on.astype(float), sales, gross, x * sales)

    def allocation(self, v, strategies):
        v = np.atleast_2d(np.asarray(v, dtype=float))
        s = np.asarray(strategies, dtype=float)
        on = ~np.isnan(s)
        x = np.where(on, s, 0.0)
        w = self._winners(on[None, :], x[None, :])
        return w * (v >= x)


def make_monopoly(inst):
    return Monopoly(inst)


def make_price_competition(inst):
    return PriceCompetition(inst)


def make_quantity_competition(inst):
    return QuantityCompetition(inst)


def make_entry_deterrence(inst, spec: EntryDeterrenceSpec | None = None):
    return EntryDeterrence(inst, spec)


def make_promotional_sales(inst, shares):
    spec = shares if isinstance(shares, PromotionalSalesSpec) else PromotionalSalesSpec(tuple(shares))
    return PromotionalSales(inst, spec)


def make_reverse_auction(inst):
    return ReverseAuction(inst)


# ----------------------------------------------------------------- profiles
@dataclass(frozen=True)
class StrategyProfile:
    """Pure strategies: one map from own types to strategies per firm."""

    strategies: tuple[Callable[[np.ndarray], np.ndarray], ...]

    def __call__(self, i: int, theta) -> np.ndarray:
        return np.asarray(self.strategies[i](np.asarray(theta, dtype=float)), dtype=float)

    @classmethod
    def truthful(cls, n: int) -> StrategyProfile:
        return cls(tuple(_identity for _ in range(n)))

    @classmethod
    def constant(cls, values) -> StrategyProfile:
        return cls(tuple(_Constant(float(v)) for v in values))

    @classmethod
    def opt_out(cls, n: int) -> StrategyProfile:
        return cls.constant([OPT_OUT] * n)

    @classmethod
    def virtual_costs(cls, inst: MarketInstance) -> StrategyProfile:
        return cls(tuple(inst.virtual_costs))

    @classmethod
    def tabulated(cls, grids, tables) -> StrategyProfile:
        """Step interpolation of tabulated strategies (value at the grid point below)."""
        return cls(tuple(_Table(np.asarray(g, dtype=float), np.asarray(t, dtype=float))
                         for g, t in zip(grids, tables)))


def _identity(theta):
    return theta


@dataclass(frozen=True)
class _Constant:
    value: float

    def __call__(self, theta):
        return np.full(np.shape(theta), self.value)


@dataclass(frozen=True)
class _Table:
    grid: np.ndarray
    table: np.ndarray

    def __call__(self, theta):
        k = np.clip(np.searchsorted(self.grid, theta, side="right") - 1, 0, len(self.grid) - 1)
        return self.table[k]


@dataclass(frozen=True)
class FunctionStrategy:
    """Type-independent function-valued strategy for an entry-deterrence entrant."""

    table: np.ndarray

    def __call__(self, theta):
        return np.broadcast_to(self.table, np.shape(theta) + self.table.shape).copy()


@dataclass(frozen=True)
class AccommodatingEntrant:
    """Entrant that always enters and prices at its own type, whatever the incumbent does."""

    size: int

    def __call__(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        out = np.ones((len(theta), 2, self.size))
        out[:, 1, :] = theta[:, None]
        return out


def truthful_profile(structure: MarketStructure) -> StrategyProfile:
    """Every firm posts its own type (entrants in entry deterrence always enter)."""
    if isinstance(structure, EntryDeterrence):
        entrant = AccommodatingEntrant(len(structure.spec.grid))
        return StrategyProfile((_identity, *[entrant] * (structure.n - 1)))
    return StrategyProfile.truthful(structure.n)


def opt_out_profile(structure: MarketStructure) -> StrategyProfile:
    return StrategyProfile(tuple(_OptOut(structure, i) for i in range(structure.n)))


@dataclass(frozen=True)
class _OptOut:
    structure: MarketStructure
    firm: int

    def __call__(self, theta):
        return self.structure.opt_out(self.firm, len(np.atleast_1d(theta)))


def monopoly_price_profile(inst: MarketInstance, size: int = 512) -> StrategyProfile:
    """Grid-optimal monopoly pricing for firm 0; other firms opt out."""
    grid = np.linspace(0.0, inst.v_max, size)
    surv = inst.values.survival(0, grid)
    kappa = inst.firms[0].kappa

    def best(theta):
        theta = np.atleast_1d(theta)
        margin = (grid[None, :] - theta[:, None]) * surv[None, :] - theta[:, None] * kappa
        k = np.argmax(margin, axis=1)
        value = margin[np.arange(len(theta)), k]
        return np.where(value >= 0, grid[k], OPT_OUT)

    rest = [_Constant(OPT_OUT)] * (inst.n - 1)
    return StrategyProfile((best, *rest))


# --------------------------------------------------------------- evaluation
@dataclass(frozen=True)
class OpponentRows:
    thetas: np.ndarray
    weights: np.ndarray
    exact: bool


def opponent_rows(inst: MarketInstance, i: int, seed: int, cuts=None,
                  size: int | None = None) -> OpponentRows:
    """Opponent type profiles for firm ``i``; own column is NaN."""
    n = inst.n
    if n == 1:
        return OpponentRows(np.full((1, 1), np.nan), np.ones(1), True)
    if n == 2:
        j = 1 - i
        dist = inst.firms[j].dist
        u_cuts = [dist.cdf(t) for t in (cuts[j] if cuts else [])]
        u, w = _composite_midpoints(u_cuts, inst.grids.opponents if size is None else size)
        thetas = np.full((len(u), 2), np.nan)
        thetas[:, j] = dist.quantile(u)
        return OpponentRows(thetas, w, True)
    rng = np.random.default_rng(spawn_seeds(seed, 2 * n)[n + i])
    u = rng.random((inst.grids.opponent_draws if size is None else size, n))
    thetas = np.column_stack([f.dist.quantile(u[:, j]) for j, f in enumerate(inst.firms)])
    thetas[:, i] = np.nan
    return OpponentRows(thetas, np.full(len(u), 1.0 / len(u)), False)


def profile_rows(inst: MarketInstance, seed: int, cuts=None, draws: int | None = None):
    """Type profiles and weights for expectations over all types."""
    n = inst.n
    if n <= 2:
        axes = []
        for j, f in enumerate(inst.firms):
            u_cuts = [f.dist.cdf(t) for t in (cuts[j] if cuts else [])]
            size = inst.grids.opponents * (4 if n == 1 else 1)
            u, w = _composite_midpoints(u_cuts, size)
            axes.append((f.dist.quantile(u), w))
        if n == 1:
            return axes[0][0][:, None], axes[0][1], True
        t1, t2 = np.meshgrid(axes[0][0], axes[1][0], indexing="ij")
        w = np.outer(axes[0][1], axes[1][1]).ravel()
        return np.column_stack([t1.ravel(), t2.ravel()]), w, True
    rng = np.random.default_rng(spawn_seeds(seed, 2 * n + 1)[2 * n])
    size = inst.grids.profile_draws if draws is None else draws
    u = rng.random((size, n))
    thetas = np.column_stack([f.dist.quantile(u[:, j]) for j, f in enumerate(inst.firms)])
    return thetas, np.full(size, 1.0 / size), False


def own_grid(inst: MarketInstance, i: int, size: int, extra=()) -> np.ndarray:
    f = inst.firms[i]
    grid = f.dist.quantile(np.linspace(0.0, 1.0, size))
    grid[0], grid[-1] = f.dist.lower, f.dist.upper
    add = [t for t in list(extra) + list(f.weight.jump_points) if f.dist.lower < t < f.dist.upper]
    return np.unique(np.concatenate([grid, add]))


@dataclass(frozen=True)
class WelfareReport:
    structure: str
    consumer_surplus: float
    consumer_surplus_se: float
    type_grids: tuple[np.ndarray, ...]
    interim_profits: tuple[np.ndarray, ...]
    weighted_profits: tuple[float, ...]
    weighted_objective: float
    objective_se: float
    expected_revenue: tuple[float, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "structure": self.structure,
            "consumer_surplus": self.consumer_surplus,
            "consumer_surplus_se": self.consumer_surplus_se,
            "weighted_objective": self.weighted_objective,
            "objective_se": self.objective_se,
            "weighted_profits": list(self.weighted_profits),
            "expected_revenue": list(self.expected_revenue),
            "interim_profits": [
                {"theta": g.tolist(), "profit": p.tolist()}
                for g, p in zip(self.type_grids, self.interim_profits)
            ],
        }


def _strategies_for(structure, profile, thetas) -> list[np.ndarray]:
    return [profile(j, thetas[:, j]) for j in range(structure.n)]


def _weighted(vals, weights, exact):
    mean = float(np.dot(weights, vals))
    if exact or len(vals) < 2:
        return mean, 0.0
    return mean, float(np.std(vals, ddof=1) / np.sqrt(len(vals)))


def interim_rows(structure: MarketStructure, profile: StrategyProfile, i: int, grid, opp,
                 own=None) -> np.ndarray:
    """Profit of firm ``i`` for each (own type, opponent row): shape (K, M)."""
    inst = structure.inst
    grid = np.asarray(grid, dtype=float)
    k, m = len(grid), len(opp.weights)
    thetas = np.tile(opp.thetas, (k, 1))
    thetas[:, i] = np.repeat(grid, m)
    strategies = _strategies_for(structure, profile, thetas)
    if own is not None:
        strategies[i] = own
    out = structure.outcome(strategies, firms=[i])
    profit = out.profits(thetas, inst.kappa)[:, i]
    return profit.reshape(k, m)


def evaluate(structure: MarketStructure, inst: MarketInstance, profile: StrategyProfile,
             seed: int = 0, grid_size: int = 129) -> WelfareReport:
    """Consumer surplus, interim profits and weighted objective of a profile."""
    if structure.inst is not inst:
        raise ValueError("structure was built for a different instance")
    cuts = [structure.type_breakpoints(j) for j in range(inst.n)]
    thetas, w, exact = profile_rows(inst, seed, cuts)
    out = structure.outcome(_strategies_for(structure, profile, thetas))
    cs, cs_se = _weighted(out.consumer_surplus, w, exact)
    revenue = tuple(float(np.dot(w, out.revenue[:, j])) for j in range(inst.n))
    grids, curves, weighted = [], [], []
    var = cs_se**2
    for i, f in enumerate(inst.firms):
        opp = structure.opponent_rows(i, seed)
        grid = own_grid(inst, i, grid_size, cuts[i])
        rows = interim_rows(structure, profile, i, grid, opp)
        coef = stieltjes_weights(grid, f.weight)
        per_row = coef @ rows
        val, se = _weighted(per_row, opp.weights, opp.exact)
        grids.append(grid)
        curves.append(rows @ opp.weights)
        weighted.append(val)
        var += se**2
    objective = cs + sum(weighted)
    return WelfareReport(structure.name, cs, cs_se, tuple(grids), tuple(curves), tuple(weighted),
                         objective, float(np.sqrt(var)), revenue)


def deviation_gap(structure: MarketStructure, inst: MarketInstance, profile: StrategyProfile,
                  i: int, deviations, types=None, seed: int = 0, opp=None) -> float:
    """Largest interim gain of firm ``i`` from a unilateral deviation.

    ``deviations`` is a sequence of strategies for firm ``i`` (scalars, or
    arrays for function-valued strategies); the gap is maximized over
    ``types`` (default: 64 quantile-spaced types).
    """
    if types is None:
        types = own_grid(inst, i, 64)
    types = np.asarray(types, dtype=float)
    opp = structure.opponent_rows(i, seed) if opp is None else opp
    kappa = inst.firms[i].kappa
    base = interim_rows(structure, profile, i, types, opp) @ opp.weights
    m = len(opp.weights)
    devs = list(deviations)
    thetas = np.tile(opp.thetas, (len(devs), 1))
    thetas[:, i] = np.nan
    strategies = _strategies_for(structure, profile, np.nan_to_num(thetas, nan=types[0]))
    own = np.stack([np.asarray(d, dtype=float) for d in devs])
    strategies[i] = np.repeat(own, m, axis=0)
    out = structure.outcome(strategies, firms=[i])
    w = opp.weights
    e_rev = out.revenue[:, i].reshape(len(devs), m) @ w
    e_sales = (out.entry[:, i] * out.sales[:, i]).reshape(len(devs), m) @ w
    e_entry = out.entry[:, i].reshape(len(devs), m) @ w
    payoff = e_rev[None, :] - types[:, None] * (e_sales + kappa * e_entry)[None, :]
    return float(np.max(payoff.max(axis=1) - base))
