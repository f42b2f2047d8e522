"""Price competition with lump-sum transfers and yardstick price caps.

Firms post prices. The admitted set is chosen from posted prices exactly as
the efficient mechanism chooses it from virtual costs, so each firm faces a
cap that depends on its rivals' prices. Revenues are sales at the posted
price minus a lump sum indexed by the type that would post that price in
equilibrium.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .instance import MarketInstance
from .mechanism import (
    BISECT_STEPS, DirectMechanism, check_grid, select_entrants, share_at,
    standalone_price, virtual_costs_at,
)
from .probkit.quadrature import spawn_seeds
from .zoo import (
    MarketStructure, OpponentRows, Outcome, StrategyProfile, _mask_of, _participation, _prices,
    deviation_gap, evaluate, opponent_rows,
)

REVENUE_MODES = ("realized", "interim")
OFF_RANGE_RULES = ("deter", "clamp")
CAP_TOL = 1e-6
FRESH_ROWS = 400_000


def entrant_set_from_prices(inst: MarketInstance, s, allowed=None):
    """Admitted set for posted prices (prices stand in for virtual costs)."""
    return select_entrants(inst, s, allowed)


def price_cap(inst: MarketInstance, i: int, s, steps: int = BISECT_STEPS, allowed=None):
    """Largest own price at which firm ``i`` is admitted, given rivals' prices.

    ``s`` holds full price vectors (the own entry is ignored). Returns +inf if
    the firm is admitted even at ``v_max`` and -inf if it is not admitted at
    a zero price.
    """
    arr = np.asarray(s, dtype=float)
    single = arr.ndim == 1
    s = np.atleast_2d(arr).copy()
    bit = 1 << i

    def member(p):
        s[:, i] = p
        return (np.atleast_1d(select_entrants(inst, s, allowed)) & bit) != 0

    m = len(s)
    lo = np.zeros(m)
    hi = np.full(m, inst.v_max)
    top = member(hi)
    bottom = member(lo)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        ok = member(mid)
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    cap = np.where(top, np.inf, np.where(bottom, lo, -np.inf))
    return float(cap[0]) if single else cap


@dataclass(frozen=True)
class CapBounds:
    lower: float
    upper: float

    def __post_init__(self):
        if not 0.0 <= self.lower <= self.upper:
            raise ValueError(f"invalid cap bounds [{self.lower}, {self.upper}]")

    def contains(self, caps, tol: float = CAP_TOL) -> bool:
        caps = np.asarray(caps, dtype=float)
        return bool(np.all((caps >= self.lower - tol) & (caps <= self.upper + tol)))


class PryceCap(MarketStructure):
    """Cap structure built from a tabulated efficient mechanism.

    Prices outside the range of a firm's virtual cost have no type that would
    post them. With ``off_range="deter"`` such a price carries the smallest
    lump sum that leaves every type no better off than in equilibrium; with
    ``"clamp"`` it carries the lump sum of the nearest end type.

    ``caps=False`` admits every participating firm and ``lump_sums=False``
    drops the lump-sum transfers; both exist for diagnostics.
    """

    name = "pryce-cap"

    def __init__(self, mech: DirectMechanism, revenue_mode: str = "realized",
                 caps: bool = True, lump_sums: bool = True, off_range: str = "deter"):
        super().__init__(mech.inst)
        if revenue_mode not in REVENUE_MODES:
            raise ValueError(f"revenue_mode must be one of {REVENUE_MODES}")
        if off_range not in OFF_RANGE_RULES:
            raise ValueError(f"off_range must be one of {OFF_RANGE_RULES}")
        self.mech = mech
        self.virtual_costs = mech.virtual_costs
        self.revenue_mode = revenue_mode
        self.caps = caps
        self.lump_sums = lump_sums
        self.off_range = off_range
        self._memo: list[dict[float, tuple[float, float]]] = [{} for _ in range(self.n)]
        self._demand: list[dict[float, tuple[float, float]]] = [{} for _ in range(self.n)]

    # -------------------------------------------------------------- pieces
    def equilibrium_strategy(self, i: int, theta):
        return self.virtual_costs[i](theta)

    def profile(self) -> StrategyProfile:
        return StrategyProfile.virtual_costs(self.inst)

    def price_cap(self, i: int, s):
        return price_cap(self.inst, i, s)

    def membership(self, s, allowed=None):
        return entrant_set_from_prices(self.inst, s, allowed)

    def _table(self, i):
        tab = self.mech.tables[i]
        return tab.theta, tab.sales, tab.transfer

    def _interim_at(self, i: int, theta) -> tuple[np.ndarray, np.ndarray]:
        """Equilibrium expected sales and transfer at own types ``theta``."""
        theta = np.asarray(theta, dtype=float)
        flat = theta.ravel()
        uniq, inv = np.unique(flat, return_inverse=True)
        limit = max(512, FRESH_ROWS // len(self.mech.opponents[i].weights))
        memo = self._memo[i]
        missing = [t for t in uniq.tolist() if t not in memo]
        if len(missing) <= limit:
            if missing:
                got = self.mech.interim(i, np.asarray(missing))
                memo.update(zip(missing, zip(got["sales"].tolist(), got["transfer"].tolist())))
            pairs = np.array([memo[t] for t in uniq.tolist()]).reshape(-1, 2)
            sales, transfer = pairs[:, 0], pairs[:, 1]
        else:
            # many distinct types (Monte Carlo profiles): interpolate the tabulated mechanism
            grid, s_tab, t_tab = self._table(i)
            sales, transfer = np.interp(uniq, grid, s_tab), np.interp(uniq, grid, t_tab)
        return sales[inv].reshape(theta.shape), transfer[inv].reshape(theta.shape)

    def lump_sum(self, i: int, theta):
        """Lump sum owed to consumers by a firm of type ``theta``."""
        theta = np.asarray(theta, dtype=float)
        sales, transfer = self._interim_at(i, theta)
        return self.virtual_costs[i](theta) * sales - transfer

    def expected_demand(self, i: int, s) -> tuple[np.ndarray, np.ndarray]:
        """Expected sales and entry at own prices ``s`` against equilibrium rivals."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        memo = self._demand[i]
        missing = sorted({p for p in s.tolist() if p not in memo})
        if missing:
            opp = self.mech.opponents[i]
            m = len(opp.weights)
            x = np.tile(opp.x, (len(missing), 1))
            x[:, i] = np.repeat(missing, m)
            masks = self._entrants(x, np.ones_like(x, dtype=bool))
            sales, _ = self.inst.values.shares_by_mask(x, masks, self.inst.integrator.order)
            entry = ((masks >> i) & 1).astype(float)
            es = sales[:, i].reshape(len(missing), m) @ opp.weights
            er = entry.reshape(len(missing), m) @ opp.weights
            memo.update(zip(missing, zip(es.tolist(), er.tolist())))
        pairs = np.array([memo[p] for p in s.tolist()]).reshape(-1, 2)
        return pairs[:, 0], pairs[:, 1]

    def deterrent_lump_sum(self, i: int, s):
        """Smallest lump sum at price ``s`` that no type prefers to equilibrium play."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        tab = self.mech.tables[i]
        kappa = self.inst.firms[i].kappa
        es, er = self.expected_demand(i, s)
        gain = ((s[:, None] - tab.theta[None, :]) * es[:, None]
                - tab.theta[None, :] * kappa * er[:, None] - tab.profit[None, :])
        return gain.max(axis=1)

    def price_lump_sum(self, i: int, s):
        """Lump sum charged at posted prices ``s`` (through the inverse virtual cost)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        vc = self.virtual_costs[i]
        theta = np.asarray(vc.inverse(s), dtype=float).reshape(s.shape)
        eq_sales, transfer = self._interim_at(i, theta)
        tau = vc(theta) * eq_sales - transfer
        outside = (s < vc.lower) | (s > vc.upper)
        if self.off_range == "deter" and np.any(outside):
            tau = tau.copy()
            tau[outside] = self.deterrent_lump_sum(i, s[outside])
        return tau, eq_sales, outside

    def type_breakpoints(self, i: int) -> list[float]:
        vc = self.virtual_costs[i]
        cuts = [a for seg in vc.flat_segments() for a in seg[:2]]
        p = standalone_price(self.inst, i)
        if np.isfinite(p) and vc.lower < p <= vc.upper:
            cuts.append(float(vc.inverse(p)))
        return cuts

    def opponent_rows(self, i: int, seed: int):
        opp = self.mech.opponents[i]
        return OpponentRows(opp.thetas, opp.weights, opp.exact)

    # ------------------------------------------------------------- outcome
    def _entrants(self, x, on):
        allowed = _mask_of(on)
        if self.caps:
            return np.atleast_1d(select_entrants(self.inst, x, allowed))
        return allowed

    def outcome(self, strategies, firms=None) -> Outcome:
        on = _participation(strategies)
        x = _prices(strategies, self.n)
        masks = self._entrants(x, on)
        sales, gross = self.inst.values.shares_by_mask(x, masks, self.inst.integrator.order)
        entry = ((masks[:, None] >> np.arange(self.n)) & 1).astype(float)
        revenue = self.revenue(x, sales, on, firms)
        return Outcome(entry, sales, gross, revenue)

    def revenue(self, x, sales, on=None, firms=None) -> np.ndarray:
        """Revenue of each firm at posted prices ``x`` and realized sales."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        sales = np.atleast_2d(np.asarray(sales, dtype=float))
        on = np.ones_like(x, dtype=bool) if on is None else on
        out = np.zeros_like(x)
        if firms is not None:
            out[:, [j for j in range(self.n) if j not in firms]] = np.nan
        for i in range(self.n) if firms is None else firms:
            idx = np.flatnonzero(on[:, i])
            if not len(idx):
                continue
            s = x[idx, i]
            tau, eq_sales, outside = self.price_lump_sum(i, s)
            if not self.lump_sums:
                tau = np.zeros_like(s)
            if self.revenue_mode == "realized":
                out[idx, i] = s * sales[idx, i] - tau
            else:
                # expected sales at the posted price against equilibrium rivals
                if np.any(outside) or not self.caps:
                    eq_sales = eq_sales.copy()
                    sel = outside if self.caps else np.ones_like(outside)
                    eq_sales[sel] = self.expected_demand(i, s[sel])[0]
                out[idx, i] = s * eq_sales - tau
        return out

    def allocation(self, v, strategies):
        s = np.asarray(strategies, dtype=float)
        on = ~np.isnan(s)
        x = np.where(on, s, 0.0)
        return share_at(v, x, self._entrants(x[None, :], on[None, :]))

    # --------------------------------------------------------- diagnostics
    def best_response_gap(self, i: int, types=None, deviations=None) -> float:
        """Largest interim gain from deviating from virtual-cost pricing.

        The default deviation grid extends past the range of equilibrium prices.
        """
        inst = self.inst
        types = check_grid(inst, i, 64) if types is None else np.asarray(types, dtype=float)
        if deviations is None:
            top = 1.25 * max(inst.v_max, self.virtual_costs[i].upper)
            deviations = np.linspace(0.0, top, inst.grids.deviations)
        return deviation_gap(self, inst, self.profile(), i, np.asarray(deviations, dtype=float),
                             types)

    def cap_curve(self, i: int, size: int = 65) -> dict[str, Any]:
        """Cap of firm ``i`` along the diagonal of rivals' prices (CSV-friendly rows)."""
        grid = np.linspace(0.0, self.inst.v_max, size)
        s = np.tile(grid[:, None], (1, self.n))
        caps = price_cap(self.inst, i, s)
        return {"firm": i + 1, "s_other": grid.tolist(), "cap": caps.tolist()}


# ------------------------------------------------------------ equivalence
@dataclass(frozen=True)
class EquivalenceReport:
    entrant_mismatches: int
    entrant_draws: int
    allocation_gap: float
    transfer_gaps: tuple[float, ...]
    transfer_tolerances: tuple[float, ...]
    objective_gap: float
    objective_tolerance: float
    revenue_mode_gaps: tuple[float, ...]

    @property
    def entrants_ok(self) -> bool:
        return self.entrant_mismatches == 0

    @property
    def allocations_ok(self) -> bool:
        return self.allocation_gap <= 1e-9

    @property
    def transfers_ok(self) -> bool:
        return all(g <= t for g, t in zip(self.transfer_gaps, self.transfer_tolerances))

    @property
    def objective_ok(self) -> bool:
        return self.objective_gap <= self.objective_tolerance

    @property
    def passed(self) -> bool:
        return self.entrants_ok and self.allocations_ok and self.transfers_ok and self.objective_ok

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "entrants_ok": self.entrants_ok,
            "entrant_mismatches": self.entrant_mismatches,
            "entrant_draws": self.entrant_draws,
            "allocations_ok": self.allocations_ok,
            "allocation_gap": self.allocation_gap,
            "transfers_ok": self.transfers_ok,
            "transfer_gaps": list(self.transfer_gaps),
            "transfer_tolerances": list(self.transfer_tolerances),
            "objective_ok": self.objective_ok,
            "objective_gap": self.objective_gap,
            "objective_tolerance": self.objective_tolerance,
            "revenue_mode_gaps": list(self.revenue_mode_gaps),
        }


QUADRATURE_FLOOR = 1e-3
MC_FLOOR = 1e-6


def _shared_types(inst: MarketInstance, seed: int, draws: int) -> np.ndarray:
    if inst.n <= 2:
        side = 64 if inst.n == 2 else 1024
        axes = [check_grid(inst, j, side) for j in range(inst.n)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])
    rng = np.random.default_rng(spawn_seeds(seed, 3)[1])
    u = rng.random((draws, inst.n))
    return np.column_stack([f.dist.quantile(u[:, j]) for j, f in enumerate(inst.firms)])


def _fresh_rows(inst: MarketInstance, i: int, seed: int, cuts, draws: int) -> OpponentRows:
    """Opponent rows independent of the mechanism's own sample."""
    if inst.n <= 2:
        return opponent_rows(inst, i, seed, cuts, size=inst.grids.opponents + 101)
    return opponent_rows(inst, i, seed + 7919, cuts, size=draws)


def check_equivalence(inst: MarketInstance, mech: DirectMechanism, cap: PryceCap,
                      seed: int = 0, draws: int = 2000, types: int = 16) -> EquivalenceReport:
    """Compare the direct mechanism with the cap structure at virtual-cost pricing."""
    n = inst.n
    theta = _shared_types(inst, seed, draws)
    x = virtual_costs_at(inst, theta)
    direct = np.atleast_1d(mech.entrants(theta))
    # cap route: firm i is in iff its price is below its cap
    route = np.zeros(len(theta), dtype=np.int64)
    ambiguous = np.zeros(len(theta), dtype=bool)
    for i in range(n):
        caps = price_cap(inst, i, x)
        route |= (x[:, i] <= caps + CAP_TOL).astype(np.int64) << i
        ambiguous |= np.abs(x[:, i] - caps) <= CAP_TOL
    mismatches = int(np.sum((route != direct) & ~ambiguous))

    rng = np.random.default_rng(spawn_seeds(seed, 3)[2])
    v = inst.values.sample(rng, len(theta))
    alloc_direct = share_at(v, x, direct)
    alloc_cap = np.vstack([cap.allocation(v[k:k + 1], x[k]) for k in range(min(len(theta), 512))])
    alloc_gap = float(np.max(np.abs(alloc_direct[:len(alloc_cap)] - alloc_cap))) if len(alloc_cap) else 0.0

    profile = cap.profile()
    cuts = [cap.type_breakpoints(j) for j in range(n)]
    interim_mode = PryceCap(mech, "interim", cap.caps, cap.lump_sums, cap.off_range)
    interim_mode._memo = cap._memo
    gaps, tols, mode_gaps = [], [], []
    for i in range(n):
        tab = mech.tables[i]
        idx = np.unique(np.linspace(0, len(tab.theta) - 1, types).astype(int))
        grid = tab.theta[idx]
        opp = _fresh_rows(inst, i, seed, cuts, draws)
        k, m = len(grid), len(opp.weights)
        th = np.tile(opp.thetas, (k, 1))
        th[:, i] = np.repeat(grid, m)
        strategies = [profile(j, th[:, j]) for j in range(n)]
        rev = cap.outcome(strategies, firms=[i]).revenue[:, i].reshape(k, m)
        fresh = rev @ opp.weights
        target = tab.transfer[idx]
        if opp.exact:
            tol = np.full(k, QUADRATURE_FLOOR * inst.scale)
        else:
            se_fresh = rev.std(axis=1, ddof=1) / np.sqrt(m)
            masks, q = mech._nodes[i]
            row_t = tab.theta[:, None] * q[:, :, 0] + mech._row_profit[i]
            mw = len(mech.opponents[i].weights)
            se_mech = row_t[idx].std(axis=1, ddof=1) / np.sqrt(mw)
            tol = 3.0 * np.sqrt(se_fresh**2 + se_mech**2) + MC_FLOOR
        diff = np.abs(fresh - target)
        worst = int(np.argmax(diff / tol))
        gaps.append(float(diff[worst]))
        tols.append(float(tol[worst]))
        other = interim_mode.outcome(strategies, firms=[i]).revenue[:, i].reshape(k, m) @ opp.weights
        mode_gaps.append(float(np.max(np.abs(other - fresh))))

    report = evaluate(cap, inst, profile, seed=seed)
    obj_gap = abs(report.weighted_objective - mech.objective.weighted_objective)
    if inst.n <= 2:
        obj_tol = QUADRATURE_FLOOR * inst.scale
    else:
        obj_tol = 3.0 * float(np.hypot(report.objective_se, mech.objective.standard_error)) + MC_FLOOR
    return EquivalenceReport(mismatches, len(theta), alloc_gap, tuple(gaps), tuple(tols),
                             float(obj_gap), float(obj_tol), tuple(mode_gaps))


# ---------------------------------------------------------- cap threshold property
@dataclass(frozen=True)
class Prop1Report:
    samples: int
    ordering_violations: int
    bounds: CapBounds
    standalone_root: float
    bounds_ok: bool
    monotone_violations: int
    exclusion_violations: int

    @property
    def passed(self) -> bool:
        return (self.ordering_violations == 0 and self.bounds_ok
                and self.monotone_violations == 0 and self.exclusion_violations == 0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "samples": self.samples,
            "ordering_violations": self.ordering_violations,
            "bounds": [self.bounds.lower, self.bounds.upper],
            "standalone_root": self.standalone_root,
            "bounds_ok": self.bounds_ok,
            "monotone_violations": self.monotone_violations,
            "exclusion_violations": self.exclusion_violations,
        }


def symmetric_hypotheses(inst: MarketInstance) -> bool:
    """Identical value marginals and a common fixed-cost scale."""
    vals = inst.values
    if vals.mode not in ("independent", "comonotone"):
        return False
    first = vals.marginal(0)
    same = all(vals.marginal(i) == first for i in range(inst.n))
    return same and bool(np.allclose(inst.kappa, inst.kappa[0]))


def prop1_check(inst: MarketInstance, samples: int = 1000, seed: int = 0,
                tol: float = CAP_TOL) -> Prop1Report:
    """Cap ordering, bounds, monotonicity and exclusion on sampled prices."""
    if not symmetric_hypotheses(inst):
        raise ValueError("requires identical value marginals and a common kappa")
    n = inst.n
    rng = np.random.default_rng(spawn_seeds(seed, 4)[3])
    s = rng.uniform(0.0, inst.v_max, (samples, n))
    if n >= 2:
        # include exact ties so the symmetric case is exercised
        tie = rng.random(samples) < 0.1
        s[tie, 1] = s[tie, 0]
    caps = np.column_stack([price_cap(inst, i, s) for i in range(n)])

    violations = 0
    for i in range(n):
        for j in range(i + 1, n):
            ds = s[:, i] - s[:, j]
            dp = caps[:, i] - caps[:, j]
            weak = ds * dp > tol * (np.abs(ds) + 1.0)          # price above rival, cap above rival
            strict = (dp < -tol) & (ds <= 0)                   # lower cap without a higher price
            equal = (ds == 0) & (np.abs(dp) > tol)
            violations += int(np.sum(weak | strict | equal))

    lower = price_cap(inst, 0, np.zeros(n))
    upper = price_cap(inst, 0, np.full(n, inst.v_max))
    root = standalone_price(inst, 0)
    finite = np.isfinite(lower) and np.isfinite(upper)
    bounds = CapBounds(max(0.0, lower), upper) if finite and lower <= upper else CapBounds(0.0, 0.0)
    bounds_ok = bool(finite and bounds.contains(caps, 10 * tol) and upper <= root + 1e-3)

    monotone = 0
    for i in range(n):
        base = s.copy()
        bumped = s + rng.uniform(0.0, 0.2 * inst.v_max, s.shape)
        bumped = np.minimum(bumped, inst.v_max)
        lo = price_cap(inst, i, base)
        hi = price_cap(inst, i, bumped)
        monotone += int(np.sum(hi < lo - tol))

    excluded = 0
    beyond = s.copy()
    beyond[:, 0] = rng.uniform(min(upper + 1e-6, inst.v_max), inst.v_max, samples)
    members = np.atleast_1d(select_entrants(inst, beyond))
    excluded = int(np.sum(((members & 1) != 0) & (beyond[:, 0] > upper + tol)))
    return Prop1Report(samples, violations, bounds, float(root), bounds_ok, monotone, excluded)


def region_map(inst: MarketInstance, resolution: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Admitted-set bitmask at the centers of a square price grid (two firms)."""
    if inst.n != 2:
        raise ValueError("region maps need exactly two firms")
    centers = (np.arange(resolution) + 0.5) / resolution * inst.v_max
    s1, s2 = np.meshgrid(centers, centers, indexing="ij")
    prices = np.column_stack([s1.ravel(), s2.ravel()])
    masks = np.atleast_1d(select_entrants(inst, prices))
    return prices, masks.reshape(resolution, resolution)


def downward_closed(masks: np.ndarray) -> bool:
    """Each firm's membership is monotone (in, then out) along its own price axis."""
    for i in range(masks.ndim):
        bit = ((masks >> i) & 1).astype(int)
        steps = np.diff(np.moveaxis(bit, i, -1), axis=-1)
        if np.any(steps > 0):
            return False
    return True

