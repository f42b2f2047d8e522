"""Efficient direct mechanism.

Firms report types; the planner admits the subset of firms with the largest
expected virtual surplus, consumers buy from the admitted firm with the best
value net of virtual cost, and transfers follow the envelope formula with a
zero payment to the highest-cost type.

Interim quantities are averages over a fixed sample of opponent types
(common random numbers), so expected quantity curves are exactly
monotone given the sample. Integrals over a firm's own type split each grid
cell where the admitted set changes; the change point is found by
bisection, which keeps transfers accurate despite the jumps in quantity.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .instance import MarketInstance
from .ironing import type_nodes
from .probkit import stieltjes
from .probkit.quadrature import midpoints, spawn_seeds, stieltjes_weights
from .probkit.values import TIE_TOL

BISECT_STEPS = 40
_F, _S, _R, _GROSS, _VIRTUAL, _TOTAL = range(6)


def mask_bits(mask: int, n: int) -> np.ndarray:
    return np.array([(mask >> i) & 1 for i in range(n)], dtype=float)


def members(mask: int, n: int) -> set[int]:
    return {i for i in range(n) if (mask >> i) & 1}


def popcount(masks) -> np.ndarray:
    masks = np.asarray(masks, dtype=np.int64)
    out = np.zeros_like(masks)
    for b in range(16):
        out += (masks >> b) & 1
    return out


def subset_virtual_surplus(inst: MarketInstance, x, mask: int):
    """Expected best net surplus among ``mask`` minus scaled fixed costs."""
    x = np.asarray(x, dtype=float)
    gross = inst.values.max_surplus(x, mask, inst.integrator.order)
    return gross - np.sum(x * inst.kappa * mask_bits(mask, inst.n), axis=-1)


def surplus_table(inst: MarketInstance, x, masks=None, out=None) -> np.ndarray:
    """Virtual surplus of each subset (columns indexed by bitmask)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    size = 1 << inst.n
    if out is None:
        out = np.full((len(x), size), np.nan)
    for m in range(size) if masks is None else masks:
        out[:, m] = 0.0 if m == 0 else subset_virtual_surplus(inst, x, m)
    return out


def best_masks(table: np.ndarray, tol: float) -> np.ndarray:
    """Row-wise argmax over subsets; near ties go to fewer firms, then lower bitmask."""
    size = table.shape[1]
    best = np.max(table, axis=1, keepdims=True)
    cand = table >= best - tol
    ids = np.arange(size)
    key = popcount(ids) * size + ids
    return np.argmin(np.where(cand, key[None, :], np.iinfo(np.int64).max), axis=1)


def select_entrants(inst: MarketInstance, x, allowed=None):
    """Admitted set (bitmask) for virtual costs or prices ``x``.

    ``allowed`` optionally restricts each row to subsets of a bitmask.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    table = surplus_table(inst, x)
    if allowed is not None:
        allowed = np.broadcast_to(np.asarray(allowed, dtype=np.int64), (len(table),))
        ids = np.arange(table.shape[1])
        bad = (ids[None, :] & ~allowed[:, None]) != 0
        table = np.where(bad, -np.inf, table)
    out = best_masks(table, TIE_TOL * inst.scale)
    return int(out[0]) if single else out


def share_at(v, x, masks) -> np.ndarray:
    """Pointwise shares: equal split among active best-net-value firms with v_i >= x_i."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    x = np.broadcast_to(np.asarray(x, dtype=float), v.shape)
    n = v.shape[1]
    masks = np.broadcast_to(np.asarray(masks, dtype=np.int64), (len(v),))
    active = ((masks[:, None] >> np.arange(n)) & 1).astype(bool)
    net = np.where(active, v - x, -np.inf)
    best = net.max(axis=1, keepdims=True)
    win = active & (net >= best - TIE_TOL) & (net >= -TIE_TOL)
    count = win.sum(axis=1, keepdims=True)
    return np.where(count > 0, win / np.maximum(count, 1), 0.0)


def allocation_share(inst: MarketInstance, v, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    x = np.array([vc(t) for vc, t in zip(inst.virtual_costs, theta)])
    return share_at(v, x, select_entrants(inst, x))


def virtual_costs_at(inst: MarketInstance, theta) -> np.ndarray:
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    return np.column_stack([vc(theta[:, i]) for i, vc in enumerate(inst.virtual_costs)])


@dataclass(frozen=True)
class OpponentSample:
    """Opponent type profiles for one firm; own column is NaN in ``thetas``."""

    firm: int
    thetas: np.ndarray
    x: np.ndarray
    weights: np.ndarray
    exact: bool


def standalone_price(inst: MarketInstance, j: int, steps: int = 60) -> float:
    """Largest price at which firm ``j`` alone has nonnegative virtual surplus."""
    mask = 1 << j
    zero = np.zeros(inst.n)

    def gain(p):
        x = np.tile(zero, (len(p), 1))
        x[:, j] = p
        return subset_virtual_surplus(inst, x, mask)

    lo, hi = np.zeros(1), np.full(1, inst.v_max)
    if gain(hi)[0] >= 0:
        return float(np.inf)
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        ok = gain(mid) >= 0
        lo, hi = np.where(ok, mid, lo), np.where(ok, hi, mid)
    return float(lo[0])


def _composite_midpoints(cuts, total: int) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint rule on [0, 1] split at ``cuts`` with nodes spread by length."""
    edges = np.unique(np.clip(np.concatenate([[0.0, 1.0], np.asarray(cuts, dtype=float)]), 0, 1))
    lengths = np.diff(edges)
    counts = np.maximum(1, np.round(lengths * total).astype(int))
    pts, wts = [], []
    for a, length, c in zip(edges[:-1], lengths, counts):
        pts.append(a + length * (np.arange(c) + 0.5) / c)
        wts.append(np.full(c, length / c))
    return np.concatenate(pts), np.concatenate(wts)


def opponent_axis(inst: MarketInstance, j: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature over one opponent's type, split where its entry can jump."""
    dist = inst.firms[j].dist
    vc = inst.virtual_costs[j]
    cuts = [dist.cdf(a) for seg in vc.flat_segments() for a in seg[:2]]
    p = standalone_price(inst, j)
    if np.isfinite(p) and vc.lower < p <= vc.upper:
        cuts.append(dist.cdf(vc.inverse(p)))
    u, w = _composite_midpoints(cuts, size)
    return dist.quantile(u), w


def opponent_sample(inst: MarketInstance, i: int, seed: int = 0) -> OpponentSample:
    n = inst.n
    if n == 1:
        thetas = np.full((1, 1), np.nan)
        return OpponentSample(i, thetas, np.zeros((1, 1)), np.ones(1), True)
    if n == 2:
        j = 1 - i
        tj, w = opponent_axis(inst, j, inst.grids.opponents)
        thetas = np.full((len(tj), 2), np.nan)
        thetas[:, j] = tj
        exact = True
    else:
        rng = np.random.default_rng(spawn_seeds(seed, n)[i])
        u = rng.random((inst.grids.opponent_draws, n))
        thetas = np.column_stack([f.dist.quantile(u[:, j]) for j, f in enumerate(inst.firms)])
        thetas[:, i] = np.nan
        w = np.full(len(u), 1.0 / len(u))
        exact = False
    x = np.zeros_like(thetas)
    for j, vc in enumerate(inst.virtual_costs):
        if j != i:
            x[:, j] = vc(thetas[:, j])
    return OpponentSample(i, thetas, x, w, exact)


def type_grid(inst: MarketInstance, i: int, size: int | None = None) -> np.ndarray:
    """Refined quantile grid plus ironing endpoints and weight jumps."""
    f = inst.firms[i]
    size = inst.grids.types if size is None else size
    grid = type_nodes(f.dist, size - 1)
    extra = [a for seg in inst.virtual_costs[i].flat_segments() for a in seg[:2]]
    extra += list(f.weight.jump_points)
    extra = [t for t in extra if f.dist.lower < t < f.dist.upper]
    return np.unique(np.concatenate([grid, extra]))


class FirmKernel:
    """Per-firm evaluation against a fixed opponent sample."""

    def __init__(self, inst: MarketInstance, opp: OpponentSample, extended: bool = False):
        self.inst = inst
        self.opp = opp
        self.i = opp.firm
        self.extended = extended
        self.vc = inst.virtual_costs[self.i]
        size = 1 << inst.n
        self.with_i = [m for m in range(size) if (m >> self.i) & 1]
        without = [m for m in range(size) if not (m >> self.i) & 1]
        self.base = surplus_table(inst, opp.x, masks=without)
        self.tol = TIE_TOL * inst.scale

    def _rows(self, theta, rows):
        x = self.opp.x[rows].copy()
        x[:, self.i] = self.vc(theta)
        return x

    def masks(self, theta, rows, x=None) -> np.ndarray:
        x = self._rows(theta, rows) if x is None else x
        table = self.base[rows].copy()
        surplus_table(self.inst, x, masks=self.with_i, out=table)
        return best_masks(table, self.tol)

    def quantities(self, theta, rows, masks=None):
        """Per-row outcome quantities at own type ``theta`` (arrays of equal length)."""
        inst, i = self.inst, self.i
        x = self._rows(theta, rows)
        if masks is None:
            masks = self.masks(theta, rows, x)
        sales, gross = inst.values.shares_by_mask(x, masks, inst.integrator.order)
        entry = ((masks >> i) & 1).astype(float)
        cols = [entry * (sales[:, i] + inst.firms[i].kappa), entry * sales[:, i], entry]
        if self.extended:
            bits = ((masks[:, None] >> np.arange(inst.n)) & 1).astype(float)
            types = self.opp.thetas[rows].copy()
            types[:, i] = theta
            load = bits * (sales + inst.kappa)
            cols += [gross.sum(axis=1), np.sum(gross - x * sales, axis=1) - np.sum(bits * x * inst.kappa, axis=1),
                     gross.sum(axis=1) - np.sum(types * load, axis=1)]
        return masks, np.column_stack(cols)

    def locate(self, ta, tb, rows, ma):
        lo, hi = ta.copy(), tb.copy()
        for _ in range(BISECT_STEPS):
            mid = 0.5 * (lo + hi)
            same = self.masks(mid, rows) == ma
            lo = np.where(same, mid, lo)
            hi = np.where(same, hi, mid)
        return 0.5 * (lo + hi)

    def integrate(self, ta, tb, qa, qb, ma, mb, rows, measures):
        """Integrals of each quantity over ``[ta, tb]`` against each measure.

        Returns shape (R, len(measures), nq).
        """
        marks = [np.stack([m(ta), m(tb)], axis=1) for m in measures]
        out = np.stack([0.5 * (qa + qb) * (mk[:, 1] - mk[:, 0])[:, None] for mk in marks], axis=1)
        changed = ma != mb
        if not self.extended:
            changed &= (((ma | mb) >> self.i) & 1).astype(bool)
        idx = np.flatnonzero(changed)
        if len(idx) == 0:
            return out
        r = rows[idx]
        te = self.locate(ta[idx], tb[idx], r, ma[idx])
        _, q_left = self.quantities(te, r, ma[idx])
        _, q_right = self.quantities(te, r, mb[idx])
        for k, m in enumerate(measures):
            me = m(te)
            left = 0.5 * (qa[idx] + q_left) * (me - marks[k][idx, 0])[:, None]
            right = 0.5 * (q_right + qb[idx]) * (marks[k][idx, 1] - me)[:, None]
            out[idx, k] = left + right
        return out


@dataclass(frozen=True)
class FirmTable:
    theta: np.ndarray
    phi: np.ndarray
    quantity: np.ndarray
    sales: np.ndarray
    entry: np.ndarray
    profit: np.ndarray
    transfer: np.ndarray

    def to_dict(self) -> dict[str, Any]:
        return {
            "theta": self.theta.tolist(),
            "phi": self.phi.tolist(),
            "quantity": self.quantity.tolist(),
            "sales": self.sales.tolist(),
            "entry": self.entry.tolist(),
            "transfer": self.transfer.tolist(),
            "profit": self.profit.tolist(),
        }


@dataclass(frozen=True)
class ObjectiveReport:
    consumer_surplus: float
    weighted_profit: tuple[float, ...]
    expected_transfer: tuple[float, ...]
    weighted_objective: float
    standard_error: float
    virtual_surplus: float
    virtual_surplus_se: float
    total_surplus: float
    total_surplus_se: float
    entry_frequency: dict[int, float]

    def to_dict(self) -> dict[str, Any]:
        out = dict(self.__dict__)
        out["weighted_profit"] = list(self.weighted_profit)
        out["expected_transfer"] = list(self.expected_transfer)
        out["entry_frequency"] = {str(k): v for k, v in sorted(self.entry_frequency.items())}
        return out


def _mean_se(vals: np.ndarray, weights: np.ndarray, exact: bool) -> tuple[float, float]:
    mean = float(np.dot(weights, vals))
    if exact or len(vals) < 2:
        return mean, 0.0
    return mean, float(np.std(vals, ddof=1) / np.sqrt(len(vals)))


class DirectMechanism:
    """Tabulated efficient direct mechanism for a market instance."""

    def __init__(self, inst: MarketInstance, seed: int | None = None):
        self.inst = inst
        self.seed = inst.integrator.seed if seed is None else seed
        self.virtual_costs = inst.virtual_costs
        self.opponents = [opponent_sample(inst, i, self.seed) for i in range(inst.n)]
        self.kernels = [FirmKernel(inst, opp, extended=(i == 0 and inst.n <= 2))
                        for i, opp in enumerate(self.opponents)]
        self._nodes: list[tuple[np.ndarray, np.ndarray]] = []
        self._row_profit: list[np.ndarray] = []
        self._row_transfer: list[np.ndarray] = []
        self._profile_integrals: np.ndarray | None = None
        self.tables = [self._build(i) for i in range(inst.n)]
        self.objective = self._objective()

    # ---------------------------------------------------------------- tables
    def _measures(self, i, extended):
        g = self.inst.firms[i].dist.cdf
        ms = [lambda t: np.asarray(t, dtype=float), lambda t: t * g(t)]
        if extended:
            ms.append(g)
        return ms

    def _build(self, i: int) -> FirmTable:
        kern = self.kernels[i]
        opp = self.opponents[i]
        grid = type_grid(self.inst, i)
        m = len(opp.weights)
        rows = np.tile(np.arange(m), len(grid))
        theta = np.repeat(grid, m)
        masks, q = kern.quantities(theta, rows)
        masks = masks.reshape(len(grid), m)
        q = q.reshape(len(grid), m, -1)
        self._nodes.append((masks, q))
        cells = kern.integrate(theta[:-m], theta[m:], q[:-1].reshape(-1, q.shape[2]),
                               q[1:].reshape(-1, q.shape[2]), masks[:-1].ravel(),
                               masks[1:].ravel(), rows[:-m],
                               self._measures(i, kern.extended))
        cells = cells.reshape(len(grid) - 1, m, cells.shape[1], cells.shape[2])
        # per-row interim profit: integral of quantity from theta to the top type
        row_profit = np.zeros((len(grid), m))
        row_profit[:-1] = np.cumsum(cells[::-1, :, 0, _F], axis=0)[::-1]
        self._row_profit.append(row_profit)
        self._row_transfer.append(cells[:, :, 1, _F].sum(axis=0))
        if kern.extended:
            self._profile_integrals = np.einsum("j,kjq->q", opp.weights, cells[:, :, 2, :])
        w = opp.weights
        quantity = q[:, :, _F] @ w
        profit = row_profit @ w
        return FirmTable(grid, self.virtual_costs[i](grid), quantity, q[:, :, _S] @ w,
                         q[:, :, _R] @ w, profit, grid * quantity + profit)

    # ------------------------------------------------------- interim values
    def interim(self, i: int, theta) -> dict[str, np.ndarray]:
        """Fresh interim quantities at arbitrary own types."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        tab = self.tables[i]
        kern = self.kernels[i]
        w = self.opponents[i].weights
        m = len(w)
        grid = tab.theta
        theta = np.clip(theta, grid[0], grid[-1])
        k = np.clip(np.searchsorted(grid, theta, side="right") - 1, 0, len(grid) - 2)
        rows = np.tile(np.arange(m), len(theta))
        t_rep = np.repeat(theta, m)
        masks, q = kern.quantities(t_rep, rows)
        node_masks, node_q = self._nodes[i]
        nxt = np.repeat(k + 1, m)
        part = kern.integrate(t_rep, grid[nxt], q, node_q[nxt, rows], masks,
                              node_masks[nxt, rows], rows, self._measures(i, False)[:1])
        part = part[:, 0, _F].reshape(len(theta), m) @ w
        q = q.reshape(len(theta), m, -1)
        quantity = q[:, :, _F] @ w
        profit = part + tab.profit[k + 1]
        return {
            "quantity": quantity,
            "sales": q[:, :, _S] @ w,
            "entry": q[:, :, _R] @ w,
            "profit": profit,
            "transfer": theta * quantity + profit,
        }

    def expected_quantity(self, i: int, theta):
        return self.interim(i, theta)["quantity"]

    def transfer(self, i: int, theta):
        return self.interim(i, theta)["transfer"]

    def interim_profit(self, i: int, theta):
        return self.interim(i, theta)["profit"]

    def entrants(self, theta):
        return select_entrants(self.inst, virtual_costs_at(self.inst, theta))

    def allocation(self, v, theta):
        x = virtual_costs_at(self.inst, theta)
        return share_at(v, x, select_entrants(self.inst, x))

    # -------------------------------------------------------------- welfare
    def profile_sample(self) -> tuple[np.ndarray, np.ndarray]:
        """Monte Carlo type profiles used for welfare when N >= 3."""
        inst = self.inst
        rng = np.random.default_rng(spawn_seeds(self.seed, inst.n + 1)[inst.n])
        u = rng.random((inst.grids.profile_draws, inst.n))
        theta = np.column_stack([f.dist.quantile(u[:, j]) for j, f in enumerate(inst.firms)])
        return theta, np.full(len(u), 1.0 / len(u))

    def _objective(self) -> ObjectiveReport:
        inst = self.inst
        exact = inst.n <= 2
        weighted, transfers, var = [], [], 0.0
        for i, f in enumerate(inst.firms):
            opp = self.opponents[i]
            coef = stieltjes_weights(self.tables[i].theta, f.weight)
            row_weighted = coef @ self._row_profit[i]
            row_transfer = self._row_transfer[i]
            weighted.append(float(np.dot(opp.weights, row_weighted)))
            transfers.append(float(np.dot(opp.weights, row_transfer)))
            if not opp.exact:
                diff = row_transfer - row_weighted
                var += float(np.var(diff, ddof=1) / len(diff))
        if exact:
            gross, virtual, total = self._profile_integrals[[_GROSS, _VIRTUAL, _TOTAL]]
            gross_se = virtual_se = total_se = 0.0
            freq = self._entry_frequency_exact()
        else:
            theta, w = self.profile_sample()
            x = virtual_costs_at(inst, theta)
            masks = select_entrants(inst, x)
            sales, value = inst.values.shares_by_mask(x, masks, inst.integrator.order)
            bits = ((masks[:, None] >> np.arange(inst.n)) & 1).astype(float)
            g = value.sum(axis=1)
            vs = np.sum(value - x * sales, axis=1) - np.sum(bits * x * inst.kappa, axis=1)
            tot = g - np.sum(theta * bits * (sales + inst.kappa), axis=1)
            gross, gross_se = _mean_se(g, w, False)
            virtual, virtual_se = _mean_se(vs, w, False)
            total, total_se = _mean_se(tot, w, False)
            freq = {int(m): float(c) / len(masks) for m, c in zip(*np.unique(masks, return_counts=True))}
        consumer = float(gross) - sum(transfers)
        objective = consumer + sum(weighted)
        se = float(np.sqrt(gross_se**2 + var))
        return ObjectiveReport(consumer, tuple(weighted), tuple(transfers), objective, se,
                               float(virtual), virtual_se, float(total), total_se, freq)

    def _entry_frequency_exact(self) -> dict[int, float]:
        masks, _ = self._nodes[0]
        grid = self.tables[0].theta
        g = self.inst.firms[0].dist.cdf(grid)
        # node weights of the trapezoid rule in G
        dw = np.zeros(len(grid))
        dw[:-1] += 0.5 * np.diff(g)
        dw[1:] += 0.5 * np.diff(g)
        w = dw[:, None] * self.opponents[0].weights[None, :]
        out: dict[int, float] = {}
        for m in np.unique(masks):
            out[int(m)] = float(w[masks == m].sum())
        return out

    def report(self) -> dict[str, Any]:
        return {
            "firms": [t.to_dict() for t in self.tables],
            "virtual_costs": [vc.to_dict() for vc in self.virtual_costs],
            "objective": self.objective.to_dict(),
        }


# ------------------------------------------------------------ verification
@dataclass(frozen=True)
class InterimSchedule:
    """Interim quantity and transfer of one firm, linearly interpolated."""

    theta: np.ndarray
    quantity: np.ndarray
    transfer: np.ndarray

    def __call__(self, reports):
        return (np.interp(reports, self.theta, self.quantity),
                np.interp(reports, self.theta, self.transfer))


def _as_callable(schedule) -> Callable:
    if isinstance(schedule, InterimSchedule):
        return schedule
    quantity, transfer = schedule
    return lambda t: (quantity(t), transfer(t))


def verify_ic(schedule, types, reports=None) -> float:
    """Largest gain from misreporting over the grid (0 if none).

    ``schedule`` is an :class:`InterimSchedule` or a ``(quantity, transfer)``
    pair of callables.
    """
    fn = _as_callable(schedule)
    types = np.atleast_1d(np.asarray(types, dtype=float))
    reports = types if reports is None else np.atleast_1d(np.asarray(reports, dtype=float))
    qt, tt = fn(types)
    qr, tr = fn(reports)
    truthful = tt - types * qt
    lie = tr[None, :] - types[:, None] * qr[None, :]
    return float(max(0.0, np.max(lie - truthful[:, None])))


def verify_ir(schedule, types) -> float:
    """Smallest interim profit over the grid."""
    fn = _as_callable(schedule)
    types = np.atleast_1d(np.asarray(types, dtype=float))
    q, t = fn(types)
    return float(np.min(t - types * q))


def mechanism_schedule(mech: DirectMechanism, i: int):
    return (lambda t: mech.expected_quantity(i, t), lambda t: mech.transfer(i, t))


def check_grid(inst: MarketInstance, i: int, size: int = 64) -> np.ndarray:
    dist = inst.firms[i].dist
    grid = dist.quantile(np.linspace(0.0, 1.0, size))
    grid[0], grid[-1] = dist.lower, dist.upper
    return grid


def weighted_objective(inst: MarketInstance, consumer_surplus: float, grids, profits) -> float:
    """Consumer surplus plus Pareto-weighted interim profits."""
    total = float(consumer_surplus)
    for f, g, p in zip(inst.firms, grids, profits):
        total += stieltjes(g, p, f.weight)
    return total
