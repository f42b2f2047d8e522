"""Acceptance criteria 1-7, each at its stated tolerance and runtime budget."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np
import pytest

from conftest import ROOT_TWO_MINUS_SQRT3
from test_ironing import FLAT_END, FLAT_START, cutoff_cumulative, hull_slopes
from prycecap.battery import battery, random_distribution, random_instance, symmetric_instance
from prycecap.cli import main
from prycecap.instance import symmetric_uniform
from prycecap.ironing import StepFunction, iron, majorization_gap
from prycecap.mechanism import DirectMechanism, check_grid, mechanism_schedule, verify_ic, verify_ir
from prycecap.probkit import ParetoWeight, Uniform
from prycecap.pryce_cap import QUADRATURE_FLOOR, PryceCap, check_equivalence, price_cap, prop1_check
from prycecap.zoo import (
    evaluate, make_monopoly, make_price_competition, make_promotional_sales, make_reverse_auction,
    monopoly_price_profile, truthful_profile,
)

UNIT = Uniform(0.0, 1.0)
OFF_DIAGONAL_READING = 0.11597
DIAGONAL_READING = 0.15220


def figure_instance():
    return symmetric_uniform(2, kappa=1.0)


# ---------------------------------------------------------------- criterion 1
def test_criterion_1_flat_cap(record_criterion):
    start = time.perf_counter()
    inst = figure_instance()
    rivals = np.linspace(0.28, 1.0, 73)
    s = np.column_stack([np.zeros_like(rivals), rivals])
    caps = price_cap(inst, 0, s)
    elapsed = time.perf_counter() - start
    err = float(np.max(np.abs(caps - ROOT_TWO_MINUS_SQRT3)))
    ok = err <= 5e-4 and elapsed <= 10.0
    record_criterion(1, ok, f"max |cap - 2+sqrt3| = {err:.2e} (tol 5e-4), {elapsed:.2f}s (limit 10s)")
    assert ok


# ---------------------------------------------------------------- criterion 2
class GridWelfare:
    """Subset welfare from the midpoint rule on a cells x cells value grid.

    Prefix sums make each evaluation O(cells log cells) while summing all
    cells**2 points exactly as the brute-force rule would.
    """

    def __init__(self, cells: int = 4000, kappa: float = 1.0):
        self.c = (np.arange(cells) + 0.5) / cells
        self.tail = np.concatenate([np.cumsum(self.c[::-1])[::-1], [0.0]])
        self.kappa = kappa

    def single(self, price: float) -> float:
        return float(np.mean(np.maximum(self.c - price, 0.0))) - self.kappa * price

    def joint(self, s1: float, s2: float) -> float:
        c, k = self.c, len(self.c)
        a = np.maximum(c - s1, 0.0)
        idx = np.searchsorted(c, a + s2, side="right")
        rows = a * idx + self.tail[idx] - (k - idx) * s2
        return float(rows.sum()) / k**2 - self.kappa * (s1 + s2)

    def best(self, s1: float, s2: float) -> int:
        # ties go to fewer firms, then the lower bitmask
        candidates = [(0.0, 0, 0), (self.single(s1), 1, 1), (self.single(s2), 1, 2),
                      (self.joint(s1, s2), 2, 3)]
        top = max(w for w, _, _ in candidates)
        return min((size, mask) for w, size, mask in candidates if w >= top - 1e-12)[1]


def boundary_cells(masks: np.ndarray) -> list[tuple[int, int]]:
    edge = np.zeros(masks.shape, dtype=bool)
    edge[1:, :] |= masks[1:, :] != masks[:-1, :]
    edge[:-1, :] |= masks[:-1, :] != masks[1:, :]
    edge[:, 1:] |= masks[:, 1:] != masks[:, :-1]
    edge[:, :-1] |= masks[:, :-1] != masks[:, 1:]
    return list(zip(*np.nonzero(edge)))


def own_price_downward_closed(masks: np.ndarray) -> bool:
    """Row index is firm 1's price, column index is firm 2's."""
    in1 = (masks & 1) == 1
    in2 = (masks & 2) == 2
    return bool(np.all(in1[1:, :] <= in1[:-1, :]) and np.all(in2[:, 1:] <= in2[:, :-1]))


def test_criterion_2_region_map(tmp_path, record_criterion):
    out = tmp_path / "regions.csv"
    config = tmp_path / "figure.json"
    config.write_text(
        '{"firms": [{"dist": {"family": "uniform"}, "weight": {"type": "full"}, "kappa": 1.0},'
        ' {"dist": {"family": "uniform"}, "weight": {"type": "full"}, "kappa": 1.0}],'
        ' "values": {"mode": "independent", "params": {"marginal": {"family": "uniform"}}}}')
    start = time.perf_counter()
    assert main(["regions", "--config", str(config), "--resolution", "512", "--out", str(out)]) == 0
    elapsed = time.perf_counter() - start

    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    res = 512
    s1 = np.array([float(r["s1"]) for r in rows]).reshape(res, res)
    s2 = np.array([float(r["s2"]) for r in rows]).reshape(res, res)
    masks = np.array([int(r["bitmask"]) for r in rows]).reshape(res, res)
    centers = s1[:, 0]
    assert np.allclose(s2[0], centers)

    regions = sorted(set(masks.ravel().tolist()))
    closed = own_price_downward_closed(masks)

    oracle = GridWelfare()
    mismatched = 0
    cells = boundary_cells(masks)
    for a, b in cells:
        want = oracle.best(centers[a], centers[b])
        near = masks[max(a - 1, 0):a + 2, max(b - 1, 0):b + 2]
        mismatched += int(want not in near)

    diagonal = np.array([masks[k, k] for k in range(res)])
    first_out = int(np.argmax(diagonal != 3))
    diag_map = 0.5 * (centers[first_out - 1] + centers[first_out])
    row = masks[:, 0]
    first_excluded = int(np.argmax((row & 1) == 0))
    off_map = 0.5 * (centers[first_excluded - 1] + centers[first_excluded])

    lo, hi = 0.0, 0.5
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if oracle.joint(mid, mid) >= oracle.single(mid) else (lo, mid)
    diag_oracle = lo

    ok = (regions == [0, 1, 2, 3] and closed and mismatched == 0
          and abs(diag_map - DIAGONAL_READING) <= 5e-3
          and abs(off_map - OFF_DIAGONAL_READING) <= 5e-3
          and abs(diag_map - diag_oracle) <= 1 / res
          and elapsed <= 300)
    record_criterion(2, ok, (
        f"regions {regions}, downward-closed {closed}, {mismatched}/{len(cells)} boundary cells "
        f"off the 4000^2 oracle; diagonal {diag_map:.5f} (oracle {diag_oracle:.5f}, "
        f"figure {DIAGONAL_READING}), off-diagonal {off_map:.5f} (figure {OFF_DIAGONAL_READING}), "
        f"{elapsed:.1f}s (limit 300s)"))
    assert ok


# ---------------------------------------------------------------- criterion 3
def random_weight(rng, dist):
    kind = rng.integers(5)
    if kind == 0:
        return ParetoWeight.full(dist)
    if kind == 1:
        return ParetoWeight.zero()
    if kind == 2:
        return ParetoWeight.scaled(dist, float(rng.uniform()))
    if kind == 3:
        return ParetoWeight.cutoff(dist, float(dist.quantile(rng.uniform(0.05, 0.95))))
    a, b = np.sort(dist.quantile(rng.uniform(0.05, 0.95, 2)))
    return ParetoWeight(((a, 0.0), (a, 0.3), (b, 0.6), (b, 1.0)), base=dist)


def random_step(rng, dist):
    cuts = np.unique(np.sort(dist.quantile(rng.uniform(0, 1, rng.integers(0, 5)))))
    levels = np.sort(rng.uniform(0, 2, len(cuts) + 1))[::-1]
    return StepFunction(tuple(cuts.tolist()), tuple(levels.tolist()))


def test_criterion_3_ironing(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(33)
    worst = np.inf
    for _ in range(500):
        dist = random_distribution(rng)
        weight = random_weight(rng, dist)
        vc = iron(dist, weight)
        for _ in range(10):
            lhs, rhs = majorization_gap(dist, weight, vc, random_step(rng, dist))
            worst = min(worst, lhs - rhs)

    vc = iron(UNIT, ParetoWeight.cutoff(UNIT, 0.5))
    (begin, end, value), = vc.flat_segments()
    q = np.linspace(0, 1, 1_000_001)
    knots, slopes = hull_slopes(q, cutoff_cumulative(q))
    flat = int(np.argmax(np.diff(knots)))
    oracle = (knots[flat], knots[flat + 1], slopes[flat])
    elapsed = time.perf_counter() - start
    errors = [abs(begin - oracle[0]), abs(end - oracle[1]), abs(value - oracle[2])]
    reported = [abs(begin - FLAT_START), abs(end - FLAT_END), abs(value - FLAT_END)]
    ok = worst >= -1e-6 and max(errors) <= 1e-3 and max(reported) <= 1e-3 and elapsed <= 120
    record_criterion(3, ok, (
        f"min(lhs - rhs) over 5000 cases = {worst:.2e} (tol -1e-6); flat segment "
        f"[{begin:.6f}, {end:.6f}] at {value:.6f}, max error vs 1e6 oracle {max(errors):.1e}; "
        f"{elapsed:.1f}s (limit 120s)"))
    assert ok


# ------------------------------------------------------------ criteria 4 and 5
@dataclass(frozen=True)
class BatteryResult:
    n: int
    build_seconds: float
    ic: float
    ir: float
    top: float
    monotone: bool
    equivalence: object
    best_response: float


@pytest.fixture(scope="module")
def battery_results():
    out = []
    for inst in battery(50):
        start = time.perf_counter()
        mech = DirectMechanism(inst)
        ic, ir, top = 0.0, np.inf, 0.0
        for i in range(inst.n):
            types = check_grid(inst, i, 64)
            schedule = mechanism_schedule(mech, i)
            ic = max(ic, verify_ic(schedule, types))
            ir = min(ir, verify_ir(schedule, types))
            top = max(top, abs(verify_ir(schedule, types[-1:])))
        monotone = all(bool(np.all(np.diff(t.quantity) <= 0)) for t in mech.tables)
        elapsed = time.perf_counter() - start
        cap = PryceCap(mech)
        eq = check_equivalence(inst, mech, cap)
        gap = max(cap.best_response_gap(i) for i in range(inst.n))
        out.append(BatteryResult(inst.n, elapsed, ic, ir, top, monotone, eq, gap))
    return out


def test_criterion_4_mechanism_validity(battery_results, record_criterion):
    bad = [k for k, r in enumerate(battery_results)
           if r.ic > 1e-3 or r.ir < -1e-9 or r.top > 1e-6 or not r.monotone]
    seconds = sum(r.build_seconds for r in battery_results)
    sizes = sorted({r.n for r in battery_results})
    ok = not bad and seconds <= 600 and sizes == [1, 2, 3]
    record_criterion(4, ok, (
        f"{len(battery_results) - len(bad)}/{len(battery_results)} instances pass "
        f"(max IC gain {max(r.ic for r in battery_results):.1e}, min IR "
        f"{min(r.ir for r in battery_results):.1e}, max top profit "
        f"{max(r.top for r in battery_results):.1e}); {seconds:.0f}s (limit 600s)"))
    assert ok, f"failing instances: {bad}"


def test_criterion_5_equivalence(battery_results, record_criterion):
    bad_eq = [k for k, r in enumerate(battery_results) if not r.equivalence.passed]
    bad_br = [k for k, r in enumerate(battery_results) if r.best_response > 1e-3]
    mismatches = sum(r.equivalence.entrant_mismatches for r in battery_results)
    ok = not bad_eq and not bad_br
    record_criterion(5, ok, (
        f"equivalence fails on {bad_eq or 'none'} ({mismatches} entrant mismatches); "
        f"max best-response gap {max(r.best_response for r in battery_results):.1e} "
        f"(tol 1e-3), over limit on {bad_br or 'none'}"))
    assert ok


# ---------------------------------------------------------------- criterion 6
def test_criterion_6_cap_ordering(record_criterion):
    rng = np.random.default_rng(66)
    instances = [figure_instance()] + [symmetric_instance(rng, n) for n in (2, 2, 3, 3)]
    reports = [prop1_check(inst, samples=1000) for inst in instances]
    ok = all(r.passed for r in reports)
    violations = sum(r.ordering_violations + r.monotone_violations for r in reports)
    slack = max(r.bounds.upper - r.standalone_root for r in reports)
    record_criterion(6, ok, (
        f"{sum(r.passed for r in reports)}/{len(reports)} symmetric instances pass, "
        f"{violations} ordering/monotonicity violations over 1000 samples each; "
        f"max(upper bound - standalone root) = {slack:.1e} (tol 1e-3)"))
    assert ok


# ---------------------------------------------------------------- criterion 7
def full_weights(inst):
    return inst.with_weights([ParetoWeight.full(f.dist) for f in inst.firms])


def comparison_rows(inst):
    mech = DirectMechanism(inst)
    eff = mech.objective
    structures = [
        (make_monopoly(inst), monopoly_price_profile(inst)),
        (make_price_competition(inst), None),
        (make_reverse_auction(inst), None),
        (make_promotional_sales(inst, [0.5 / inst.n] * inst.n), None),
    ]
    rows = []
    for structure, profile in structures:
        profile = truthful_profile(structure) if profile is None else profile
        rep = evaluate(structure, inst, profile)
        slack = 3.0 * float(np.hypot(rep.objective_se, eff.standard_error))
        slack += QUADRATURE_FLOOR * inst.scale
        rows.append((structure.name, eff.weighted_objective - rep.weighted_objective, slack))
    return rows


def test_criterion_7_efficiency_dominance(record_criterion):
    rng = np.random.default_rng(77)
    instances = [figure_instance()] + [full_weights(random_instance(rng, 1 + k % 3))
                                       for k in range(10)]
    failures = []
    closest = np.inf
    for k, inst in enumerate(instances):
        for name, margin, slack in comparison_rows(inst):
            closest = min(closest, margin)
            if margin < -slack:
                failures.append((k, name, margin))
    ok = not failures
    record_criterion(7, ok, (
        f"{len(instances)} instances x 4 structures, smallest margin of the efficient "
        f"objective {closest:.2e}; violations {failures or 'none'}"))
    assert ok


def test_dominance_of_non_equilibrium_profiles_needs_full_weight():
    """With profits discounted, pricing at cost can beat the efficient mechanism.

    The truthful profile is not an equilibrium and ignores participation, so
    the comparison in criterion 7 is only meaningful with full weights.
    """
    inst = symmetric_uniform(1, kappa=0.0, weight="zero")
    eff = DirectMechanism(inst).objective.weighted_objective
    structure = make_price_competition(inst)
    rep = evaluate(structure, inst, truthful_profile(structure))
    # pricing at cost hands consumers 1/6; the efficient mechanism must leave rents
    assert rep.weighted_objective == pytest.approx(1 / 6, abs=1e-6)
    assert rep.weighted_objective > eff + 0.05
