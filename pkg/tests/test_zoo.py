from __future__ import annotations

import numpy as np
import pytest

from conftest import single_firm
from prycecap.instance import Firm, MarketInstance, symmetric_uniform
from prycecap.probkit import ParetoWeight, Uniform, ValueModel
from prycecap.zoo import (
    OPT_OUT, AccommodatingEntrant, EntryDeterrenceSpec, PromotionalSalesSpec, StrategyProfile,
    deviation_gap, evaluate, inverse_demand, make_entry_deterrence, make_monopoly,
    make_price_competition, make_promotional_sales, make_quantity_competition,
    make_reverse_auction, monopoly_price_profile, opt_out_profile, truthful_profile,
)

UNIT = Uniform(0.0, 1.0)


@pytest.fixture(scope="module")
def free_duopoly():
    return symmetric_uniform(2, kappa=0.0)


def comonotone_duopoly():
    firms = tuple(Firm(UNIT, ParetoWeight.full(UNIT), 0.0) for _ in range(2))
    return MarketInstance(firms, ValueModel.comonotone(UNIT, 2))


def all_structures(inst):
    return [
        make_monopoly(inst),
        make_price_competition(inst),
        make_quantity_competition(inst),
        make_entry_deterrence(inst, EntryDeterrenceSpec.for_instance(inst, 16)),
        make_promotional_sales(inst, (0.3, 0.3)),
        make_reverse_auction(inst),
    ]


def column(x):
    return np.array([x], dtype=float)


class TestConstructors:
    def test_monopoly(self, monopolist):
        out = make_monopoly(monopolist).outcome([column(0.5)])
        assert out.sales[0, 0] == pytest.approx(0.5, abs=1e-12)
        assert out.revenue[0, 0] == pytest.approx(0.25, abs=1e-12)

    def test_reverse_auction_lowest_bid_wins(self, free_duopoly):
        out = make_reverse_auction(free_duopoly).outcome([column(0.2), column(0.3)])
        assert out.sales[0] == pytest.approx([0.8, 0.0], abs=1e-12)
        assert out.revenue[0] == pytest.approx([0.16, 0.0], abs=1e-12)

    def test_reverse_auction_tie_splits(self, free_duopoly):
        ra = make_reverse_auction(free_duopoly)
        assert ra.allocation([[0.9, 0.9]], [0.2, 0.2])[0] == pytest.approx([0.5, 0.5])
        out = ra.outcome([column(0.2), column(0.2)])
        assert out.sales[0] == pytest.approx([0.4, 0.4], abs=1e-12)

    def test_promotional_sales_split(self, free_duopoly):
        promo = make_promotional_sales(free_duopoly, (0.3, 0.3))
        assert promo.allocation([[0.8, 0.8]], [0.5, 0.6])[0] == pytest.approx([0.7, 0.3])

    def test_promotional_shares_must_fit(self, free_duopoly):
        with pytest.raises(ValueError, match="sum"):
            make_promotional_sales(free_duopoly, (0.6, 0.5))
        with pytest.raises(ValueError):
            PromotionalSalesSpec((-0.1, 0.2))
        with pytest.raises(ValueError):
            make_promotional_sales(free_duopoly, (0.3,))

    def test_price_competition_highest_surplus_wins(self, free_duopoly):
        pc = make_price_competition(free_duopoly)
        assert pc.allocation([[0.8, 0.9]], [0.3, 0.2])[0] == pytest.approx([0.0, 1.0])

    def test_entry_deterrence_reads_incumbent_price(self, free_duopoly):
        spec = EntryDeterrenceSpec(np.array([0.0, 0.5]))
        ed = make_entry_deterrence(free_duopoly, spec)
        # enter only when the incumbent prices at or above one half
        table = ed.tabulate(lambda g: g >= 0.5, lambda g: np.full_like(g, 0.4))
        low = ed.outcome([column(0.3), table[None]])
        high = ed.outcome([column(0.6), table[None]])
        assert low.entry[0].tolist() == [1.0, 0.0]
        assert high.entry[0].tolist() == [1.0, 1.0]

    def test_quantity_out_of_range(self, free_duopoly):
        with pytest.raises(ValueError):
            make_quantity_competition(free_duopoly).outcome([column(1.2), column(0.0)])


class TestOptOut:
    @pytest.mark.parametrize("k", range(6))
    def test_triple_zero(self, free_duopoly, k):
        structure = all_structures(free_duopoly)[k]
        rng = np.random.default_rng(k)
        for i in range(2):
            if structure.name == "monopoly" and i == 1:
                continue
            strategies = []
            for j in range(2):
                if j == i:
                    strategies.append(structure.opt_out(j, 20))
                elif structure.name == "entry-deterrence" and j > 0:
                    strategies.append(AccommodatingEntrant(16)(rng.uniform(0, 0.5, 20)))
                else:
                    strategies.append(rng.uniform(0, 0.5, 20))
            out = structure.outcome(strategies)
            assert np.all(out.entry[:, i] == 0)
            assert np.all(out.sales[:, i] == 0)
            assert np.all(out.revenue[:, i] == 0)

    def test_everyone_out_gives_nothing(self, free_duopoly):
        for structure in all_structures(free_duopoly):
            rep = evaluate(structure, free_duopoly, opt_out_profile(structure), grid_size=17)
            assert rep.consumer_surplus == 0.0
            assert all(np.all(p == 0) for p in rep.interim_profits)


class TestFeasibility:
    @pytest.mark.parametrize("k", range(6))
    def test_shares_sum_to_at_most_one(self, free_duopoly, k):
        structure = all_structures(free_duopoly)[k]
        rng = np.random.default_rng(10 + k)
        v = rng.uniform(0, 1, (200, 2))
        for _ in range(25):
            s = rng.uniform(0, 0.5, 2)
            if structure.name == "entry-deterrence":
                s = [s[0], AccommodatingEntrant(16)(s[1:])[0]]
            shares = structure.allocation(v, s)
            assert np.all(shares >= 0)
            assert np.all(shares.sum(axis=1) <= 1 + 1e-12)


class TestInverseDemand:
    def test_interior(self, free_duopoly):
        assert inverse_demand(free_duopoly, [0.18, 0.18])[0] == pytest.approx(0.4, abs=1e-6)

    def test_nothing_offered(self, free_duopoly):
        assert inverse_demand(free_duopoly, [0.0, 0.0])[0] == free_duopoly.v_max

    def test_oversupply(self, free_duopoly):
        assert inverse_demand(free_duopoly, [0.7, 0.6])[0] == 0.0

    def test_rescaling_equivalence(self, free_duopoly):
        """Quantities clear the market: outcomes match the direct allocation map."""
        qc = make_quantity_competition(free_duopoly)
        rng = np.random.default_rng(5)
        cells = 400
        c = (np.arange(cells) + 0.5) / cells
        v = np.column_stack([np.repeat(c, cells), np.tile(c, cells)])
        for _ in range(100):
            q = rng.uniform(0, 0.5, 2)
            out = qc.outcome([column(q[0]), column(q[1])])
            assert out.sales[0] == pytest.approx(q, abs=1e-9)
            direct = qc.allocation(v, q).mean(axis=0)
            assert direct == pytest.approx(q, abs=5e-3)


class TestEvaluate:
    def test_free_goods_give_consumers_everything(self):
        inst = comonotone_duopoly()
        rep = evaluate(make_price_competition(inst), inst, StrategyProfile.constant([0.0, 0.0]))
        assert rep.consumer_surplus == pytest.approx(0.5, abs=1e-6)
        # each firm serves half the market at zero price and bears cost theta / 2
        assert rep.weighted_profits == pytest.approx((-0.25, -0.25), abs=1e-6)
        assert rep.weighted_objective == pytest.approx(0.0, abs=1e-6)

    def test_monopoly_half_price(self, monopolist):
        rep = evaluate(make_monopoly(monopolist), monopolist, StrategyProfile.constant([0.5]))
        assert rep.consumer_surplus == pytest.approx(0.125, abs=1e-6)
        theta = rep.type_grids[0]
        assert rep.interim_profits[0] == pytest.approx(0.25 - 0.5 * theta, abs=1e-9)
        assert rep.expected_revenue[0] == pytest.approx(0.25, abs=1e-9)

    def test_monopoly_with_fixed_cost(self):
        inst = single_firm(kappa=0.2)
        rep = evaluate(make_monopoly(inst), inst, StrategyProfile.constant([0.5]))
        theta = rep.type_grids[0]
        assert rep.interim_profits[0] == pytest.approx(0.25 - theta * 0.7, abs=1e-9)

    def test_instance_mismatch(self, free_duopoly, monopolist):
        with pytest.raises(ValueError):
            evaluate(make_monopoly(monopolist), free_duopoly, StrategyProfile.constant([0.5]))

    def test_report_serializes(self, monopolist):
        rep = evaluate(make_monopoly(monopolist), monopolist, StrategyProfile.constant([0.5]),
                       grid_size=9)
        doc = rep.to_dict()
        assert doc["structure"] == "monopoly"
        assert len(doc["interim_profits"][0]["theta"]) == 9


class TestDeviationGap:
    def test_grid_optimal_monopoly(self, monopolist):
        profile = monopoly_price_profile(monopolist)
        devs = np.linspace(0, 1, 257)
        gap = deviation_gap(make_monopoly(monopolist), monopolist, profile, 0, devs)
        assert gap <= 1 / 512

    def test_opting_out_leaves_money_on_table(self, monopolist):
        structure = make_monopoly(monopolist)
        gap = deviation_gap(structure, monopolist, opt_out_profile(structure), 0,
                            np.linspace(0, 1, 33))
        assert gap > 0.1

    def test_pryce_cap_at_virtual_costs(self, duopoly, duopoly_cap):
        devs = np.linspace(0, duopoly.v_max, 128)
        for i in range(2):
            assert deviation_gap(duopoly_cap, duopoly, duopoly_cap.profile(), i, devs) <= 1e-3

    def test_truthful_entrants_in_entry_deterrence(self, free_duopoly):
        structure = make_entry_deterrence(free_duopoly, EntryDeterrenceSpec.for_instance(free_duopoly, 16))
        profile = truthful_profile(structure)
        rep = evaluate(structure, free_duopoly, profile, grid_size=17)
        assert rep.consumer_surplus > 0
        assert all(np.all(p >= -1e-12) for p in rep.interim_profits)

    def test_opt_out_constant(self, free_duopoly):
        profile = StrategyProfile.opt_out(2)
        assert np.isnan(profile(0, np.array([0.2]))[0])
        assert np.isnan(OPT_OUT)
