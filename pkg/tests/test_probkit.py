from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prycecap.battery import random_distribution
from prycecap.probkit import (
    FallbackToMonteCarlo, Integrator, ParetoWeight, Power, Tabulated, Uniform, ValueModel,
    distribution_from_dict, expect, expect_max_surplus, expect_with_error, stieltjes,
)

UNIT = Uniform(0.0, 1.0)


def grid_oracle_max(cells: int = 4000) -> float:
    """Midpoint rule for E[max(v1, v2)] on the unit square."""
    c = (np.arange(cells) + 0.5) / cells
    total = 0.0
    for row in np.array_split(c, 8):
        total += np.maximum(row[:, None], c[None, :]).sum()
    return total / cells**2


class TestDistributions:
    @pytest.mark.parametrize("dist", [
        Uniform(0.2, 1.3),
        Power(0.0, 1.0, 0.5),
        Power(0.1, 0.9, 3.0),
        Tabulated((0.0, 0.3, 0.5, 1.0), (0.0, 0.2, 0.7, 1.0)),
    ])
    def test_quantile_inverts_cdf(self, dist):
        theta = np.linspace(dist.lower, dist.upper, 1000)
        assert np.max(np.abs(dist.quantile(dist.cdf(theta)) - theta)) <= 1e-10
        assert dist.cdf(dist.lower) == pytest.approx(0.0, abs=1e-15)
        assert dist.cdf(dist.upper) == pytest.approx(1.0, abs=1e-15)

    def test_cdf_strictly_increasing(self):
        dist = Tabulated((0.0, 0.3, 0.5, 1.0), (0.0, 0.2, 0.7, 1.0))
        assert np.all(np.diff(dist.cdf(np.linspace(0, 1, 1000))) > 0)

    @pytest.mark.parametrize("bad", [(-0.1, 1.0), (1.0, 1.0), (0.0, np.inf)])
    def test_rejects_bad_support(self, bad):
        with pytest.raises(ValueError):
            Uniform(*bad)

    def test_tabulated_rejects_atoms(self):
        with pytest.raises(ValueError):
            Tabulated((0.0, 0.5, 1.0), (0.0, 0.5, 0.5))

    def test_from_dict_round_trip(self):
        for dist in (UNIT, Power(0.0, 2.0, 1.5), Tabulated((0.0, 0.4, 1.0), (0.0, 0.3, 1.0))):
            assert distribution_from_dict(dist.to_dict()) == dist


class TestParetoWeight:
    def test_full_weight_equals_cdf(self):
        w = ParetoWeight.full(UNIT)
        theta = np.linspace(0, 1, 11)
        assert w(theta) == pytest.approx(theta)

    def test_right_continuous_jump(self):
        w = ParetoWeight.cutoff(UNIT, 0.5)
        assert w(0.5) == pytest.approx(0.5)
        assert w.left(0.5) == pytest.approx(0.0)
        assert w.jump_points.tolist() == [0.5]

    def test_weight_above_cdf_rejected(self):
        w = ParetoWeight(((0.0, 0.5),))
        with pytest.raises(ValueError, match="exceeds"):
            w.validate(UNIT)

    def test_decreasing_knots_rejected(self):
        with pytest.raises(ValueError):
            ParetoWeight(((0.0, 0.5), (1.0, 0.2)))


class TestExpect:
    def test_max_of_two_uniforms_matches_grid_oracle(self):
        model = ValueModel.independent([UNIT, UNIT])
        oracle = grid_oracle_max()
        assert oracle == pytest.approx(2 / 3, abs=1e-6)
        assert expect(model, lambda v: v.max(axis=1)) == pytest.approx(oracle, abs=1e-6)

    def test_zero_integrand(self):
        for model in (ValueModel.independent([UNIT, UNIT]), ValueModel.comonotone(UNIT, 3)):
            assert expect(model, lambda v: np.zeros(len(v))) == 0.0

    def test_comonotone_reduces_to_one_dimension(self):
        model = ValueModel.comonotone(UNIT, 2)
        got = expect(model, lambda v: np.maximum(v[:, 0] - 0.5, 0.0))
        assert got == pytest.approx(0.125, abs=1e-8)

    def test_constant_one_integrates_to_one(self):
        for model in (ValueModel.independent([UNIT, Power(0, 1, 2.0)]),
                      ValueModel.antithetic(UNIT), ValueModel.comonotone(UNIT, 4)):
            assert expect(model, lambda v: np.ones(len(v))) == pytest.approx(1.0, abs=1e-12)

    def test_antithetic_values_sum_to_vmax(self):
        model = ValueModel.antithetic(Uniform(0.0, 2.0))
        v = model.sample(np.random.default_rng(0), 1000)
        assert np.allclose(v.sum(axis=1), 2.0)

    def test_unsupported_quadrature_signals_fallback(self):
        model = ValueModel.independent([UNIT] * 3)
        with pytest.warns(FallbackToMonteCarlo, match="fallback to monte-carlo"):
            est, se = expect_with_error(model, lambda v: v.sum(axis=1),
                                        Integrator(method="quadrature", draws=5000))
        assert se > 0
        assert est == pytest.approx(1.5, abs=5 * se)

    def test_monte_carlo_is_bit_reproducible(self):
        model = ValueModel.independent([UNIT] * 3)
        integ = Integrator(method="monte-carlo", draws=10_000, seed=7)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            a = expect(model, lambda v: v.max(axis=1), integ)
            b = expect(model, lambda v: v.max(axis=1), integ)
        assert a == b


class TestExpectMaxSurplus:
    def test_two_uniforms_at_zero(self):
        model = ValueModel.independent([UNIT, UNIT])
        assert expect_max_surplus(model, [0.0, 0.0], [0, 1]) == pytest.approx(2 / 3, abs=1e-6)

    def test_empty_subset(self):
        model = ValueModel.independent([UNIT, UNIT])
        assert expect_max_surplus(model, [0.3, 0.1], []) == 0.0

    def test_single_firm_tail(self):
        model = ValueModel.independent([UNIT, UNIT])
        for other in (0.0, 0.4, 0.99):
            assert expect_max_surplus(model, [0.5, other], [0]) == pytest.approx(0.125, abs=1e-8)

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_tail_identity_agrees_with_monte_carlo(self, n):
        rng = np.random.default_rng(100 + n)
        for _ in range(17):
            v_max = rng.uniform(1.0, 2.0)
            model = ValueModel.independent(
                [random_distribution(rng, 0.0, v_max) for _ in range(n)], v_max)
            x = rng.uniform(0.0, 0.8 * v_max, n)
            subset = [j for j in range(n) if rng.random() < 0.7] or [0]
            exact = expect_max_surplus(model, x, subset)
            draws = model.sample(rng, 40_000)
            vals = np.maximum((draws[:, subset] - x[subset]).max(axis=1), 0.0)
            se = vals.std(ddof=1) / np.sqrt(len(vals))
            assert abs(exact - vals.mean()) <= 4 * se + 1e-12


@st.composite
def surplus_case(draw):
    n = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    v_max = rng.uniform(1.0, 2.0)
    model = ValueModel.independent([random_distribution(rng, 0.0, v_max) for _ in range(n)], v_max)
    x = rng.uniform(0.0, v_max, n)
    mask = draw(st.integers(1, (1 << n) - 1))
    return model, x, mask


class TestSurplusMonotonicity:
    @settings(max_examples=60, deadline=None)
    @given(surplus_case(), st.floats(0.0, 0.5), st.integers(0, 2))
    def test_nonincreasing_in_offsets(self, case, bump, j):
        model, x, mask = case
        j = j % model.dimension
        y = x.copy()
        y[j] += bump
        assert model.max_surplus(y, mask) <= model.max_surplus(x, mask) + 1e-12

    @settings(max_examples=60, deadline=None)
    @given(surplus_case(), st.integers(0, 7))
    def test_nondecreasing_in_subset(self, case, extra):
        model, x, mask = case
        bigger = mask | (extra & ((1 << model.dimension) - 1))
        assert model.max_surplus(x, bigger) >= model.max_surplus(x, mask) - 1e-12


class TestStieltjes:
    def test_constant_curve_gives_total_mass(self):
        w = ParetoWeight.cutoff(UNIT, 0.5)
        grid = np.unique(np.concatenate([np.linspace(0, 1, 101), [0.5]]))
        assert stieltjes(grid, np.ones_like(grid), w) == pytest.approx(1.0, abs=1e-12)

    def test_point_mass(self):
        w = ParetoWeight(((0.5, 0.0), (0.5, 0.4)))
        grid = np.linspace(0.0, 1.0, 11)
        assert stieltjes(grid, grid, w) == pytest.approx(0.2, abs=1e-12)

    def test_linear_weight(self):
        w = ParetoWeight(((0.0, 0.0), (1.0, 1.0)))
        grid = np.linspace(0.0, 1.0, 1001)
        assert stieltjes(grid, grid, w) == pytest.approx(0.5, abs=1e-8)

    def test_missing_jump_knot_is_an_error(self):
        w = ParetoWeight(((0.55, 0.0), (0.55, 0.4)))
        with pytest.raises(ValueError, match="missing"):
            stieltjes(np.linspace(0.0, 1.0, 11), np.ones(11), w)
