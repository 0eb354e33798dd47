import math

import numpy as np
import pytest

from ammlab.amm_pricing import (CGMMM, CustomPricing, PoolSpec, TradeFractions, marginal_rate, no_trade_band,
                                optimal_trade_amounts, post_trade_deposit_factors, pricing_level, ratio_transition,
                                slippage, solve_trade_cgmmm, solve_trade_generic, trade_objective)
from ammlab.errors import DomainError, InvariantViolation, NumericalError, PricingFunctionError

TRADE_GRID = np.linspace(-1.0, 0.7, 10_000)


def _grid_best(belief_ratio, deposit_ratio, eta, f):
    """Best objective over d^A on a fixed grid, d^B pinned by the pricing level."""
    d_b = 1.0 - (1.0 - TRADE_GRID) ** (-eta / (1.0 - eta))
    return np.max(trade_objective(belief_ratio, deposit_ratio, TRADE_GRID, d_b, f))


class TestMarginalRate:
    @pytest.mark.parametrize("eta, ratio, expected", [(0.5, 1.0, 1.0), (0.5, 2.0, 0.5), (0.75, 1.0, 3.0)])
    def test_cgmmm_values(self, eta, ratio, expected) -> None:
        assert marginal_rate(CGMMM(eta), ratio) == pytest.approx(expected)

    def test_strictly_decreasing(self) -> None:
        rates = [marginal_rate(CGMMM(0.3), z) for z in np.geomspace(0.1, 10.0, 20)]
        assert all(a > b for a, b in zip(rates, rates[1:]))

    @pytest.mark.parametrize("ratio", [0.0, -1.0])
    def test_nonpositive_ratio_raises(self, ratio) -> None:
        with pytest.raises(DomainError, match="deposit_ratio"):
            marginal_rate(CGMMM(0.5), ratio)

    def test_eta_outside_unit_interval_raises(self) -> None:
        with pytest.raises(DomainError, match="eta"):
            CGMMM(1.0)


class TestNoTradeBand:
    def test_band(self) -> None:
        assert no_trade_band(0.005) == (pytest.approx(1 / 1.005), pytest.approx(1.005))

    def test_zero_fee_collapses(self) -> None:
        assert no_trade_band(0.0) == (1.0, 1.0)

    def test_negative_fee_raises(self) -> None:
        with pytest.raises(DomainError):
            no_trade_band(-0.001)


class TestSolveTradeCgmmm:
    @pytest.mark.parametrize("eta", [0.1, 0.5, 0.9])
    def test_inside_band_no_trade(self, eta) -> None:
        assert solve_trade_cgmmm(1.0, eta, 0.005).as_tuple() == (0.0, 0.0)

    def test_below_band(self) -> None:
        trade = solve_trade_cgmmm(0.9, 0.5, 0.005)
        q = 0.9 * 1.005
        assert trade.d_a == pytest.approx(1.0 - q ** 0.5)
        assert trade.d_b == pytest.approx(1.0 - q ** -0.5)
        assert trade.d_a == pytest.approx(0.0489, abs=1e-4)
        assert trade.d_b == pytest.approx(-0.0515, abs=1e-4)
        assert trade.withdrawn_asset == "A"

    def test_above_band(self) -> None:
        trade = solve_trade_cgmmm(1.2, 0.5, 0.005)
        q = 1.2 / 1.005
        assert trade.d_a == pytest.approx(1.0 - q ** 0.5)
        assert trade.d_b == pytest.approx(1.0 - q ** -0.5)
        assert trade.d_a < 0.0 < trade.d_b
        assert trade.withdrawn_asset == "B"

    @pytest.mark.parametrize("s", [0.0, -0.5])
    def test_nonpositive_ratio_raises(self, s) -> None:
        with pytest.raises(DomainError):
            solve_trade_cgmmm(s, 0.5, 0.005)

    def test_dominates_brute_force_grid(self) -> None:
        # Investor buying A at s=0.9: maximize the objective over d^A on a fine grid
        eta, f, s = 0.5, 0.005, 0.9
        trade = solve_trade_cgmmm(s, eta, f)
        e = eta / (1.0 - eta)
        belief_times_deposit = e / s
        d_a = np.linspace(1e-6, 0.2, 10_000)
        # Pricing-level constraint: (1-dA)^eta (1-dB)^(1-eta) = 1
        d_b = 1.0 - (1.0 - d_a) ** (-eta / (1.0 - eta))
        grid_best = np.max(trade_objective(belief_times_deposit, 1.0, d_a, d_b, f))
        ours = trade_objective(belief_times_deposit, 1.0, trade.d_a, trade.d_b, f)
        assert ours >= grid_best - 1e-6

    def test_pricing_level_rises_on_trade(self) -> None:
        pf = CGMMM(0.4)
        factor_a, factor_b = post_trade_deposit_factors(0.8, 0.4, 0.01)
        assert pricing_level(pf, factor_a, factor_b) > pricing_level(pf, 1.0, 1.0)


class TestSolveTradeGeneric:
    def test_inside_band_no_trade(self) -> None:
        pf = CGMMM(0.5).as_custom()
        assert solve_trade_generic(pf, 1.0, 1.0, 0.005).as_tuple() == (0.0, 0.0)

    def test_matches_closed_form(self) -> None:
        pf = CGMMM(0.5)
        s = marginal_rate(pf, 0.8) / 1.0
        generic = solve_trade_generic(pf.as_custom(), 1.0, 0.8, 0.005)
        closed = solve_trade_cgmmm(s, 0.5, 0.005)
        assert generic.d_a == pytest.approx(closed.d_a, abs=1e-8)
        assert generic.d_b == pytest.approx(closed.d_b, abs=1e-8)

    def test_random_agreement(self) -> None:
        rng = np.random.default_rng(7)
        for _ in range(1000):
            s = rng.uniform(0.5, 2.0)
            eta = rng.uniform(0.1, 0.9)
            f = rng.choice([0.0, 0.0005, 0.005, 0.01])
            pf = CGMMM(eta)
            # Deposit ratio 1 so the believed rate is G(1)/s
            belief = marginal_rate(pf, 1.0) / s
            generic = solve_trade_generic(pf.as_custom(), belief, 1.0, f)
            closed = solve_trade_cgmmm(s, eta, f)
            assert generic.d_a == pytest.approx(closed.d_a, abs=1e-8)
            assert generic.d_b == pytest.approx(closed.d_b, abs=1e-8)
            ours = trade_objective(belief, 1.0, closed.d_a, closed.d_b, f)
            assert ours >= _grid_best(belief, 1.0, eta, f) - 1e-6

    def test_generic_dominates_grid(self) -> None:
        pf = CGMMM(0.3)
        custom = pf.as_custom()
        rng = np.random.default_rng(11)
        for _ in range(200):
            deposit = rng.uniform(0.3, 3.0)
            belief = marginal_rate(pf, deposit) * rng.uniform(0.5, 2.0)
            f = rng.choice([0.0, 0.005, 0.01])
            trade = solve_trade_generic(custom, belief, deposit, f)
            ours = trade_objective(belief, deposit, trade.d_a, trade.d_b, f)
            assert ours >= _grid_best(belief, deposit, 0.3, f) - 1e-6

    def test_unbracketable_raises_with_interval(self) -> None:
        # Level undefined outside a bounded region, so the bracket search never sees a sign change
        pf = CustomPricing(level=lambda x, y: math.sqrt(x * y) if x * y < 1.1e5 else float("nan"),
                           marginal_rate=lambda z: 1.0 / z, name="truncated")
        with pytest.raises(NumericalError, match="bracket") as err:
            solve_trade_generic(pf, 1.0, 2e5, 0.005)
        assert err.value.interval is not None


class TestCustomPricing:
    def test_non_decreasing_rate_rejected(self) -> None:
        with pytest.raises(PricingFunctionError, match="strictly decreasing"):
            CustomPricing(level=lambda x, y: x + y, marginal_rate=lambda z: 1.0)

    def test_inconsistent_rate_rejected(self) -> None:
        with pytest.raises(PricingFunctionError):
            CustomPricing(level=lambda x, y: x * y, marginal_rate=lambda z: 2.0 / z)

    def test_inverse_marginal_rate(self) -> None:
        pf = CGMMM(0.3).as_custom()
        z = pf.inverse_marginal_rate(0.7)
        assert pf.marginal_rate(z) == pytest.approx(0.7, rel=1e-10)


class TestDepositFactorsAndTransition:
    def test_band_is_identity(self) -> None:
        assert post_trade_deposit_factors(1.0, 0.5, 0.005) == (1.0, 1.0)
        assert ratio_transition(1.002, 0.5, 0.005) == 1.002

    def test_below_band_factors(self) -> None:
        q = 0.9 * 1.005
        factor_a, factor_b = post_trade_deposit_factors(0.9, 0.5, 0.005)
        assert factor_a == pytest.approx(q ** 0.5)
        assert factor_b == pytest.approx(1.005 * q ** -0.5 - 0.005)

    def test_transition_below(self) -> None:
        h = ratio_transition(0.9, 0.5, 0.005)
        assert h == pytest.approx((1.0 + 0.005 * (1.0 - 0.9045 ** 0.5)) / 1.005)
        assert h == pytest.approx(0.99527, abs=1e-5)
        assert 1 / 1.005 < h < 1.005

    def test_transition_above(self) -> None:
        assert 1 / 1.005 < ratio_transition(2.0, 0.5, 0.005) < 1.005

    def test_transition_stays_in_band(self) -> None:
        rng = np.random.default_rng(0)
        for f in (0.0005, 0.005, 0.01):
            s = np.exp(rng.uniform(-3.0, 3.0, 100_000))
            h = ratio_transition(s, 0.3, f)
            assert np.all(h >= 1.0 / (1.0 + f)) and np.all(h <= 1.0 + f)

    def test_transition_matches_factor_ratio(self) -> None:
        s = np.array([0.7, 0.95, 1.3, 4.0])
        factor_a, factor_b = post_trade_deposit_factors(s, 0.6, 0.003)
        np.testing.assert_allclose(ratio_transition(s, 0.6, 0.003), s * factor_b / factor_a, rtol=1e-12)

    def test_nonpositive_raises(self) -> None:
        with pytest.raises(DomainError):
            ratio_transition(np.array([1.0, 0.0]), 0.5, 0.005)


class TestSlippage:
    def test_marginal_limit(self) -> None:
        assert slippage(CGMMM(0.5), 1e-8, "A") == pytest.approx(0.0, abs=1e-6)

    def test_half_weight_value(self) -> None:
        assert slippage(CGMMM(0.5), 0.1, "A") == pytest.approx(10.0 / 9.0 - 1.0)

    @pytest.mark.parametrize("side", ["A", "B"])
    def test_custom_matches_cgmmm(self, side) -> None:
        pf = CGMMM(0.3)
        assert slippage(pf.as_custom(), 0.05, side) == pytest.approx(slippage(pf, 0.05, side), rel=1e-6)

    def test_increasing_in_size(self) -> None:
        values = [slippage(CGMMM(0.7), d, "B") for d in (0.01, 0.05, 0.2)]
        assert values[0] < values[1] < values[2]

    @pytest.mark.parametrize("d", [0.0, 1.0, -0.1])
    def test_fraction_outside_unit_interval_raises(self, d) -> None:
        with pytest.raises(DomainError):
            slippage(CGMMM(0.5), d, "A")


class TestTradeFractions:
    def test_sign_pattern_enforced(self) -> None:
        with pytest.raises(InvariantViolation):
            TradeFractions(0.1, 0.1)

    def test_absolute_amounts(self) -> None:
        pf = CGMMM(0.5)
        amount_a, amount_b = optimal_trade_amounts(pf, 1.0, 1.0, 200.0, 100.0, 0.005)
        trade = solve_trade_cgmmm(marginal_rate(pf, 2.0), 0.5, 0.005)
        assert amount_a == pytest.approx(trade.d_a * 200.0)
        assert amount_b == pytest.approx(trade.d_b * 100.0)


class TestPoolSpec:
    def test_aliases_and_band(self) -> None:
        pool = PoolSpec(eta=0.25, f=0.01)
        assert pool.fee == 0.01
        assert pool.value_weight == pytest.approx(1.0 / 3.0)
        assert pool.band == (pytest.approx(1 / 1.01), pytest.approx(1.01))

    def test_with_updates_validates(self) -> None:
        with pytest.raises(ValueError):
            PoolSpec().with_updates(eta=1.5)
