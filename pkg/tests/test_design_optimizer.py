import math

import numpy as np
import pytest

from ammlab import design_optimizer
from ammlab.amm_pricing import PoolSpec
from ammlab.design_optimizer import (SWEEP_HEADER, SweepAxis, SweepPoint, apply_axis, efficient_allocation,
                                     evaluate_point, optimal_design, partner_volatility, refined_eta_values, sweep,
                                     sweep_eta_refined, sweep_with_optimal_eta)
from ammlab.dp_solver import SolverSettings
from ammlab.errors import DomainError, NumericalError
from ammlab.market_model import MarketParams, exchange_rate_volatility
from ammlab.portfolio import ConstraintSet


def _fake_evaluate(score, invests=lambda value, pool: True, fail=()):
    """Stand-in for evaluate_point that skips the solver."""
    def fake(params, pool, constraint, settings, value=float("nan"), partner=None):
        if value in fail:
            raise NumericalError(f"failed at {value}")
        return SweepPoint(value=value, expected_v0=score(value, params, pool), omega=(0.1, 0.4, 0.4),
                          consumption=0.01, invests=invests(value, pool), converged=True, iterations=1,
                          residual=0.0, partner=partner, eta=pool.eta)
    return fake


class TestPartnerVolatility:
    def test_recovers_calibrated_partner(self, baseline) -> None:
        partner = partner_volatility(baseline.sigma, baseline.sigma_a, baseline.rho, baseline.sigma_b)
        assert partner == pytest.approx(baseline.sigma_b, rel=1e-12)

    def test_keeps_exchange_rate_volatility(self, baseline) -> None:
        for sigma_a in (0.012, 0.02, 0.03):
            partner = partner_volatility(baseline.sigma, sigma_a, baseline.rho, baseline.sigma_b)
            assert exchange_rate_volatility(sigma_a, partner, baseline.rho) == pytest.approx(baseline.sigma)

    def test_unreachable_target(self) -> None:
        with pytest.raises(DomainError, match="No partner volatility"):
            partner_volatility(0.001, 0.02, 0.0, 0.02)


class TestApplyAxis:
    def test_design_axes_change_pool(self, baseline, pool) -> None:
        params, new_pool, partner = apply_axis(SweepAxis.F, 0.01, baseline, pool)
        assert params is baseline and new_pool.fee == 0.01 and partner is None
        assert apply_axis(SweepAxis.ETA, 0.3, baseline, pool)[1].eta == 0.3

    def test_fixed_sigma_axis(self, baseline, pool) -> None:
        params, _, partner = apply_axis(SweepAxis.SIGMA_B_FIXED, 0.02, baseline, pool)
        assert params.sigma_b == 0.02 and params.sigma_a == partner
        assert params.sigma == pytest.approx(baseline.sigma)

    def test_invalid_value(self, baseline, pool) -> None:
        with pytest.raises(DomainError, match="eta"):
            apply_axis(SweepAxis.ETA, 1.5, baseline, pool)

    def test_design_flag(self) -> None:
        assert SweepAxis("f").is_design and not SweepAxis("muA").is_design


class TestEfficientAllocation:
    def test_symmetric_assets_split_evenly(self) -> None:
        params = MarketParams(muA=0.0005, muB=0.0005, sigmaA=0.0199, sigmaB=0.0199)
        alloc = efficient_allocation(params, nodes_per_dim=5)
        assert alloc.ratio == pytest.approx(1.0, rel=1e-4)
        assert 0.0 < alloc.omega_hat_a + alloc.omega_hat_b < 1.0
        assert alloc.opportunity_gap >= -1e-12

    def test_losing_assets_not_held(self) -> None:
        params = MarketParams(sigmaA=0.0, sigmaB=0.0, muA=-0.001, muB=-0.001)
        alloc = efficient_allocation(params, nodes_per_dim=3)
        assert (alloc.omega_hat_a, alloc.omega_hat_b) == (pytest.approx(0.0, abs=1e-12), pytest.approx(0.0, abs=1e-12))
        assert alloc.certainty_equivalent == pytest.approx(params.r_f)
        assert alloc.opportunity_gap == pytest.approx(0.0, abs=1e-12)

    def test_pool_ratio_costs_something(self, baseline) -> None:
        alloc = efficient_allocation(baseline, ConstraintSet.NO_SHORT, 5, PoolSpec(eta=0.5))
        assert alloc.pool_ratio == 1.0
        assert alloc.opportunity_gap > 0.0
        assert set(alloc.to_dict()) >= {"omega_hat_a", "omega_hat_b", "ratio", "opportunity_gap"}


class TestSweep:
    def test_empty_values(self, fast_params, pool) -> None:
        with pytest.raises(DomainError, match="at least one value"):
            sweep(SweepAxis.MU_A, [], fast_params, pool)

    def test_single_real_point(self, fast_params, pool, small_settings) -> None:
        result = sweep("muA", [0.0005], fast_params, pool, ConstraintSet.NO_SHORT, small_settings, threads=1)
        assert result.argmax == 0.0005
        point = result.points[0]
        assert point.ok and point.residual < 1e-8
        assert math.isfinite(point.expected_v0)
        assert 0.0 < point.consumption < 1.0
        assert len(point.row()) == len(SWEEP_HEADER)

    def test_failures_are_flagged_and_ties_go_low(self, fast_params, pool, monkeypatch) -> None:
        monkeypatch.setattr(design_optimizer, "evaluate_point", _fake_evaluate(lambda v, p, q: 1.0, fail=(0.001,)))
        result = sweep(SweepAxis.MU_A, [0.002, 0.0, 0.001, 0.0], fast_params, pool, threads=2)
        assert [p.value for p in result.points] == [0.0, 0.001, 0.002]
        assert result.flagged == [0.001]
        assert "NumericalError" in result.points[1].error
        assert result.argmax == 0.0

    def test_design_axis_requires_investment(self, fast_params, pool, monkeypatch) -> None:
        fake = _fake_evaluate(lambda v, p, q: -v, invests=lambda v, q: v > 0.002)
        monkeypatch.setattr(design_optimizer, "evaluate_point", fake)
        result = sweep(SweepAxis.F, [0.001, 0.003, 0.005], fast_params, pool, threads=1)
        assert result.argmax == 0.003
        assert not result.design_irrelevant

    def test_eta_refinement(self, fast_params, pool, monkeypatch) -> None:
        monkeypatch.setattr(design_optimizer, "evaluate_point", _fake_evaluate(lambda v, p, q: -(q.eta - 0.33) ** 2))
        result = sweep_eta_refined(fast_params, pool, threads=1)
        assert result.argmax == pytest.approx(0.35)
        assert len(result.points) == len(design_optimizer.DEFAULT_ETAS) + 2

    def test_refined_values_stay_inside(self) -> None:
        assert refined_eta_values(0.5) == [0.45, 0.5, 0.55]
        assert refined_eta_values(0.04) == [0.04, 0.09]

    def test_optimal_eta_per_value(self, fast_params, pool, monkeypatch) -> None:
        def score(value, params, q):
            return -abs(q.eta - (0.3 if params.mu_a == 0.0 else 0.7))
        monkeypatch.setattr(design_optimizer, "evaluate_point", _fake_evaluate(score))
        out = sweep_with_optimal_eta(SweepAxis.MU_A, [0.001, 0.0], fast_params, pool, etas=(0.3, 0.5, 0.7), threads=1)
        assert [(p.value, p.eta_star) for p in out] == [(0.0, 0.3), (0.001, 0.7)]

    def test_optimal_eta_rejects_eta_axis(self, fast_params, pool) -> None:
        with pytest.raises(DomainError, match="eta axis"):
            sweep_with_optimal_eta(SweepAxis.ETA, [0.5], fast_params, pool)


class TestOptimalDesign:
    def test_no_traders_design_irrelevant(self, fast_params, small_settings) -> None:
        result = optimal_design(fast_params.with_updates(alpha=0.0), [0.005, 0.003], [0.5], ConstraintSet.NO_SHORT,
                                small_settings, threads=1)
        assert result.design_irrelevant
        assert not result.invests.any()
        np.testing.assert_array_equal(result.f_grid, [0.003, 0.005])
        assert result.f_star in (0.003, 0.005) and result.eta_star == 0.5
        assert len(result.rows()) == 2

    def test_surface_argmax(self, fast_params, monkeypatch) -> None:
        monkeypatch.setattr(design_optimizer, "evaluate_point",
                            _fake_evaluate(lambda v, p, q: -(q.fee - 0.003) ** 2 - (q.eta - 0.6) ** 2))
        result = optimal_design(fast_params, [0.001, 0.003, 0.01], [0.4, 0.6], threads=1)
        assert (result.f_star, result.eta_star) == (0.003, 0.6)
        assert result.expected_v0.shape == (3, 2)
        assert result.to_dict()["errors"] == {}

    def test_empty_grid(self, fast_params) -> None:
        with pytest.raises(DomainError, match="nonempty"):
            optimal_design(fast_params, [], [0.5])


DESK = SolverSettings(grid_size=21, tol=1e-8, max_iter=10_000, nodes_per_dim=5)
FEES = list(design_optimizer.DEFAULT_FEES)


def _is_unimodal(values) -> bool:
    peak = int(np.argmax(values))
    rising = np.diff(values[:peak + 1])
    falling = np.diff(values[peak:])
    return bool(np.all(rising >= -1e-12) and np.all(falling <= 1e-12))


def _fee_argmax_index(params, pool):
    result = sweep(SweepAxis.F, FEES, params, pool, ConstraintSet.NO_SHORT, DESK)
    assert not result.flagged
    return None if result.argmax is None else FEES.index(result.argmax)


def _nondecreasing(values) -> bool:
    return all(b >= a for a, b in zip(values, values[1:]))


@pytest.mark.slow
class TestDesignProperties:
    def test_utility_unimodal_in_fee(self, baseline, pool) -> None:
        result = sweep(SweepAxis.F, FEES, baseline, pool, ConstraintSet.NO_SHORT, DESK)
        assert not result.flagged
        assert _is_unimodal(np.array([p.expected_v0 for p in result.points]))

    def test_fee_rises_with_joint_volatility(self, baseline, pool) -> None:
        indices = []
        for scale in (0.5, 0.75, 1.0, 1.5):
            params = baseline.with_updates(sigma_a=scale * baseline.sigma_a, sigma_b=scale * baseline.sigma_b)
            indices.append(_fee_argmax_index(params, pool))
        assert None not in indices
        assert _nondecreasing(indices)

    def test_fee_insensitive_to_mean(self, baseline, pool) -> None:
        indices = [_fee_argmax_index(baseline.with_updates(mu_a=mu), pool) for mu in (0.0003, 0.0005, 0.0007)]
        found = [i for i in indices if i is not None]
        assert len(found) >= 2
        assert max(found) - min(found) <= 1

    def test_fee_insensitive_at_fixed_sigma(self, baseline, pool) -> None:
        indices = []
        for sigma_a in (0.012, 0.016, 0.0199):
            params, _, _ = apply_axis(SweepAxis.SIGMA_A_FIXED, sigma_a, baseline, pool)
            indices.append(_fee_argmax_index(params, pool))
        found = [i for i in indices if i is not None]
        assert len(found) >= 2
        assert max(found) - min(found) <= 1

    def test_eta_rises_with_mean(self, baseline, pool) -> None:
        out = sweep_with_optimal_eta(SweepAxis.MU_A, [0.0003, 0.0005, 0.0007], baseline, pool,
                                     ConstraintSet.NO_SHORT, DESK)
        etas = [p.eta_star for p in out if p.eta_star is not None]
        assert len(etas) >= 2
        assert _nondecreasing(etas)

    def test_short_sales_widen_participation(self, baseline, pool) -> None:
        values = [0.0, 0.0003, 0.0005, 0.0008, 0.0012]
        no_short = sweep(SweepAxis.MU_A, values, baseline, pool, ConstraintSet.NO_SHORT, DESK)
        short_ok = sweep(SweepAxis.MU_A, values, baseline, pool, ConstraintSet.SHORT_OK, DESK)
        assert {p.value for p in no_short.points if p.invests} <= {p.value for p in short_ok.points if p.invests}

    def test_no_traders_no_pool_share(self, baseline, pool) -> None:
        point = evaluate_point(baseline.with_updates(alpha=0.0), pool, ConstraintSet.NO_SHORT, DESK)
        assert point.ok
        assert point.omega[0] == pytest.approx(0.0, abs=1e-12)
        assert not point.invests
