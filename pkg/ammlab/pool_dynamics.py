"""One period of pool evolution under CGMMM, in exchange-ratio space.

A period runs: (2) a liquidity trader arrives with probability alpha and
trades on a noisy belief, (3) an arbitrageur restores the ratio to the band,
(4) fundamental prices move by (R^A, R^B), (5) an arbitrageur trades again.
Only the ratio s and value multipliers are tracked; with CGMMM the dollar split
of the pool is e : s with e = eta/(1-eta), so no deposit levels are needed.
"""
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Tuple

import numpy as np

from ammlab.amm_pricing import PoolSpec, cgmmm_deposit_factors, cgmmm_trade_fractions, cgmmm_transition
from ammlab.errors import DomainError

if TYPE_CHECKING:
    from ammlab.market_model import DisturbanceNode, MarketParams, QuadratureRule

logger = logging.getLogger(__name__)

NET_PROFIT_NODES = 41


def state_grid(f: float, grid_size: int = 101) -> np.ndarray:
    """Uniform grid whose endpoints are exactly the band endpoints."""
    if f == 0.0:
        return np.ones(1)
    if grid_size < 2:
        raise DomainError(f"grid_size must be at least 2, got {grid_size}")
    return np.linspace(1.0 / (1.0 + f), 1.0 + f, grid_size)


def _check_in_band(s: float, pool: PoolSpec, name: str = "s") -> None:
    lo, hi = pool.band
    if not lo <= s <= hi:
        error_msg = f"{name}={s!r} lies outside the no-trade band [{lo}, {hi}]"
        logger.error(error_msg)
        raise DomainError(error_msg)


def _value_factor(ratio: np.ndarray, e: float, eta: float, f: float) -> Tuple[np.ndarray, np.ndarray]:
    """Pool value multiplier and new ratio after the optimal trade at `ratio`."""
    factor_a, factor_b = cgmmm_deposit_factors(ratio, eta, f)
    return (e * factor_a + ratio * factor_b) / (e + ratio), ratio * factor_b / factor_a


def evolve(s, xi, belief, ra, rb, eta: float, f: float) -> Dict[str, np.ndarray]:
    """Array form of step_period; arguments broadcast against each other."""
    e = eta / (1.0 - eta)
    s, xi, belief, ra, rb = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (s, xi, belief, ra, rb)))
    arrived = xi > 0.5

    # Step 2: the trader sees the ratio s/I; values are taken at true prices
    seen = s / belief
    factor_a, factor_b = cgmmm_deposit_factors(seen, eta, f)
    r1 = np.where(arrived, (e * factor_a + s * factor_b) / (e + s), 1.0)
    s1 = np.where(arrived, s * factor_b / factor_a, s)
    d_a, d_b = cgmmm_trade_fractions(seen, eta, f)
    paid = np.where(d_a < 0.0, -d_a * e, 0.0) + np.where(d_b < 0.0, -d_b * s, 0.0)
    fee = np.where(arrived, f * paid / (e + s), 0.0)

    # Step 3
    r2, _ = _value_factor(s1, e, eta, f)
    s2 = cgmmm_transition(s1, eta, f)

    # Step 4
    r3 = (e * ra + s2 * rb) / (e + s2)
    shocked = s2 * rb / ra

    # Step 5
    r4, _ = _value_factor(shocked, e, eta, f)
    s3 = cgmmm_transition(shocked, eta, f)

    return {"s1": s1, "s2": s2, "s3": s3, "r1": r1, "r2": r2, "r3": r3, "r4": r4,
            "pool_return": r1 * r2 * r3 * r4, "fee": fee, "arb_loss": r3 * (1.0 - r4), "rb": rb}


@dataclass(frozen=True)
class IntermediateRatios:
    s0: float
    s1: float
    s2: float
    s3: float


@dataclass(frozen=True)
class PeriodOutcome:
    s_next: float
    rm_over_rb: float
    components: Tuple[float, float, float, float]
    fee_revenue_frac: float
    arb_loss_frac: float
    ratios: IntermediateRatios

    @property
    def pool_return(self) -> float:
        return math.prod(self.components)


@dataclass(frozen=True)
class GridOutcome:
    """step_period over a state grid and a node set; arrays are [G, K]."""

    s_next: np.ndarray
    pool_return: np.ndarray
    components: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    fee: np.ndarray
    arb_loss: np.ndarray


def step_period(s: float, node: "DisturbanceNode", pool: PoolSpec) -> PeriodOutcome:
    """Evolve the ratio and the pool value through one period.

    Args:
        s: Ratio entering the period, inside the band
        node: One disturbance (arrival, belief, returns)
        pool: Pool design

    Returns:
        PeriodOutcome with the four value factors whose product is R^M
    """
    _check_in_band(s, pool)
    out = evolve(s, node.xi, node.belief, node.ra, node.rb, pool.eta, pool.fee)
    components = tuple(float(out[k]) for k in ("r1", "r2", "r3", "r4"))
    pool_return = float(out["pool_return"])
    return PeriodOutcome(
        s_next=float(out["s3"]),
        rm_over_rb=pool_return / node.rb,
        components=components,
        fee_revenue_frac=float(out["fee"]),
        arb_loss_frac=float(out["arb_loss"]),
        ratios=IntermediateRatios(float(s), float(out["s1"]), float(out["s2"]), float(out["s3"])),
    )


def step_grid(states: np.ndarray, rule: "QuadratureRule", pool: PoolSpec) -> GridOutcome:
    """Vectorized step_period for every (state, node) pair."""
    states = np.asarray(states, dtype=float)
    out = evolve(states[:, None], rule.xi[None, :], rule.belief[None, :], rule.ra[None, :], rule.rb[None, :],
                 pool.eta, pool.fee)
    return GridOutcome(out["s3"], out["pool_return"], (out["r1"], out["r2"], out["r3"], out["r4"]),
                       out["fee"], out["arb_loss"])


def il_exact(s2: float, ra: float, rb: float, pool: PoolSpec) -> float:
    """Arbitrage loss after a price shock, per unit of pre-shock pool value.

    Fees paid by the arbitrageur are netted out.
    """
    _check_in_band(s2, pool, "s2")
    if ra <= 0.0 or rb <= 0.0:
        raise DomainError(f"Gross returns must be positive, got RA={ra}, RB={rb}")
    e = pool.value_weight
    r3 = (e * ra + s2 * rb) / (e + s2)
    r4, _ = _value_factor(np.asarray(s2 * rb / ra), e, pool.eta, pool.fee)
    return float(r3 * (1.0 - r4))


def il_approx(ra: float, rb: float, pool: PoolSpec) -> float:
    """Second-order arbitrage loss: RB eta(1-eta)(R-1)^2 / 2 outside the band, R = RA/RB."""
    r = ra / rb
    lo, hi = pool.band
    if lo <= r <= hi:
        return 0.0
    return 0.5 * rb * pool.eta * (1.0 - pool.eta) * (r - 1.0) ** 2


def il_shape(eta: float, r_tilde: float) -> float:
    """eta R + (1 - eta) - R^eta: the eta-dependence of the frictionless loss."""
    return eta * r_tilde + (1.0 - eta) - r_tilde ** eta


def il_worst_eta(r_tilde: float) -> float:
    """Weight at which il_shape peaks for a given relative price move."""
    if r_tilde <= 0.0 or r_tilde == 1.0:
        raise DomainError(f"Relative price move must be positive and different from 1, got {r_tilde}")
    log_r = math.log(r_tilde)
    return math.log((r_tilde - 1.0) / log_r) / log_r


def fee_exact(s: float, belief: float, pool: PoolSpec) -> float:
    """Fee revenue from one liquidity trade, per unit of pool value before it."""
    _check_in_band(s, pool)
    if belief <= 0.0:
        raise DomainError(f"Belief multiplier must be positive, got {belief}")
    out = evolve(s, 1.0, belief, 1.0, 1.0, pool.eta, pool.fee)
    return float(out["fee"])


def fee_approx(belief: float, pool: PoolSpec) -> float:
    """First-order fee revenue: eta(1-eta)|I-1| f outside the band."""
    lo, hi = pool.band
    if lo <= belief <= hi:
        return 0.0
    return pool.eta * (1.0 - pool.eta) * abs(belief - 1.0) * pool.fee


@dataclass(frozen=True)
class NetProfitReport:
    lhs: float
    rhs: float
    invest: bool
    net: float

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "invest": self.invest, "net": self.net}


def net_profit_condition(params: "MarketParams", pool: PoolSpec, nodes_per_dim: int = NET_PROFIT_NODES) -> NetProfitReport:
    """Compare expected fee income with expected arbitrage loss.

    lhs = alpha f E[|I-1| 1(I outside band)] and
    rhs = E[RB (R-1)^2 1(R outside band)] / 2; the LP invests in the pool
    iff lhs > rhs. `net` is eta(1-eta)(lhs - rhs), the approximate expected
    per-period gain of pool investment.
    """
    from ammlab.market_model import belief_nodes, return_nodes

    lo, hi = pool.band
    beliefs, wi = belief_nodes(params, nodes_per_dim)
    outside_i = (beliefs < lo) | (beliefs > hi)
    lhs = params.alpha * pool.fee * float(np.sum(wi * np.abs(beliefs - 1.0) * outside_i))

    ra, rb, wr = return_nodes(params, nodes_per_dim)
    r = ra / rb
    outside_r = (r < lo) | (r > hi)
    rhs = 0.5 * float(np.sum(wr * rb * (r - 1.0) ** 2 * outside_r))

    net = pool.eta * (1.0 - pool.eta) * (lhs - rhs)
    logger.debug(f"Net-profit condition: fee side {lhs:.6e}, loss side {rhs:.6e}")
    return NetProfitReport(lhs, rhs, bool(lhs > rhs), net)
