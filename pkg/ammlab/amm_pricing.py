"""Pricing functions, marginal exchange rates and the optimal-trade solver.

A pool holding deposits (y^A, y^B) quotes asset A at the marginal rate
G(y^A/y^B) in units of B. An investor who believes the exchange rate is a/b
trades until the fee-adjusted marginal rate meets the belief, and does not
trade at all while the ratio s = G(y^A/y^B)/(a/b) sits in the closed band
[1/(1+f), 1+f].

Trades are reported as fractions of the pool's deposits: d^A > 0 means the
investor withdraws asset A and pays in asset B (d^B < 0), with the fee charged
on the deposited leg.
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import optimize

from ammlab.errors import DomainError, InvariantViolation, NumericalError, PricingFunctionError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

BISECT_XTOL = 1e-12
BISECT_MAXITER = 200
MAX_BRACKET_EXPANSIONS = 60
LEVEL_RESIDUAL_TOL = 1e-10

# Points on which custom pricing functions are checked at construction
VALIDATION_GRID = np.geomspace(1e-3, 1e3, 64)
HOMOTHETY_SCALES = (0.5, 2.0, 10.0)


def _fail(exc_type, error_msg: str, **kwargs):
    logger.error(error_msg)
    raise exc_type(error_msg, **kwargs)


def _check_positive(value: ArrayLike, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
        _fail(DomainError, f"{name} must be finite and strictly positive, got {value!r}")
    return arr


def _check_eta(eta: float) -> float:
    if not 0.0 < eta < 1.0:
        _fail(DomainError, f"CGMMM weight eta must lie in (0, 1), got {eta!r}")
    return float(eta)


def _check_fee(f: float) -> float:
    if not (math.isfinite(f) and f >= 0.0):
        _fail(DomainError, f"Trading fee f must be finite and nonnegative, got {f!r}")
    return float(f)


def _like_input(value: ArrayLike, result: np.ndarray) -> ArrayLike:
    return float(result) if np.ndim(value) == 0 else result


def no_trade_band(f: float) -> Tuple[float, float]:
    """Closed interval of ratios s for which no investor trades."""
    f = _check_fee(f)
    return 1.0 / (1.0 + f), 1.0 + f


class PricingFunction(ABC):
    """A pricing function F held invariant (before fees) by every trade."""

    kind: str = "abstract"

    @abstractmethod
    def level(self, y_a: ArrayLike, y_b: ArrayLike) -> ArrayLike:
        """Value of F at the deposit pair."""

    @abstractmethod
    def marginal_rate(self, z: ArrayLike) -> ArrayLike:
        """G(z): marginal price of asset A in units of B at deposit ratio z."""

    @abstractmethod
    def inverse_marginal_rate(self, rate: float) -> float:
        """Deposit ratio z with G(z) = rate."""


class CGMMM(PricingFunction):
    """Constant geometric mean market maker F = (y^A)^eta (y^B)^(1-eta)."""

    kind = "cgmmm"

    def __init__(self, eta: float):
        self.eta = _check_eta(eta)

    def level(self, y_a, y_b):
        return np.power(y_a, self.eta) * np.power(y_b, 1.0 - self.eta)

    def marginal_rate(self, z):
        return self.eta / ((1.0 - self.eta) * z)

    def inverse_marginal_rate(self, rate: float) -> float:
        _check_positive(rate, "rate")
        return self.eta / ((1.0 - self.eta) * rate)

    def as_custom(self) -> "CustomPricing":
        """The same function behind the generic interface, for cross-checks."""
        eta = self.eta
        return CustomPricing(
            level=lambda x, y: x ** eta * y ** (1.0 - eta),
            marginal_rate=lambda z: eta / ((1.0 - eta) * z),
            name=f"cgmmm-as-custom(eta={eta})",
        )

    def __repr__(self) -> str:
        return f"CGMMM(eta={self.eta})"


class CustomPricing(PricingFunction):
    """User supplied pricing function with its marginal-rate function.

    Args:
        level: F(x, y), increasing in both deposits
        marginal_rate: G(z) = F_x / F_y evaluated at (z, 1)
        name: Label used in logs

    Raises:
        PricingFunctionError: If G is not strictly decreasing, disagrees with the
            marginal rate of substitution of F, or F is not homothetic.
    """

    kind = "custom"

    def __init__(self, level: Callable[[float, float], float], marginal_rate: Callable[[float], float], name: str = "custom"):
        self._level = level
        self._marginal_rate = marginal_rate
        self.name = name
        self._validate()

    def level(self, y_a, y_b):
        return self._level(y_a, y_b)

    def marginal_rate(self, z):
        return self._marginal_rate(z)

    def inverse_marginal_rate(self, rate: float) -> float:
        _check_positive(rate, "rate")

        def excess(log_z: float) -> float:
            return self._marginal_rate(math.exp(log_z)) - rate

        lo, hi = -1.0, 1.0
        for _ in range(MAX_BRACKET_EXPANSIONS):
            if excess(lo) >= 0.0:
                break
            lo *= 2.0
            if lo < -700.0:
                break
        for _ in range(MAX_BRACKET_EXPANSIONS):
            if excess(hi) <= 0.0:
                break
            hi *= 2.0
            if hi > 700.0:
                break
        if excess(lo) < 0.0 or excess(hi) > 0.0:
            _fail(NumericalError, f"{self.name}: could not bracket G(z) = {rate} in log z over [{lo}, {hi}]",
                  interval=(math.exp(max(lo, -700.0)), math.exp(min(hi, 700.0))))
        log_z = optimize.bisect(excess, lo, hi, xtol=1e-14, maxiter=BISECT_MAXITER)
        return math.exp(log_z)

    def _numerical_mrs(self, x: float, y: float) -> float:
        hx, hy = 1e-6 * x, 1e-6 * y
        f_x = (self._level(x + hx, y) - self._level(x - hx, y)) / (2.0 * hx)
        f_y = (self._level(x, y + hy) - self._level(x, y - hy)) / (2.0 * hy)
        return f_x / f_y

    def _validate(self) -> None:
        rates = np.array([self._marginal_rate(float(z)) for z in VALIDATION_GRID], dtype=float)
        if not np.all(np.isfinite(rates)) or np.any(rates <= 0.0):
            _fail(PricingFunctionError, f"{self.name}: marginal rate must be finite and positive on the validation grid")
        if np.any(np.diff(rates) >= 0.0):
            _fail(PricingFunctionError, f"{self.name}: marginal rate is not strictly decreasing on the validation grid")
        for z in VALIDATION_GRID[::8]:
            expected = self._marginal_rate(float(z))
            for c in (1.0,) + HOMOTHETY_SCALES:
                mrs = self._numerical_mrs(c * z, c)
                if not abs(mrs - expected) <= 1e-4 * expected:
                    _fail(PricingFunctionError,
                          f"{self.name}: F_x/F_y at ({c * z:.4g}, {c:.4g}) is {mrs:.6g}, marginal rate says {expected:.6g}")
        logger.debug(f"Validated custom pricing function {self.name}")

    def __repr__(self) -> str:
        return f"CustomPricing(name={self.name!r})"


class PoolSpec(BaseModel):
    """AMM design: CGMMM weight eta and unit trading fee f."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    eta: float = Field(0.5, gt=0.0, lt=1.0)
    fee: float = Field(0.005, alias="f", ge=0.0, lt=1.0)

    @property
    def band(self) -> Tuple[float, float]:
        return no_trade_band(self.fee)

    @property
    def value_weight(self) -> float:
        """eta/(1-eta): dollar ratio of asset A to asset B held at s = 1."""
        return self.eta / (1.0 - self.eta)

    def pricing_function(self) -> CGMMM:
        return CGMMM(self.eta)

    def with_updates(self, **changes) -> "PoolSpec":
        return PoolSpec.model_validate({**self.model_dump(), **changes})


@dataclass(frozen=True)
class TradeFractions:
    """Fractions of the pool deposits withdrawn by the optimal trade."""

    d_a: float
    d_b: float

    def __post_init__(self):
        no_trade = self.d_a == 0.0 and self.d_b == 0.0
        takes_a = 0.0 < self.d_a < 1.0 and self.d_b < 0.0
        takes_b = self.d_a < 0.0 and 0.0 < self.d_b < 1.0
        if not (no_trade or takes_a or takes_b):
            _fail(InvariantViolation, f"Trade ({self.d_a}, {self.d_b}) violates the one-sided sign pattern")

    @property
    def is_trade(self) -> bool:
        return self.d_a != 0.0

    @property
    def withdrawn_asset(self) -> Optional[str]:
        if self.d_a > 0.0:
            return "A"
        if self.d_b > 0.0:
            return "B"
        return None

    def as_tuple(self) -> Tuple[float, float]:
        return self.d_a, self.d_b


# Array kernels for CGMMM. Inputs are assumed valid; the checked wrappers below
# validate before calling them.

def _effective_ratio(s: np.ndarray, f: float):
    below = s < 1.0 / (1.0 + f)
    above = s > 1.0 + f
    q = np.where(below, s * (1.0 + f), np.where(above, s / (1.0 + f), 1.0))
    return below, above, q


def cgmmm_trade_fractions(s: np.ndarray, eta: float, f: float) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s, dtype=float)
    below, above, q = _effective_ratio(s, f)
    moved = below | above
    d_a = np.where(moved, 1.0 - q ** (1.0 - eta), 0.0)
    d_b = np.where(moved, 1.0 - q ** (-eta), 0.0)
    return d_a, d_b


def cgmmm_deposit_factors(s: np.ndarray, eta: float, f: float) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s, dtype=float)
    below, above, q = _effective_ratio(s, f)
    up = q ** (1.0 - eta)
    down = q ** (-eta)
    factor_a = np.where(below, up, np.where(above, (1.0 + f) * up - f, 1.0))
    factor_b = np.where(below, (1.0 + f) * down - f, np.where(above, down, 1.0))
    return factor_a, factor_b


def cgmmm_transition(s: np.ndarray, eta: float, f: float) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    below, above, q = _effective_ratio(s, f)
    from_below = (1.0 + f * (1.0 - q ** eta)) / (1.0 + f)
    from_above = (1.0 + f) / (1.0 + f * (1.0 - q ** (eta - 1.0)))
    return np.where(below, from_below, np.where(above, from_above, s))


def marginal_rate(pf: PricingFunction, deposit_ratio: float) -> float:
    """Marginal exchange rate G(y^A/y^B) of the pool."""
    _check_positive(deposit_ratio, "deposit_ratio")
    return float(pf.marginal_rate(float(deposit_ratio)))


def pricing_level(pf: PricingFunction, y_a: float, y_b: float) -> float:
    _check_positive(y_a, "y_a")
    _check_positive(y_b, "y_b")
    return float(pf.level(float(y_a), float(y_b)))


def solve_trade_cgmmm(s: float, eta: float, f: float) -> TradeFractions:
    """Closed-form optimal trade against a CGMMM pool.

    Args:
        s: Ratio of the pool's marginal rate to the trader's believed rate
        eta: CGMMM weight
        f: Unit trading fee

    Returns:
        TradeFractions, (0, 0) when s lies in the no-trade band
    """
    _check_positive(s, "s")
    eta = _check_eta(eta)
    f = _check_fee(f)
    d_a, d_b = cgmmm_trade_fractions(np.asarray(s, dtype=float), eta, f)
    d_a, d_b = float(d_a), float(d_b)
    # Within an ulp of the band edge one leg can round to zero
    if d_a == 0.0 or d_b == 0.0:
        return TradeFractions(0.0, 0.0)
    return TradeFractions(d_a, d_b)


def solve_trade_generic(pf: PricingFunction, belief_ratio: float, deposit_ratio: float, f: float,
                        xtol: float = BISECT_XTOL, max_iter: int = BISECT_MAXITER) -> TradeFractions:
    """Optimal trade for any admissible pricing function by root finding.

    The post-trade deposit ratio is pinned by the fee-adjusted marginal
    condition, which leaves a single equation F(z*(1-d^B), 1-d^B) = F(beta, 1)
    in d^B, solved by bisection after geometric bracket expansion. d^A follows
    from the ratio.

    Args:
        pf: Pricing function
        belief_ratio: The investor's believed exchange rate a/b
        deposit_ratio: y^A/y^B before the trade
        f: Unit trading fee

    Returns:
        TradeFractions

    Raises:
        NumericalError: If no sign change is found within the expansion limit
    """
    _check_positive(belief_ratio, "belief_ratio")
    _check_positive(deposit_ratio, "deposit_ratio")
    f = _check_fee(f)
    alpha = float(belief_ratio)
    beta = float(deposit_ratio)

    s = float(pf.marginal_rate(beta)) / alpha
    lo_band, hi_band = no_trade_band(f)
    if lo_band <= s <= hi_band:
        return TradeFractions(0.0, 0.0)

    buys_a = s < lo_band
    target_rate = alpha / (1.0 + f) if buys_a else alpha * (1.0 + f)
    target = pf.inverse_marginal_rate(target_rate)
    base = float(pf.level(beta, 1.0))

    def residual(d_b: float) -> float:
        keep = 1.0 - d_b
        return float(pf.level(target * keep, keep)) - base

    if buys_a:
        # d^B < 0: the pool receives B, residual rises as d^B falls
        a, b = -1.0, 0.0
        for _ in range(MAX_BRACKET_EXPANSIONS):
            if residual(a) > 0.0:
                break
            a *= 2.0
        bracketed = residual(a) > 0.0 >= residual(b)
    else:
        a, b = 0.0, 0.5
        for _ in range(MAX_BRACKET_EXPANSIONS):
            if residual(b) < 0.0:
                break
            b = 1.0 - 0.5 * (1.0 - b)
        bracketed = residual(a) >= 0.0 > residual(b)
    if not bracketed:
        _fail(NumericalError, f"Could not bracket the trade for belief {alpha}, deposit ratio {beta}, f={f}",
              interval=(a, b))

    d_b = optimize.bisect(residual, a, b, xtol=xtol, maxiter=max_iter)
    d_a = 1.0 - target * (1.0 - d_b) / beta

    scale = max(1.0, abs(base))
    if abs(residual(d_b)) > LEVEL_RESIDUAL_TOL * scale:
        logger.warning(f"Generic trade residual {residual(d_b):.3e} exceeds {LEVEL_RESIDUAL_TOL:.0e} (s={s:.6g})")
    if d_a == 0.0 or d_b == 0.0:
        return TradeFractions(0.0, 0.0)
    return TradeFractions(float(d_a), float(d_b))


def optimal_trade_amounts(pf: PricingFunction, a: float, b: float, y_a: float, y_b: float, f: float) -> Tuple[float, float]:
    """Absolute withdrawals (D^A, D^B) of an investor valuing the assets at (a, b)."""
    _check_positive(a, "a")
    _check_positive(b, "b")
    _check_positive(y_a, "y_a")
    _check_positive(y_b, "y_b")
    if isinstance(pf, CGMMM):
        s = float(pf.marginal_rate(y_a / y_b)) / (a / b)
        fractions = solve_trade_cgmmm(s, pf.eta, f)
    else:
        fractions = solve_trade_generic(pf, a / b, y_a / y_b, f)
    return fractions.d_a * y_a, fractions.d_b * y_b


def trade_objective(belief_ratio: float, deposit_ratio: float, d_a: ArrayLike, d_b: ArrayLike, f: float) -> ArrayLike:
    """Investor's post-fee gain at believed prices, per unit of b*y^B.

    The deposited leg costs (1+f) per unit.
    """
    d_a = np.asarray(d_a, dtype=float)
    d_b = np.asarray(d_b, dtype=float)
    gain = (belief_ratio * deposit_ratio * np.where(d_a < 0.0, 1.0 + f, 1.0) * d_a
            + np.where(d_b < 0.0, 1.0 + f, 1.0) * d_b)
    return float(gain) if gain.ndim == 0 else gain


def post_trade_deposit_factors(s: ArrayLike, eta: float, f: float) -> Tuple[ArrayLike, ArrayLike]:
    """Multipliers on (y^A, y^B) after the optimal trade, fee included.

    Accepts a scalar or an array of ratios.
    """
    arr = _check_positive(s, "s")
    eta = _check_eta(eta)
    f = _check_fee(f)
    factor_a, factor_b = cgmmm_deposit_factors(arr, eta, f)
    return _like_input(s, factor_a), _like_input(s, factor_b)


def ratio_transition(s: ArrayLike, eta: float, f: float) -> ArrayLike:
    """H(s): the ratio after an arbitrageur with correct beliefs has traded.

    The result always lies in [1/(1+f), 1+f] and equals s on that band.
    """
    arr = _check_positive(s, "s")
    eta = _check_eta(eta)
    f = _check_fee(f)
    return _like_input(s, cgmmm_transition(arr, eta, f))


def slippage(pf: PricingFunction, trade_fraction: float, side: str, deposit_ratio: float = 1.0) -> float:
    """Relative excess of the average over the marginal exchange rate.

    Args:
        pf: Pricing function
        trade_fraction: Share d of the acquired asset's deposit taken out
        side: "A" or "B", the asset acquired
        deposit_ratio: y^A/y^B, only relevant for non-CGMMM functions

    Returns:
        average / marginal - 1, zero in the limit of a marginal trade
    """
    d = float(trade_fraction)
    if not 0.0 < d < 1.0:
        _fail(DomainError, f"Trade fraction must lie in (0, 1), got {trade_fraction!r}")
    side = side.upper()
    if side not in ("A", "B"):
        _fail(DomainError, f"Side must be 'A' or 'B', got {side!r}")

    if isinstance(pf, CGMMM):
        eta = pf.eta
        if side == "A":
            paid = math.expm1(eta / (eta - 1.0) * math.log1p(-d))
            return (1.0 - eta) / eta * paid / d - 1.0
        paid = math.expm1((eta - 1.0) / eta * math.log1p(-d))
        return eta / (1.0 - eta) * paid / d - 1.0

    beta = _check_positive(deposit_ratio, "deposit_ratio").item()
    base = float(pf.level(beta, 1.0))
    rate = float(pf.marginal_rate(beta))
    if side == "A":
        def residual(keep_b: float) -> float:
            return float(pf.level(beta * (1.0 - d), keep_b)) - base
    else:
        def residual(keep_a: float) -> float:
            return float(pf.level(keep_a, 1.0 - d)) - base
    start = beta if side == "B" else 1.0
    hi = 2.0 * start
    for _ in range(MAX_BRACKET_EXPANSIONS):
        if residual(hi) > 0.0:
            break
        hi *= 2.0
    else:
        _fail(NumericalError, f"Could not bracket the counter-leg for a slippage trade of {d}", interval=(start, hi))
    kept = optimize.bisect(residual, start, hi, xtol=1e-14, maxiter=BISECT_MAXITER)
    if side == "A":
        average = (kept - 1.0) / (beta * d)
        return average / rate - 1.0
    average = (kept - beta) / d
    return average * rate - 1.0
