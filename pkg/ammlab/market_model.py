"""Per-period disturbances and deterministic quadrature over them.

One period draws the arrival indicator xi ~ Bernoulli(alpha), the belief
multiplier I with log I ~ N(-sigma_I^2/2, sigma_I^2) and the gross returns
(R^A, R^B), jointly lognormal. All four coordinates are independent apart from
the return correlation.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Iterator, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ammlab.errors import DomainError

if TYPE_CHECKING:
    from ammlab.amm_pricing import PoolSpec
    from ammlab.portfolio import ConstraintSet

logger = logging.getLogger(__name__)

DEFAULT_NODES_PER_DIM = 7
WEIGHT_TOL = 1e-12


def exchange_rate_volatility(sigma_a: float, sigma_b: float, rho: float) -> float:
    """Volatility of log(R^A/R^B)."""
    return math.sqrt(max(sigma_a ** 2 + sigma_b ** 2 - 2.0 * rho * sigma_a * sigma_b, 0.0))


class MarketParams(BaseModel):
    """Calibrated market environment; defaults are the 8-hour ETH/BTC calibration."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    delta: float = Field(0.998, gt=0.0, lt=1.0)
    r_f: float = Field(1.00002, alias="Rf", gt=0.0)
    mu_a: float = Field(0.0005, alias="muA")
    mu_b: float = Field(0.00038, alias="muB")
    sigma_a: float = Field(0.0199, alias="sigmaA", ge=0.0)
    sigma_b: float = Field(0.0152, alias="sigmaB", ge=0.0)
    rho: float = Field(0.8642, ge=-1.0, le=1.0)
    alpha: float = Field(0.5, ge=0.0, le=1.0)
    sigma_i: float = Field(0.02, alias="sigmaI", ge=0.0)
    n_periods: int = Field(3, alias="N", ge=1)
    gamma: float = Field(2.0, gt=0.0)

    @property
    def sigma(self) -> float:
        return exchange_rate_volatility(self.sigma_a, self.sigma_b, self.rho)

    @property
    def covariance(self) -> np.ndarray:
        off = self.rho * self.sigma_a * self.sigma_b
        return np.array([[self.sigma_a ** 2, off], [off, self.sigma_b ** 2]])

    @property
    def log_utility(self) -> bool:
        return self.gamma == 1.0

    def with_updates(self, **changes) -> "MarketParams":
        """Validated copy with fields replaced (field names, not aliases)."""
        return MarketParams.model_validate({**self.model_dump(), **changes})


@dataclass(frozen=True)
class DisturbanceNode:
    xi: int
    belief: float
    ra: float
    rb: float
    weight: float = 1.0

    def __post_init__(self):
        if self.xi not in (0, 1):
            raise DomainError(f"Arrival indicator must be 0 or 1, got {self.xi!r}")
        if min(self.belief, self.ra, self.rb) <= 0.0:
            raise DomainError(f"Belief and returns must be positive: {self}")


@dataclass(frozen=True)
class QuadratureRule:
    """A finite set of disturbance nodes stored column-wise."""

    xi: np.ndarray
    belief: np.ndarray
    ra: np.ndarray
    rb: np.ndarray
    weight: np.ndarray
    meta: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.weight.size)

    def __iter__(self) -> Iterator[DisturbanceNode]:
        for k in range(len(self)):
            yield DisturbanceNode(int(self.xi[k]), float(self.belief[k]), float(self.ra[k]),
                                  float(self.rb[k]), float(self.weight[k]))

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Weighted sum over the trailing (node) axis."""
        return np.asarray(values) @ self.weight


def gauss_hermite_normal(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights integrating against the standard normal density."""
    x, w = np.polynomial.hermite.hermgauss(n)
    return x * math.sqrt(2.0), w / math.sqrt(math.pi)


def covariance_factor(params: MarketParams) -> np.ndarray:
    """Lower-triangular L with L L^T equal to the log-return covariance."""
    sa, sb, rho = params.sigma_a, params.sigma_b, params.rho
    if sa == 0.0:
        # All variance, if any, loads on the first factor
        return np.array([[0.0, 0.0], [sb, 0.0]])
    return np.array([[sa, 0.0], [rho * sb, sb * math.sqrt(max(1.0 - rho * rho, 0.0))]])


def return_nodes(params: MarketParams, nodes_per_dim: int = DEFAULT_NODES_PER_DIM) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quadrature for (R^A, R^B): returns (ra, rb, weight)."""
    if nodes_per_dim < 1:
        raise DomainError(f"nodes_per_dim must be positive, got {nodes_per_dim}")
    chol = covariance_factor(params)
    columns = [chol[:, j] for j in range(2) if np.any(chol[:, j] != 0.0)]
    mean = np.array([params.mu_a, params.mu_b])
    if not columns:
        return np.exp(mean[:1]), np.exp(mean[1:]), np.ones(1)

    x, w = gauss_hermite_normal(nodes_per_dim)
    grids = np.meshgrid(*([x] * len(columns)), indexing="ij")
    weights = np.ones_like(grids[0])
    for wg in np.meshgrid(*([w] * len(columns)), indexing="ij"):
        weights = weights * wg
    log_r = mean[:, None] + sum(col[:, None] * g.ravel()[None, :] for col, g in zip(columns, grids))
    return np.exp(log_r[0]), np.exp(log_r[1]), weights.ravel()


def belief_nodes(params: MarketParams, nodes_per_dim: int = DEFAULT_NODES_PER_DIM) -> Tuple[np.ndarray, np.ndarray]:
    """Quadrature for the belief multiplier I, with E[I] = 1."""
    if params.sigma_i == 0.0:
        return np.ones(1), np.ones(1)
    x, w = gauss_hermite_normal(nodes_per_dim)
    s = params.sigma_i
    return np.exp(-0.5 * s * s + s * x), w


def build_quadrature(params: MarketParams, nodes_per_dim: int = DEFAULT_NODES_PER_DIM) -> QuadratureRule:
    """Tensor quadrature over (xi, I, R^A, R^B).

    Nodes with xi=1 carry the returns-by-beliefs product with total weight
    alpha; nodes with xi=0 carry the returns alone (I fixed at 1).
    """
    if nodes_per_dim < 3:
        raise DomainError(f"nodes_per_dim must be at least 3, got {nodes_per_dim}")
    ra, rb, wr = return_nodes(params, nodes_per_dim)
    beliefs, wi = belief_nodes(params, nodes_per_dim)

    parts = []
    if params.alpha > 0.0:
        n_i, n_r = beliefs.size, ra.size
        parts.append((
            np.ones(n_i * n_r, dtype=int),
            np.repeat(beliefs, n_r),
            np.tile(ra, n_i),
            np.tile(rb, n_i),
            params.alpha * np.outer(wi, wr).ravel(),
        ))
    if params.alpha < 1.0:
        parts.append((np.zeros(ra.size, dtype=int), np.ones(ra.size), ra, rb, (1.0 - params.alpha) * wr))

    xi, belief, r_a, r_b, weight = (np.concatenate(cols) for cols in zip(*parts))
    weight = weight / weight.sum()
    rule = QuadratureRule(xi, belief, r_a, r_b, weight,
                          meta={"return_nodes": int(ra.size), "belief_nodes": int(beliefs.size)})
    logger.debug(f"Built quadrature with {len(rule)} nodes ({ra.size} return x {beliefs.size} belief)")
    return rule


def sample_disturbance(params: MarketParams, rng: np.random.Generator) -> DisturbanceNode:
    """One Monte-Carlo draw; the caller owns the generator state."""
    z = rng.standard_normal(2)
    xi = int(rng.random() < params.alpha)
    u = rng.standard_normal()
    chol = covariance_factor(params)
    log_r = np.array([params.mu_a, params.mu_b]) + chol @ z
    belief = math.exp(-0.5 * params.sigma_i ** 2 + params.sigma_i * u)
    return DisturbanceNode(xi, belief, float(math.exp(log_r[0])), float(math.exp(log_r[1])))


def sample_disturbances(params: MarketParams, rng: np.random.Generator, size: int) -> QuadratureRule:
    """`size` independent draws with equal weights, stored as a rule."""
    z = rng.standard_normal((2, size))
    xi = (rng.random(size) < params.alpha).astype(int)
    u = rng.standard_normal(size)
    log_r = np.array([[params.mu_a], [params.mu_b]]) + covariance_factor(params) @ z
    belief = np.exp(-0.5 * params.sigma_i ** 2 + params.sigma_i * u)
    return QuadratureRule(xi, belief, np.exp(log_r[0]), np.exp(log_r[1]), np.full(size, 1.0 / size))


@dataclass(frozen=True)
class GrowthReport:
    r_bar: float
    satisfied: bool
    lhs: float
    gamma: float
    diagnostics: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"r_bar": self.r_bar, "satisfied": self.satisfied, "lhs": self.lhs,
                "gamma": self.gamma, "diagnostics": dict(self.diagnostics)}


def growth_condition_check(params: MarketParams, constraint: "ConstraintSet", pool: Optional["PoolSpec"] = None,
                           grid_size: int = 21, nodes_per_dim: int = DEFAULT_NODES_PER_DIM) -> GrowthReport:
    """Check that discounted certainty-equivalent growth stays below one.

    R_bar is the best certainty-equivalent portfolio return: its supremum over
    the state grid when gamma < 1 and its infimum when gamma > 1. The condition
    is delta * R_bar^(1-gamma) < 1. For log utility only finiteness of the
    expected log return is checked.
    """
    from ammlab.amm_pricing import PoolSpec
    from ammlab.pool_dynamics import state_grid, step_grid
    from ammlab.portfolio import optimize_portfolios, portfolio_excess_returns

    pool = pool or PoolSpec()
    rule = build_quadrature(params, nodes_per_dim)
    grid = state_grid(pool.fee, grid_size)
    outcome = step_grid(grid, rule, pool)
    excess = portfolio_excess_returns(outcome.pool_return, rule, params.r_f)
    coef = np.ones(outcome.pool_return.shape)
    solution = optimize_portfolios(excess, rule.weight, coef, params.r_f, params.gamma, constraint)

    if not np.all(np.isfinite(solution.value)):
        logger.warning("Expected utility is not finite on the state grid; growth condition fails")
        return GrowthReport(float("nan"), False, float("inf"), params.gamma,
                            {"nonfinite_points": float(np.sum(~np.isfinite(solution.value)))})

    if params.log_utility:
        r_ce = np.exp(solution.value)
        r_bar = float(r_ce.max())
        return GrowthReport(r_bar, True, params.delta, params.gamma,
                            {"expected_log_return_max": float(solution.value.max())})

    r_ce = solution.value ** (1.0 / (1.0 - params.gamma))
    r_bar = float(r_ce.max() if params.gamma < 1.0 else r_ce.min())
    lhs = params.delta * r_bar ** (1.0 - params.gamma)
    satisfied = bool(lhs < 1.0)
    if not satisfied:
        logger.warning(f"Growth condition fails: delta * R_bar^(1-gamma) = {lhs:.8f} >= 1")
    return GrowthReport(r_bar, satisfied, float(lhs), params.gamma,
                        {"ce_min": float(r_ce.min()), "ce_max": float(r_ce.max())})
