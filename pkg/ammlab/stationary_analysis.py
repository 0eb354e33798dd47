"""Long-run behaviour of the exchange ratio.

The ratio s follows a Markov chain on the band. It is discretized onto the
state grid by sending every disturbance outcome to its nearest grid cell, and
the stationary law is found by power iteration. Monte-Carlo helpers simulate
the same chain for cross-checks and trajectory exports.
"""
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional

import numpy as np
from scipy.stats import norm

from ammlab.amm_pricing import PoolSpec
from ammlab.errors import ConvergenceError, DomainError
from ammlab.market_model import (MarketParams, QuadratureRule, belief_nodes, sample_disturbance,
                                 sample_disturbances)
from ammlab.pool_dynamics import evolve, step_grid, step_period

logger = logging.getLogger(__name__)

POWER_TOL = 1e-12
POWER_MAX_ITER = 1_000_000
KERNEL_SHOCK_NODES = 401
KERNEL_BELIEF_NODES = 41
KERNEL_BLOCK_CELLS = 200_000
TRACE_HEADER = ["k", "s", "xi", "r1", "r2", "r3", "r4", "pool_return", "fee", "il"]


@dataclass(frozen=True)
class StationaryDistribution:
    grid: np.ndarray
    mass: np.ndarray
    iterations: int = 0
    residual: float = 0.0
    degenerate: bool = False

    def __post_init__(self):
        if self.grid.shape != self.mass.shape:
            raise DomainError(f"Grid and mass shapes differ: {self.grid.shape} vs {self.mass.shape}")

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.mass)

    def rows(self) -> List[List[float]]:
        return [[float(s), float(m)] for s, m in zip(self.grid, self.mass)]


def nearest_cell(grid: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Index of the grid point whose midpoint cell contains each value."""
    midpoints = 0.5 * (grid[1:] + grid[:-1])
    return np.searchsorted(midpoints, values, side="right")


def kernel_rule(params: MarketParams, shock_nodes: int = KERNEL_SHOCK_NODES,
                belief_count: int = KERNEL_BELIEF_NODES) -> QuadratureRule:
    """Disturbances driving the ratio chain.

    The next ratio depends on the returns only through R^B/R^A, so the shock is
    one lognormal factor. It is split into `shock_nodes` equiprobable bins (node
    at each bin's median) so the mass pushed past either band edge is resolved
    to 1/shock_nodes. Value factors computed from this rule are meaningless.
    """
    if shock_nodes < 1:
        raise DomainError(f"shock_nodes must be positive, got {shock_nodes}")
    drift = params.mu_b - params.mu_a
    if params.sigma == 0.0:
        log_shock, wr = np.array([drift]), np.ones(1)
    else:
        z = norm.ppf((np.arange(shock_nodes) + 0.5) / shock_nodes)
        log_shock, wr = drift + params.sigma * z, np.full(shock_nodes, 1.0 / shock_nodes)
    shock = np.exp(log_shock)
    beliefs, wi = belief_nodes(params, belief_count)

    parts = []
    if params.alpha > 0.0:
        n = beliefs.size * shock.size
        parts.append((np.ones(n, dtype=int), np.repeat(beliefs, shock.size), np.ones(n), np.tile(shock, beliefs.size),
                      params.alpha * np.outer(wi, wr).ravel()))
    if params.alpha < 1.0:
        n = shock.size
        parts.append((np.zeros(n, dtype=int), np.ones(n), np.ones(n), shock, (1.0 - params.alpha) * wr))
    xi, belief, ra, rb, weight = (np.concatenate(cols) for cols in zip(*parts))
    return QuadratureRule(xi, belief, ra, rb, weight / weight.sum(),
                          meta={"shock_nodes": int(wr.size), "belief_nodes": int(beliefs.size)})


def transition_kernel(params: MarketParams, pool: PoolSpec, grid: np.ndarray,
                      shock_nodes: int = KERNEL_SHOCK_NODES) -> np.ndarray:
    """Row-stochastic matrix of the discretized ratio chain."""
    grid = np.asarray(grid, dtype=float)
    lo, hi = pool.band
    if grid[0] != lo or grid[-1] != hi:
        raise DomainError(f"Grid must span the band [{lo}, {hi}] exactly, got [{grid[0]}, {grid[-1]}]")
    rule = kernel_rule(params, shock_nodes)
    G = grid.size
    kernel = np.zeros((G, G))
    block = max(1, KERNEL_BLOCK_CELLS // len(rule))
    for start in range(0, G, block):
        rows = np.arange(start, min(start + block, G))
        cells = nearest_cell(grid, step_grid(grid[rows], rule, pool).s_next)
        index = np.broadcast_to(rows[:, None], cells.shape)
        np.add.at(kernel, (index.ravel(), cells.ravel()), np.broadcast_to(rule.weight, cells.shape).ravel())
    logger.debug(f"Built {G}x{G} ratio kernel from {len(rule)} disturbance nodes")
    return kernel


def _power_iterate(kernel: np.ndarray, tol: float, max_iter: int):
    n = kernel.shape[0]
    pi = np.full(n, 1.0 / n)
    history: List[float] = []
    change = float("inf")
    for iteration in range(1, max_iter + 1):
        nxt = pi @ kernel
        nxt /= nxt.sum()
        change = float(np.abs(nxt - pi).sum())
        pi = nxt
        if iteration <= 10 or iteration % 1000 == 0:
            history.append(change)
        if change < tol:
            return pi, iteration
    history.append(change)
    error_msg = f"Power iteration did not converge in {max_iter} iterations (L1 change {change:.3e})"
    logger.error(error_msg)
    raise ConvergenceError(error_msg, residual_history=history)


def stationary(kernel: np.ndarray, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER) -> StationaryDistribution:
    """Left fixed vector of a row-stochastic kernel by power iteration from uniform.

    The returned distribution is indexed by kernel row; its grid is the row index
    unless the caller attaches one (see stationary_distribution).

    Raises:
        ConvergenceError: If the L1 change stays above `tol`
    """
    kernel = np.asarray(kernel, dtype=float)
    pi, iterations = _power_iterate(kernel, tol, max_iter)
    residual = float(np.abs(pi @ kernel - pi).sum())
    return StationaryDistribution(np.arange(pi.size, dtype=float), pi, iterations, residual)


def stationary_distribution(params: MarketParams, pool: PoolSpec, grid: np.ndarray,
                            shock_nodes: int = KERNEL_SHOCK_NODES,
                            tol: float = POWER_TOL) -> StationaryDistribution:
    """Kernel plus power iteration, flagging the frozen chain (no volatility, no traders)."""
    kernel = transition_kernel(params, pool, grid, shock_nodes)
    degenerate = params.sigma == 0.0 and params.alpha == 0.0
    if degenerate:
        logger.warning("Ratio chain never moves (sigma = 0, alpha = 0); stationary law is not unique")
    found = stationary(kernel, tol)
    return replace(found, grid=np.asarray(grid, dtype=float), degenerate=degenerate)


def stationary_expectation(dist: StationaryDistribution, field: np.ndarray, grid: Optional[np.ndarray] = None) -> float:
    """Expectation of a per-grid-point quantity under the stationary law."""
    field = np.asarray(field, dtype=float)
    if grid is not None and (np.shape(grid) != dist.grid.shape or not np.allclose(grid, dist.grid, rtol=0.0, atol=1e-15)):
        error_msg = "Field grid does not match the distribution grid"
        logger.error(error_msg)
        raise DomainError(error_msg)
    if field.shape[-1] != dist.mass.size:
        error_msg = f"Field has {field.shape[-1]} points, distribution has {dist.mass.size}"
        logger.error(error_msg)
        raise DomainError(error_msg)
    return field @ dist.mass


@dataclass(frozen=True)
class SimulationTrace:
    """One seeded trajectory; arrays are indexed by period."""

    s: np.ndarray
    components: np.ndarray
    pool_return: np.ndarray
    fee: np.ndarray
    arb_loss: np.ndarray
    xi: np.ndarray

    def rows(self) -> List[List[float]]:
        out = []
        for k in range(self.s.size):
            r1, r2, r3, r4 = self.components[k]
            out.append([k, float(self.s[k]), int(self.xi[k]), float(r1), float(r2), float(r3), float(r4),
                        float(self.pool_return[k]), float(self.fee[k]), float(self.arb_loss[k])])
        return out


def simulate_chain(params: MarketParams, pool: PoolSpec, steps: int, seed: int, s0: float = 1.0) -> SimulationTrace:
    """Seeded trajectory of the ratio with the per-period return decomposition.

    Row k holds the ratio entering period k and that period's outcome.
    """
    if steps < 1:
        raise DomainError(f"steps must be positive, got {steps}")
    rng = np.random.default_rng(seed)
    s = np.empty(steps)
    components = np.empty((steps, 4))
    pool_return = np.empty(steps)
    fee = np.empty(steps)
    arb_loss = np.empty(steps)
    xi = np.empty(steps, dtype=int)
    state = s0
    for k in range(steps):
        node = sample_disturbance(params, rng)
        outcome = step_period(state, node, pool)
        s[k] = state
        components[k] = outcome.components
        pool_return[k] = outcome.pool_return
        fee[k] = outcome.fee_revenue_frac
        arb_loss[k] = outcome.arb_loss_frac
        xi[k] = node.xi
        state = outcome.s_next
    logger.debug(f"Simulated {steps} periods with seed {seed}")
    return SimulationTrace(s, components, pool_return, fee, arb_loss, xi)


def simulate_ensemble(params: MarketParams, pool: PoolSpec, chains: int, steps: int, rng: np.random.Generator,
                      burn_in: int = 200) -> np.ndarray:
    """Many independent chains advanced together; returns the post burn-in ratios, flattened."""
    state = np.ones(chains)
    kept = []
    for k in range(burn_in + steps):
        draw = sample_disturbances(params, rng, chains)
        out = evolve(state, draw.xi, draw.belief, draw.ra, draw.rb, pool.eta, pool.fee)
        state = out["s3"]
        if k >= burn_in:
            kept.append(state)
    return np.concatenate(kept)


def ks_distance(dist: StationaryDistribution, samples: np.ndarray) -> float:
    """Kolmogorov-Smirnov distance between the grid law and simulated ratios.

    Samples are first mapped to their nearest grid cell.
    """
    cells = nearest_cell(dist.grid, np.asarray(samples, dtype=float))
    empirical = np.bincount(cells, minlength=dist.grid.size) / cells.size
    return float(np.max(np.abs(np.cumsum(empirical) - dist.cdf())))


def summarize(dist: StationaryDistribution, fields: Dict[str, np.ndarray]) -> Dict[str, float]:
    return {name: float(stationary_expectation(dist, values)) for name, values in fields.items()}
