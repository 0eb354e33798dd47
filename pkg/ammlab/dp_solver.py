"""The LP's infinite-horizon consumption/investment problem.

Wealth is consumed once every N periods (phase 0) and reinvested each period.
With CGMMM the state reduces to the exchange ratio s, so value functions live
on a grid over the band [1/(1+f), 1+f], one vector per phase.

For gamma != 1 the solver iterates on the transformed values
v~_k = (1-gamma) v_k + (1_{k=0} + delta^(N-k)/(1-delta^N)), for gamma = 1 on
the raw values. One outer iteration applies the whole phase chain
(phase N-1 down to phase 0, then consumption).
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import optimize

from ammlab.amm_pricing import PoolSpec
from ammlab.errors import ConvergenceError, InvariantViolation
from ammlab.market_model import GrowthReport, MarketParams, build_quadrature, growth_condition_check
from ammlab.pool_dynamics import state_grid, step_grid
from ammlab.portfolio import ConstraintSet, optimize_portfolios, portfolio_excess_returns

logger = logging.getLogger(__name__)

LOG_EVERY = 500


class SolverSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    grid_size: int = Field(101, ge=3)
    tol: float = Field(1e-9, gt=0.0)
    max_iter: int = Field(10000, ge=1)
    nodes_per_dim: int = Field(7, ge=3)
    kernel_nodes: int = Field(401, ge=1)


class ValueForm(str, Enum):
    RAW = "raw"
    TRANSFORMED = "transformed"


def value_offsets(params: MarketParams) -> np.ndarray:
    """Per-phase constants of the value transformation."""
    n = params.n_periods
    d = params.delta
    k = np.arange(n)
    return (k == 0).astype(float) + d ** (n - k) / (1.0 - d ** n)


@dataclass(frozen=True)
class ValueFunction:
    grid: np.ndarray
    values: np.ndarray
    form: ValueForm

    def utility(self, params: MarketParams) -> np.ndarray:
        """Raw expected utility v_k per phase, shape [N, G]."""
        if self.form is ValueForm.RAW:
            return self.values
        return (self.values - value_offsets(params)[:, None]) / (1.0 - params.gamma)

    def interpolate(self, phase: int, s: np.ndarray) -> np.ndarray:
        return np.interp(s, self.grid, self.values[phase])


@dataclass(frozen=True)
class PolicyTable:
    grid: np.ndarray
    consumption: np.ndarray
    omega: np.ndarray

    def check_feasible(self, constraint: ConstraintSet, tol: float = 1e-9) -> bool:
        inside = constraint.contains(self.omega.reshape(-1, self.omega.shape[-1]), tol=tol)
        return bool(np.all(inside) and np.all((self.consumption > 0.0) & (self.consumption < 1.0)))


@dataclass(frozen=True)
class ConsumptionReport:
    """Log-utility consumption: first-order optimizer, numerical optimizer and the stated delta^N."""

    foc: float
    numeric: float
    stated: float

    @property
    def discrepancy(self) -> float:
        return self.foc - self.stated

    def to_dict(self) -> dict:
        return {"foc": self.foc, "numeric": self.numeric, "stated": self.stated, "discrepancy": self.discrepancy}


@dataclass
class SolveResult:
    params: MarketParams
    pool: PoolSpec
    constraint: ConstraintSet
    value: ValueFunction
    policy: PolicyTable
    iterations: int
    residual: float
    residual_history: List[float] = field(default_factory=list)
    absolute_residual: float = float("nan")
    growth: Optional[GrowthReport] = None
    consumption_report: Optional[ConsumptionReport] = None

    @property
    def grid(self) -> np.ndarray:
        return self.value.grid

    @property
    def contraction_ratio(self) -> float:
        """Median ratio of successive residuals over the last iterations."""
        hist = np.asarray(self.residual_history)
        hist = hist[hist > 0.0]
        if hist.size < 3:
            return float("nan")
        tail = hist[-21:]
        return float(np.median(tail[1:] / tail[:-1]))

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "form": self.value.form.value,
            "values": self.value.values.tolist(),
            "utility": self.value.utility(self.params).tolist(),
            "consumption": self.policy.consumption.tolist(),
            "omega": self.policy.omega.tolist(),
            "iterations": self.iterations,
            "residual": self.residual,
            "absolute_residual": self.absolute_residual,
            "contraction_ratio": self.contraction_ratio,
            "constraint": self.constraint.value,
            "market": self.params.model_dump(by_alias=True),
            "pool": self.pool.model_dump(by_alias=True),
            "growth": self.growth.to_dict() if self.growth else None,
            "consumption_report": self.consumption_report.to_dict() if self.consumption_report else None,
        }


class LPModel:
    """Everything about one (market, pool, constraint) triple that value iteration reuses."""

    def __init__(self, params: MarketParams, pool: PoolSpec, constraint: ConstraintSet = ConstraintSet.NO_SHORT,
                 settings: Optional[SolverSettings] = None):
        self.params = params
        self.pool = pool
        self.constraint = constraint
        self.settings = settings or SolverSettings()
        self.grid = state_grid(pool.fee, self.settings.grid_size)
        self.rule = build_quadrature(params, self.settings.nodes_per_dim)
        self.outcome = step_grid(self.grid, self.rule, pool)
        self.excess = portfolio_excess_returns(self.outcome.pool_return, self.rule, params.r_f)

    def continuation(self, values: np.ndarray) -> np.ndarray:
        """J(s_next) for every (grid point, node), by linear interpolation."""
        return np.interp(self.outcome.s_next, self.grid, values)


@dataclass(frozen=True)
class OperatorImage:
    values: np.ndarray
    omega: np.ndarray


def apply_portfolio_operator(v_next: np.ndarray, model: LPModel, phase: int,
                             warm_start: Optional[np.ndarray] = None) -> OperatorImage:
    """One-period portfolio operator at `phase` applied to the next-phase values.

    gamma != 1: delta * opt_omega E[(R^p)^(1-gamma) J(s')], sup for gamma < 1, inf for gamma > 1.
    gamma = 1:  delta * sup_omega E[J(s') + delta^(N-k-1)/(1-delta^N) log R^p].
    """
    p = model.params
    J = model.continuation(np.asarray(v_next, dtype=float))
    w = model.rule.weight
    if p.log_utility:
        sol = optimize_portfolios(model.excess, w, np.ones_like(J), p.r_f, 1.0, model.constraint, warm_start)
        log_weight = p.delta ** (p.n_periods - phase - 1) / (1.0 - p.delta ** p.n_periods)
        values = p.delta * (J @ w + log_weight * sol.value)
    else:
        if np.any(J <= 0.0):
            error_msg = f"Transformed continuation values must be positive (min {J.min():.3e}) at phase {phase}"
            logger.error(error_msg)
            raise InvariantViolation(error_msg)
        sol = optimize_portfolios(model.excess, w, J, p.r_f, p.gamma, model.constraint, warm_start)
        values = p.delta * sol.value
    return OperatorImage(values, sol.omega)


def log_consumption_rate(params: MarketParams) -> float:
    """Optimal log-utility consumption share from the first-order condition."""
    return 1.0 - params.delta ** params.n_periods


def consumption_report(params: MarketParams) -> ConsumptionReport:
    n, d = params.n_periods, params.delta
    kappa = d ** n / (1.0 - d ** n)
    found = optimize.minimize_scalar(lambda c: -(math.log(c) + kappa * math.log1p(-c)),
                                     bounds=(1e-12, 1.0 - 1e-12), method="bounded", options={"xatol": 1e-13})
    return ConsumptionReport(foc=log_consumption_rate(params), numeric=float(found.x), stated=d ** n)


def apply_consumption_operator(a: np.ndarray, params: MarketParams):
    """Consumption step at phase 0.

    Args:
        a: Phase-0 portfolio-operator image of the phase-1 values
        params: Market parameters

    Returns:
        (values, consumption share) per grid point
    """
    a = np.asarray(a, dtype=float)
    if params.log_utility:
        kappa = params.delta ** params.n_periods / (1.0 - params.delta ** params.n_periods)
        c = log_consumption_rate(params)
        bonus = math.log(c) + kappa * math.log1p(-c)
        return a + bonus, np.full_like(a, c)
    if np.any(a <= 0.0):
        error_msg = f"Consumption operator needs a positive argument, got min {a.min():.3e}"
        logger.error(error_msg)
        raise InvariantViolation(error_msg)
    root = a ** (1.0 / params.gamma)
    return (1.0 + root) ** params.gamma, 1.0 / (1.0 + root)


@dataclass(frozen=True)
class _Chain:
    values: np.ndarray
    omega: np.ndarray
    consumption: np.ndarray


def _apply_chain(model: LPModel, v0: np.ndarray, warm: Sequence[Optional[np.ndarray]]) -> _Chain:
    n = model.params.n_periods
    G = model.grid.size
    values = np.empty((n, G))
    omega = np.empty((n, G, 3))
    nxt = v0
    for k in range(n - 1, 0, -1):
        image = apply_portfolio_operator(nxt, model, k, warm[k])
        values[k], omega[k] = image.values, image.omega
        nxt = image.values
    image = apply_portfolio_operator(nxt, model, 0, warm[0])
    omega[0] = image.omega
    values[0], consumption = apply_consumption_operator(image.values, model.params)
    return _Chain(values, omega, consumption)


def _relative_change(new: np.ndarray, old: np.ndarray) -> float:
    return float(np.max(np.abs(new - old)) / max(1.0, float(np.max(np.abs(new)))))


def solve_fixed_point(params: MarketParams, pool: PoolSpec, constraint: ConstraintSet = ConstraintSet.NO_SHORT,
                      settings: Optional[SolverSettings] = None, check_growth: bool = True) -> SolveResult:
    """Value iteration on the phase chain until the phase-0 values settle.

    Args:
        params: Market parameters
        pool: Pool design
        constraint: Feasible portfolio set
        settings: Grid size, tolerance (relative sup-norm), iteration cap, quadrature size
        check_growth: Evaluate the growth condition first and log a warning if it fails

    Returns:
        SolveResult with values, policy and convergence diagnostics

    Raises:
        ConvergenceError: If the iteration cap is reached
        InvariantViolation: If transformed values leave the positive region
    """
    settings = settings or SolverSettings()
    logger.info(f"Solving LP problem: gamma={params.gamma}, N={params.n_periods}, eta={pool.eta}, f={pool.fee}, "
                f"constraint={constraint.value}, grid={settings.grid_size}, nodes={settings.nodes_per_dim}")
    model = LPModel(params, pool, constraint, settings)

    growth = None
    if check_growth:
        growth = growth_condition_check(params, constraint, pool, settings.grid_size, settings.nodes_per_dim)
        if not growth.satisfied:
            logger.warning("Growth condition not satisfied; value iteration may diverge")

    report = None
    if params.log_utility:
        report = consumption_report(params)
        logger.warning(f"Log-utility consumption: first-order optimum {report.foc:.10f}, "
                       f"stated closed form delta^N = {report.stated:.10f} (difference {report.discrepancy:+.3e})")

    form = ValueForm.RAW if params.log_utility else ValueForm.TRANSFORMED
    v0 = np.full(model.grid.size, 0.0 if params.log_utility else 1.0)
    warm: List[Optional[np.ndarray]] = [None] * params.n_periods
    history: List[float] = []

    for iteration in range(1, settings.max_iter + 1):
        chain = _apply_chain(model, v0, warm)
        warm = list(chain.omega)
        residual = _relative_change(chain.values[0], v0)
        history.append(residual)
        v0 = chain.values[0]
        if iteration % LOG_EVERY == 0:
            logger.debug(f"Iteration {iteration}: residual {residual:.3e}")
        if residual < settings.tol:
            break
    else:
        error_msg = f"Value iteration did not converge in {settings.max_iter} iterations (residual {history[-1]:.3e})"
        logger.error(error_msg)
        raise ConvergenceError(error_msg, residual_history=history)

    # One more pass so phases and policy all derive from the final phase-0 values
    chain = _apply_chain(model, v0, warm)
    final_residual = _relative_change(chain.values[0], v0)
    absolute_residual = float(np.max(np.abs(chain.values[0] - v0)))
    values = chain.values.copy()
    values[0] = v0

    if form is ValueForm.TRANSFORMED and np.min(v0) < 1.0 - 1e-9:
        error_msg = f"Transformed phase-0 value fell below 1 (min {np.min(v0):.12f})"
        logger.error(error_msg)
        raise InvariantViolation(error_msg)

    logger.info(f"Converged after {iteration} iterations, residual {residual:.3e} (absolute {absolute_residual:.3e})")
    return SolveResult(
        params=params,
        pool=pool,
        constraint=constraint,
        value=ValueFunction(model.grid, values, form),
        policy=PolicyTable(model.grid, chain.consumption, chain.omega),
        iterations=iteration,
        residual=final_residual,
        residual_history=history,
        absolute_residual=absolute_residual,
        growth=growth,
        consumption_report=report,
    )
