"""Pool design: efficient CEX allocation, parameter sweeps and the (f, eta) surface.

Each sweep point solves the LP problem, builds the stationary law of the
exchange ratio and records stationary averages of the phase-0 utility and
policy. Points are independent and run on the worker pool.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError
from scipy import optimize

from ammlab.amm_pricing import PoolSpec
from ammlab.dp_solver import SolverSettings, solve_fixed_point
from ammlab.errors import DomainError
from ammlab.market_model import DEFAULT_NODES_PER_DIM, MarketParams, return_nodes
from ammlab.parallel import run_parallel
from ammlab.portfolio import ConstraintSet, certainty_equivalent, optimize_portfolios
from ammlab.stationary_analysis import stationary_distribution, stationary_expectation

logger = logging.getLogger(__name__)

INVEST_THRESHOLD = 1e-6
DEFAULT_FEES = (0.0005, 0.001, 0.003, 0.005, 0.01, 0.02)
DEFAULT_ETAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
ETA_REFINE_STEP = 0.05


class SweepAxis(str, Enum):
    F = "f"
    ETA = "eta"
    MU_A = "muA"
    MU_B = "muB"
    SIGMA_A = "sigmaA"
    SIGMA_B = "sigmaB"
    SIGMA_A_FIXED = "sigmaA_fixed_sigma"
    SIGMA_B_FIXED = "sigmaB_fixed_sigma"

    @property
    def is_design(self) -> bool:
        return self in (SweepAxis.F, SweepAxis.ETA)


@dataclass(frozen=True)
class EfficientAllocation:
    omega_hat_a: float
    omega_hat_b: float
    ratio: Optional[float]
    certainty_equivalent: float
    pool_ratio: float
    forced_certainty_equivalent: float

    @property
    def opportunity_gap(self) -> float:
        """Certainty-equivalent return lost by holding A and B in the pool's ratio."""
        return self.certainty_equivalent - self.forced_certainty_equivalent

    def to_dict(self) -> dict:
        return {"omega_hat_a": self.omega_hat_a, "omega_hat_b": self.omega_hat_b, "ratio": self.ratio,
                "certainty_equivalent": self.certainty_equivalent, "pool_ratio": self.pool_ratio,
                "forced_certainty_equivalent": self.forced_certainty_equivalent,
                "opportunity_gap": self.opportunity_gap}


def efficient_allocation(params: MarketParams, constraint: ConstraintSet = ConstraintSet.NO_SHORT,
                         nodes_per_dim: int = DEFAULT_NODES_PER_DIM, pool: Optional[PoolSpec] = None) -> EfficientAllocation:
    """One-period expected-utility optimum over CEX assets only.

    Also reports the best portfolio whose A:B dollar ratio is forced to the
    pool's eta/(1-eta), to measure the opportunity cost of the pool's split.
    """
    pool = pool or PoolSpec()
    ra, rb, w = return_nodes(params, nodes_per_dim)
    excess = np.stack([ra - params.r_f, rb - params.r_f], axis=-1)[None, :, :]
    sol = optimize_portfolios(excess, w, np.ones((1, w.size)), params.r_f, params.gamma, constraint)
    omega_a, omega_b = (float(x) for x in sol.omega[0])
    ce = float(certainty_equivalent(sol.value, params.gamma)[0])
    ratio = omega_a / omega_b if omega_b != 0.0 else None

    share = np.array([pool.value_weight, 1.0]) / (1.0 + pool.value_weight)
    mix = excess[0] @ share

    def expected_utility(t: float) -> float:
        gross = params.r_f + t * mix
        if np.any(gross <= 0.0):
            return -np.inf
        if params.gamma == 1.0:
            return float(w @ np.log(gross))
        return float(w @ gross ** (1.0 - params.gamma)) / (1.0 - params.gamma)

    found = optimize.minimize_scalar(lambda t: -expected_utility(t), bounds=(0.0, constraint.cap),
                                     method="bounded", options={"xatol": 1e-10})
    t_best = float(found.x) if expected_utility(float(found.x)) >= expected_utility(0.0) else 0.0
    forced = expected_utility(t_best)
    if params.gamma != 1.0:
        forced = forced * (1.0 - params.gamma)
    forced_ce = float(certainty_equivalent(np.array([forced]), params.gamma)[0])
    logger.debug(f"Efficient allocation ({omega_a:.6f}, {omega_b:.6f}), forced pool-ratio CE {forced_ce:.8f}")
    return EfficientAllocation(omega_a, omega_b, ratio, ce, pool.value_weight, forced_ce)


def partner_volatility(sigma_target: float, sigma_self: float, rho: float, reference: float) -> float:
    """Volatility of the other asset that keeps the exchange-rate volatility at `sigma_target`.

    Of the two roots, the nonnegative one closest to `reference` is returned.
    """
    disc = rho * rho * sigma_self * sigma_self - sigma_self * sigma_self + sigma_target * sigma_target
    if disc < 0.0:
        raise DomainError(f"No partner volatility gives sigma={sigma_target} with sigma_self={sigma_self}, rho={rho}")
    root = math.sqrt(disc)
    roots = [r for r in (rho * sigma_self - root, rho * sigma_self + root) if r >= 0.0]
    if not roots:
        raise DomainError(f"Partner volatility would be negative for sigma_self={sigma_self}, rho={rho}")
    return min(roots, key=lambda r: abs(r - reference))


def apply_axis(axis: SweepAxis, value: float, params: MarketParams,
               pool: PoolSpec) -> Tuple[MarketParams, PoolSpec, Optional[float]]:
    """Model at one sweep value; the third item is the co-varied partner volatility, if any."""
    try:
        if axis is SweepAxis.F:
            return params, pool.with_updates(fee=value), None
        if axis is SweepAxis.ETA:
            return params, pool.with_updates(eta=value), None
        if axis is SweepAxis.MU_A:
            return params.with_updates(mu_a=value), pool, None
        if axis is SweepAxis.MU_B:
            return params.with_updates(mu_b=value), pool, None
        if axis is SweepAxis.SIGMA_A:
            return params.with_updates(sigma_a=value), pool, None
        if axis is SweepAxis.SIGMA_B:
            return params.with_updates(sigma_b=value), pool, None
        if axis is SweepAxis.SIGMA_A_FIXED:
            partner = partner_volatility(params.sigma, value, params.rho, params.sigma_b)
            return params.with_updates(sigma_a=value, sigma_b=partner), pool, partner
        partner = partner_volatility(params.sigma, value, params.rho, params.sigma_a)
        return params.with_updates(sigma_b=value, sigma_a=partner), pool, partner
    except ValidationError as e:
        raise DomainError(f"Invalid {axis.value}={value}: {e.errors()[0]['msg']}") from e


@dataclass(frozen=True)
class SweepPoint:
    value: float
    expected_v0: float = float("nan")
    omega: Tuple[float, float, float] = (float("nan"),) * 3
    consumption: float = float("nan")
    invests: bool = False
    converged: bool = False
    iterations: int = 0
    residual: float = float("nan")
    partner: Optional[float] = None
    eta: Optional[float] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.converged

    def row(self) -> list:
        return [self.value, self.partner, self.eta, self.expected_v0, *self.omega, self.consumption,
                int(self.invests), int(self.converged), self.iterations, self.residual, self.error or ""]


SWEEP_HEADER = ["value", "partner_sigma", "eta", "expected_v0", "omega_m", "omega_a", "omega_b", "consumption",
                "invests", "converged", "iterations", "residual", "error"]


def evaluate_point(params: MarketParams, pool: PoolSpec, constraint: ConstraintSet,
                   settings: SolverSettings, value: float = float("nan"), partner: Optional[float] = None) -> SweepPoint:
    """Solve one model and average its phase-0 utility and policy under the stationary law."""
    result = solve_fixed_point(params, pool, constraint, settings, check_growth=False)
    dist = stationary_distribution(params, pool, result.grid, settings.kernel_nodes)
    expected_v0 = float(stationary_expectation(dist, result.value.utility(params)[0]))
    omega = stationary_expectation(dist, result.policy.omega[0].T)
    consumption = float(stationary_expectation(dist, result.policy.consumption))
    return SweepPoint(
        value=value,
        expected_v0=expected_v0,
        omega=tuple(float(x) for x in omega),
        consumption=consumption,
        invests=bool(omega[0] > INVEST_THRESHOLD),
        converged=True,
        iterations=result.iterations,
        residual=result.residual,
        partner=partner,
        eta=pool.eta,
    )


def _run_jobs(jobs: Sequence[tuple], constraint: ConstraintSet, settings: SolverSettings,
              threads: Optional[int]) -> List[SweepPoint]:
    def work(job):
        value, params, pool, partner = job
        return evaluate_point(params, pool, constraint, settings, value, partner)

    points = []
    for outcome in run_parallel(work, jobs, threads):
        value, _, pool, partner = outcome.item
        if outcome.success:
            points.append(outcome.result)
        else:
            err = outcome.error
            points.append(SweepPoint(value=value, partner=partner, eta=pool.eta, error=f"{type(err).__name__}: {err}"))
    return points


def _argmax(points: Sequence[SweepPoint], require_investment: bool) -> Optional[SweepPoint]:
    best = None
    for point in points:
        if not point.ok or (require_investment and not point.invests):
            continue
        if best is None or point.expected_v0 > best.expected_v0:
            best = point
    return best


@dataclass(frozen=True)
class SweepResult:
    axis: SweepAxis
    points: List[SweepPoint]
    argmax: Optional[float]

    @property
    def design_irrelevant(self) -> bool:
        return self.axis.is_design and not any(p.invests for p in self.points if p.ok)

    @property
    def flagged(self) -> List[float]:
        return [p.value for p in self.points if not p.ok]

    def rows(self) -> List[list]:
        return [p.row() for p in self.points]

    def to_dict(self) -> dict:
        return {"axis": self.axis.value, "argmax": self.argmax, "design_irrelevant": self.design_irrelevant,
                "flagged": self.flagged, "header": SWEEP_HEADER, "points": self.rows()}


def sweep(axis, values: Sequence[float], params: MarketParams, pool: PoolSpec,
          constraint: ConstraintSet = ConstraintSet.NO_SHORT, settings: Optional[SolverSettings] = None,
          threads: Optional[int] = None) -> SweepResult:
    """Solve the model at every value of one parameter.

    Failing points are flagged and kept; on the f and eta axes points where the
    LP holds no pool share are excluded from the argmax. Ties go to the smaller
    value.
    """
    axis = SweepAxis(axis)
    if len(values) == 0:
        raise DomainError("Sweep needs at least one value")
    settings = settings or SolverSettings()
    ordered = sorted(set(float(v) for v in values))
    jobs = []
    for value in ordered:
        p, q, partner = apply_axis(axis, value, params, pool)
        jobs.append((value, p, q, partner))
    logger.info(f"Sweeping {axis.value} over {len(ordered)} values")
    points = _run_jobs(jobs, constraint, settings, threads)
    best = _argmax(points, require_investment=axis.is_design)
    result = SweepResult(axis, points, best.value if best else None)
    if result.flagged:
        logger.warning(f"Sweep points failed and were excluded: {result.flagged}")
    return result


def refined_eta_values(center: float, step: float = ETA_REFINE_STEP) -> List[float]:
    return [round(v, 10) for v in (center - step, center, center + step) if 0.0 < v < 1.0]


def sweep_eta_refined(params: MarketParams, pool: PoolSpec, constraint: ConstraintSet = ConstraintSet.NO_SHORT,
                      settings: Optional[SolverSettings] = None, etas: Sequence[float] = DEFAULT_ETAS,
                      threads: Optional[int] = None) -> SweepResult:
    """Coarse eta sweep followed by one refinement around its argmax."""
    coarse = sweep(SweepAxis.ETA, etas, params, pool, constraint, settings, threads)
    if coarse.argmax is None:
        return coarse
    seen = {p.value for p in coarse.points}
    extra = [v for v in refined_eta_values(coarse.argmax) if v not in seen]
    if not extra:
        return coarse
    fine = sweep(SweepAxis.ETA, extra, params, pool, constraint, settings, threads)
    points = sorted(coarse.points + fine.points, key=lambda p: p.value)
    best = _argmax(points, require_investment=True)
    return SweepResult(SweepAxis.ETA, points, best.value if best else None)


@dataclass(frozen=True)
class OptimalEtaPoint:
    value: float
    eta_star: Optional[float]
    point: Optional[SweepPoint]


def sweep_with_optimal_eta(axis, values: Sequence[float], params: MarketParams, pool: PoolSpec,
                           constraint: ConstraintSet = ConstraintSet.NO_SHORT, settings: Optional[SolverSettings] = None,
                           etas: Sequence[float] = DEFAULT_ETAS, threads: Optional[int] = None) -> List[OptimalEtaPoint]:
    """For every value of `axis`, the best eta and the policy under it."""
    axis = SweepAxis(axis)
    if axis is SweepAxis.ETA:
        raise DomainError("The eta axis cannot be swept with eta optimized")
    settings = settings or SolverSettings()
    ordered = sorted(set(float(v) for v in values))
    jobs = []
    for value in ordered:
        p, q, partner = apply_axis(axis, value, params, pool)
        for eta in etas:
            jobs.append((value, p, q.with_updates(eta=eta), partner))
    points = _run_jobs(jobs, constraint, settings, threads)
    out = []
    for value in ordered:
        best = _argmax([pt for pt in points if pt.value == value], require_investment=True)
        out.append(OptimalEtaPoint(value, best.eta if best else None, best))
    return out


@dataclass(frozen=True)
class DesignResult:
    f_grid: np.ndarray
    eta_grid: np.ndarray
    expected_v0: np.ndarray
    omega_m: np.ndarray
    invests: np.ndarray
    ok: np.ndarray
    f_star: Optional[float]
    eta_star: Optional[float]
    design_irrelevant: bool
    errors: Dict[str, str] = field(default_factory=dict)

    def rows(self) -> List[list]:
        out = []
        for i, f in enumerate(self.f_grid):
            for j, eta in enumerate(self.eta_grid):
                out.append([float(f), float(eta), float(self.expected_v0[i, j]), float(self.omega_m[i, j]),
                            int(self.invests[i, j]), int(self.ok[i, j])])
        return out

    def to_dict(self) -> dict:
        return {"f_star": self.f_star, "eta_star": self.eta_star, "design_irrelevant": self.design_irrelevant,
                "f_grid": self.f_grid.tolist(), "eta_grid": self.eta_grid.tolist(),
                "expected_v0": self.expected_v0.tolist(), "omega_m": self.omega_m.tolist(),
                "errors": dict(self.errors)}


DESIGN_HEADER = ["f", "eta", "expected_v0", "omega_m", "invests", "ok"]


def optimal_design(params: MarketParams, f_grid: Sequence[float] = DEFAULT_FEES, eta_grid: Sequence[float] = DEFAULT_ETAS,
                   constraint: ConstraintSet = ConstraintSet.NO_SHORT, settings: Optional[SolverSettings] = None,
                   threads: Optional[int] = None) -> DesignResult:
    """Tensor sweep over (f, eta) and the pair maximizing stationary-expected utility.

    If the LP never holds the pool the design does not matter; the best cell is
    still reported, with `design_irrelevant` set.
    """
    if len(f_grid) == 0 or len(eta_grid) == 0:
        raise DomainError("Design grids must be nonempty")
    settings = settings or SolverSettings()
    fs = np.array(sorted(set(float(f) for f in f_grid)))
    etas = np.array(sorted(set(float(e) for e in eta_grid)))
    jobs = []
    for f in fs:
        for eta in etas:
            try:
                pool = PoolSpec(eta=eta, fee=f)
            except ValidationError as e:
                raise DomainError(f"Invalid design cell f={f}, eta={eta}: {e.errors()[0]['msg']}") from e
            jobs.append((f, params, pool, None))
    logger.info(f"Design surface over {fs.size} fees x {etas.size} weights")
    points = _run_jobs(jobs, constraint, settings, threads)

    shape = (fs.size, etas.size)
    expected = np.array([p.expected_v0 for p in points]).reshape(shape)
    omega_m = np.array([p.omega[0] for p in points]).reshape(shape)
    invests = np.array([p.invests for p in points]).reshape(shape)
    ok = np.array([p.ok for p in points]).reshape(shape)
    errors = {f"f={p.value},eta={p.eta}": p.error for p in points if p.error}

    irrelevant = not bool(np.any(invests & ok))
    best = _argmax(points, require_investment=not irrelevant)
    if irrelevant:
        logger.warning("LP never invests in the pool on this grid; design is irrelevant")
    return DesignResult(fs, etas, expected, omega_m, invests, ok,
                        best.value if best else None, best.eta if best else None, irrelevant, errors)
