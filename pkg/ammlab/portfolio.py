"""Constraint sets and the batched one-period portfolio optimizer.

Weights are ordered (omega^M, omega^A, omega^B): the pool, asset A on the
centralized exchange, asset B on the centralized exchange. The remainder
1 - sum(omega) earns the risk-free return. The CEX-only problem drops the
pool coordinate.

The optimizer maximizes sum_k w_k c_gk u(R^p_gk) for every grid point g at
once, with u(R) = R^(1-gamma) (minimized instead when gamma > 1) or log R.
Each grid point runs a primal active-set Newton method on the polytope
{omega >= lower, sum(omega) <= cap}.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ammlab.errors import DomainError, NumericalError

logger = logging.getLogger(__name__)

MAX_NEWTON_ITER = 60
NEWTON_TOL = 1e-12
MAX_HALVINGS = 60
ARMIJO = 1e-4


class ConstraintSet(str, Enum):
    NO_SHORT = "no_short"
    SHORT_OK = "short_ok"

    @classmethod
    def parse(cls, name: str) -> "ConstraintSet":
        key = str(name).strip().lower().replace("-", "_")
        aliases = {"noshort": cls.NO_SHORT, "no_short": cls.NO_SHORT,
                   "shortok": cls.SHORT_OK, "short_ok": cls.SHORT_OK}
        if key not in aliases:
            raise DomainError(f"Unknown constraint set {name!r}; expected 'no_short' or 'short_ok'")
        return aliases[key]

    def lower_bounds(self, include_dex: bool = True) -> np.ndarray:
        lower = np.array([0.0, 0.0, 0.0]) if self is ConstraintSet.NO_SHORT else np.array([0.0, -1.0, -1.0])
        return lower if include_dex else lower[1:]

    @property
    def cap(self) -> float:
        return 1.0 if self is ConstraintSet.NO_SHORT else 2.0

    def halfspaces(self, include_dex: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        """(A, b) with the set equal to {omega : A omega <= b}; the last row is the cap."""
        lower = self.lower_bounds(include_dex)
        d = lower.size
        A = np.vstack([-np.eye(d), np.ones((1, d))])
        b = np.concatenate([-lower, [self.cap]])
        return A, b

    def vertices(self, include_dex: bool = True) -> np.ndarray:
        lower = self.lower_bounds(include_dex)
        spare = self.cap - lower.sum()
        return np.vstack([lower, lower + spare * np.eye(lower.size)])

    def centroid(self, include_dex: bool = True) -> np.ndarray:
        return self.vertices(include_dex).mean(axis=0)

    def contains(self, omega: np.ndarray, include_dex: bool = True, tol: float = 1e-9) -> np.ndarray:
        omega = np.atleast_2d(omega)
        A, b = self.halfspaces(include_dex)
        return np.all(omega @ A.T <= b + tol, axis=-1)


def portfolio_excess_returns(pool_return: np.ndarray, rule, r_f: float) -> np.ndarray:
    """Stack (R^M - R_f, R^A - R_f, R^B - R_f) into an array of shape [G, K, 3]."""
    pool_return = np.asarray(pool_return, dtype=float)
    ra = np.broadcast_to(rule.ra, pool_return.shape)
    rb = np.broadcast_to(rule.rb, pool_return.shape)
    return np.stack([pool_return - r_f, ra - r_f, rb - r_f], axis=-1)


def certainty_equivalent(value: np.ndarray, gamma: float) -> np.ndarray:
    """Gross return whose utility equals the expected utility `value`."""
    value = np.asarray(value, dtype=float)
    if gamma == 1.0:
        return np.exp(value)
    return value ** (1.0 / (1.0 - gamma))


@dataclass(frozen=True)
class PortfolioSolution:
    omega: np.ndarray
    value: np.ndarray
    converged: np.ndarray
    iterations: int


class _Objective:
    """Weighted expected utility and its derivatives for a batch of grid points."""

    def __init__(self, excess: np.ndarray, weights: np.ndarray, coef: np.ndarray, r_f: float, gamma: float):
        self.excess = excess
        self.wc = np.asarray(weights, dtype=float)[None, :] * np.asarray(coef, dtype=float)
        self.r_f = r_f
        self.exponent = None if gamma == 1.0 else 1.0 - gamma
        # Minimize sense * value
        self.sense = 1.0 if gamma > 1.0 else -1.0

    def gross(self, omega: np.ndarray, rows: np.ndarray) -> np.ndarray:
        return self.r_f + np.einsum("gkd,gd->gk", self.excess[rows], omega)

    def value(self, omega: np.ndarray, rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        gross = self.gross(omega, rows)
        feasible = np.all(gross > 0.0, axis=1)
        safe = np.where(gross > 0.0, gross, 1.0)
        utility = np.log(safe) if self.exponent is None else safe ** self.exponent
        return np.sum(self.wc[rows] * utility, axis=1), feasible

    def loss(self, omega: np.ndarray, rows: np.ndarray) -> np.ndarray:
        value, feasible = self.value(omega, rows)
        return np.where(feasible, self.sense * value, np.inf)

    def derivatives(self, omega: np.ndarray, rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        gross = self.gross(omega, rows)
        if self.exponent is None:
            du = 1.0 / gross
            d2u = -du * du
        else:
            p = self.exponent
            du = p * gross ** (p - 1.0)
            d2u = p * (p - 1.0) * gross ** (p - 2.0)
        wc = self.wc[rows]
        X = self.excess[rows]
        grad = self.sense * np.einsum("gk,gkd->gd", wc * du, X)
        hess = self.sense * np.einsum("gk,gkd,gke->gde", wc * d2u, X, X)
        return grad, hess


def _kkt_step(hess: np.ndarray, grad: np.ndarray, A: np.ndarray, active: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Newton step restricted to the active face, with the face multipliers.

    Inactive constraint rows are replaced by identity rows so every system in
    the batch has the same size.
    """
    n, d = grad.shape
    m = A.shape[0]
    act = active.astype(float)
    ridge = 1e-12 * np.trace(hess, axis1=1, axis2=2) / d + 1e-30
    K = np.zeros((n, d + m, d + m))
    K[:, :d, :d] = hess + ridge[:, None, None] * np.eye(d)
    K[:, :d, d:] = A.T[None, :, :] * act[:, None, :]
    K[:, d:, :d] = A[None, :, :] * act[:, :, None]
    K[:, d:, d:] = np.eye(m)[None, :, :] * (1.0 - act)[:, :, None]
    rhs = np.zeros((n, d + m))
    rhs[:, :d] = -grad
    try:
        sol = np.linalg.solve(K, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        sol = np.stack([np.linalg.lstsq(K[i], rhs[i], rcond=None)[0] for i in range(n)])
    return sol[:, :d], sol[:, d:]


def _solve_from(objective: _Objective, rows: np.ndarray, start: np.ndarray, A: np.ndarray, b: np.ndarray,
                lower: np.ndarray, max_iter: int, tol: float):
    n, d = start.shape
    omega = start.copy()
    slack0 = b[None, :] - omega @ A.T
    active = slack0 <= 1e-12 * (1.0 + np.abs(b))[None, :]
    loss = objective.loss(omega, rows)
    done = ~np.isfinite(loss)
    converged = np.zeros(n, dtype=bool)
    iterations = 0

    for iterations in range(1, max_iter + 1):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        grad, hess = objective.derivatives(omega[idx], rows[idx])
        step, lam = _kkt_step(hess, grad, A, active[idx])
        decrement = -np.einsum("gd,gd->g", grad, step)
        stationary = decrement <= tol * np.maximum(np.abs(loss[idx]), 1e-300)

        lam_active = np.where(active[idx], lam, np.inf)
        worst = np.argmin(lam_active, axis=1)
        worst_lam = lam_active[np.arange(idx.size), worst]
        grad_scale = np.max(np.abs(grad), axis=1) + 1e-300
        release = stationary & (worst_lam < -1e-9 * grad_scale)
        finished = stationary & ~release
        done[idx[finished]] = True
        converged[idx[finished]] = True
        active[idx[release], worst[release]] = False

        move = ~stationary
        if not move.any():
            continue
        midx = idx[move]
        p = step[move]
        slope = -decrement[move]

        Ap = p @ A.T
        slack = np.maximum(b[None, :] - omega[midx] @ A.T, 0.0)
        blocking = (~active[midx]) & (Ap > 0.0)
        ratios = np.where(blocking, slack / np.where(blocking, Ap, 1.0), np.inf)
        block = np.argmin(ratios, axis=1)
        t_max = np.minimum(1.0, ratios[np.arange(midx.size), block])
        hits_bound = ratios[np.arange(midx.size), block] <= 1.0

        t = t_max.copy()
        accepted = np.zeros(midx.size, dtype=bool)
        halved = np.zeros(midx.size, dtype=bool)
        for _ in range(MAX_HALVINGS):
            pending = np.flatnonzero(~accepted)
            if pending.size == 0:
                break
            trial = omega[midx[pending]] + t[pending, None] * p[pending]
            trial_loss = objective.loss(trial, rows[midx[pending]])
            ok = trial_loss <= loss[midx[pending]] + ARMIJO * t[pending] * slope[pending]
            good = pending[ok]
            accepted[good] = True
            omega[midx[good]] = trial[ok]
            loss[midx[good]] = trial_loss[ok]
            bad = pending[~ok]
            t[bad] *= 0.5
            halved[bad] = True

        # No decrease found: the iterate is optimal to working precision
        stalled = ~accepted
        done[midx[stalled]] = True
        converged[midx[stalled]] = True

        added = accepted & ~halved & hits_bound
        for j in np.flatnonzero(added):
            g, c = midx[j], block[j]
            active[g, c] = True
            if c < d:
                omega[g, c] = lower[c]

    return omega, loss, converged, iterations


def optimize_portfolios(excess: np.ndarray, weights: np.ndarray, coef: np.ndarray, r_f: float, gamma: float,
                        constraint: ConstraintSet, warm_start: Optional[np.ndarray] = None,
                        max_iter: int = MAX_NEWTON_ITER, tol: float = NEWTON_TOL) -> PortfolioSolution:
    """Optimal weights for every grid point.

    Args:
        excess: Excess returns over R_f, shape [G, K, d]; d=3 with the pool, d=2 without
        weights: Node probabilities, shape [K]
        coef: Positive per-node multipliers (continuation values), shape [G, K]
        r_f: Gross risk-free return
        gamma: Relative risk aversion
        constraint: Feasible set
        warm_start: Previous optimal weights [G, d]; cold multi-start when None

    Returns:
        PortfolioSolution with the expected utility at the optimum

    Raises:
        NumericalError: If no start yields a finite objective or Newton iterations run out
    """
    excess = np.asarray(excess, dtype=float)
    G, K, d = excess.shape
    include_dex = d == 3
    A, b = constraint.halfspaces(include_dex)
    lower = constraint.lower_bounds(include_dex)
    objective = _Objective(excess, weights, coef, r_f, gamma)
    all_rows = np.arange(G)

    if warm_start is not None:
        starts: List[np.ndarray] = [np.asarray(warm_start, dtype=float)]
    else:
        points = [constraint.centroid(include_dex)] + list(constraint.vertices(include_dex))
        starts = [np.broadcast_to(pt, (G, d)).copy() for pt in points]

    best_omega = np.zeros((G, d))
    best_loss = np.full(G, np.inf)
    best_converged = np.zeros(G, dtype=bool)
    total_iter = 0
    for start in starts:
        omega, loss, converged, iters = _solve_from(objective, all_rows, start, A, b, lower, max_iter, tol)
        total_iter += iters
        better = loss < best_loss
        best_omega[better] = omega[better]
        best_loss[better] = loss[better]
        best_converged[better] = converged[better]

    if warm_start is not None and not (best_converged.all() and np.isfinite(best_loss).all()):
        retry = np.flatnonzero(~best_converged | ~np.isfinite(best_loss))
        logger.debug(f"Warm start failed at {retry.size} grid points; restarting cold")
        cold = optimize_portfolios(excess[retry], weights, np.asarray(coef)[retry], r_f, gamma, constraint,
                                   max_iter=max_iter, tol=tol)
        best_omega[retry] = cold.omega
        best_loss[retry] = np.where(np.isfinite(cold.value), objective.sense * cold.value, np.inf)
        best_converged[retry] = cold.converged

    if not np.isfinite(best_loss).all():
        worst = int(np.flatnonzero(~np.isfinite(best_loss))[0])
        error_msg = f"No feasible portfolio with positive gross returns at grid point {worst}"
        logger.error(error_msg)
        raise NumericalError(error_msg, detail={"grid_point": worst})
    if not best_converged.all():
        worst = int(np.flatnonzero(~best_converged)[0])
        error_msg = f"Portfolio optimizer did not converge within {max_iter} Newton steps at grid point {worst}"
        logger.error(error_msg)
        raise NumericalError(error_msg, detail={"grid_point": worst, "omega": best_omega[worst].tolist()})

    value, _ = objective.value(best_omega, all_rows)
    return PortfolioSolution(best_omega, value, best_converged, total_iter)
