"""Independent reference implementations used only by the tests.

`absolute_step` follows one period with explicit deposits and prices and the
generic root-finding trade solver, so it shares no closed forms with the
ratio-space implementation. The enumerators brute-force small optimization
problems on grids.
"""
import itertools

import numpy as np

from ammlab.amm_pricing import CGMMM, solve_trade_generic


def _trade(pf, belief_ratio, y_a, y_b, f):
    """Apply the optimal trade of an investor with the given belief; fee stays in the pool."""
    fractions = solve_trade_generic(pf, belief_ratio, y_a / y_b, f)
    d_a, d_b = fractions.d_a, fractions.d_b
    paid_a = -d_a * y_a if d_a < 0.0 else 0.0
    paid_b = -d_b * y_b if d_b < 0.0 else 0.0
    new_a = y_a - d_a * y_a + f * paid_a
    new_b = y_b - d_b * y_b + f * paid_b
    return new_a, new_b, paid_a, paid_b


def absolute_step(s, xi, belief, ra, rb, eta, f):
    """One period with deposits (y^A, y^B) and prices (a, b); returns the ratio-space quantities."""
    pf = CGMMM(eta).as_custom()
    e = eta / (1.0 - eta)
    a, b = 1.0, 1.0
    y_b = 1.0
    y_a = e / s

    def value(ya, yb, pa=a, pb=b):
        return pa * ya + pb * yb

    v0 = value(y_a, y_b)
    fee = 0.0
    r1 = 1.0
    if xi:
        # The trader sees the ratio s/I, so believes A is worth I*a
        n_a, n_b, paid_a, paid_b = _trade(pf, belief * a / b, y_a, y_b, f)
        fee = f * (a * paid_a + b * paid_b) / v0
        r1 = value(n_a, n_b) / v0
        y_a, y_b = n_a, n_b

    v1 = value(y_a, y_b)
    n_a, n_b, _, _ = _trade(pf, a / b, y_a, y_b, f)
    r2 = value(n_a, n_b) / v1
    y_a, y_b = n_a, n_b
    s2 = e * y_b / y_a / (a / b)

    v2 = value(y_a, y_b)
    a, b = a * ra, b * rb
    r3 = value(y_a, y_b, a, b) / v2

    v3 = value(y_a, y_b, a, b)
    n_a, n_b, _, _ = _trade(pf, a / b, y_a, y_b, f)
    r4 = value(n_a, n_b, a, b) / v3
    y_a, y_b = n_a, n_b
    s3 = e * y_b / y_a / (a / b)
    return {"s2": s2, "s3": s3, "r1": r1, "r2": r2, "r3": r3, "r4": r4, "pool_return": r1 * r2 * r3 * r4,
            "fee": fee}


def simplex_grid(d, step, lower=None, cap=1.0):
    """Points of {omega >= lower, sum(omega) <= cap} on a lattice of the given step."""
    lower = np.zeros(d) if lower is None else np.asarray(lower, dtype=float)
    spare = cap - lower.sum()
    n = int(round(spare / step))
    points = [lower + step * np.array(c) for c in itertools.product(range(n + 1), repeat=d) if sum(c) <= n]
    return np.array(points)


def expected_utility(omega, excess, weights, coef, r_f, gamma):
    """E[coef * U(R^p)] for a batch of portfolios; U(R) = R^(1-gamma)/(1-gamma) or log R."""
    gross = r_f + np.asarray(omega) @ excess.T
    with np.errstate(invalid="ignore", divide="ignore"):
        if gamma == 1.0:
            util = np.where(gross > 0.0, np.log(np.where(gross > 0.0, gross, 1.0)), -np.inf)
        else:
            util = np.where(gross > 0.0, np.where(gross > 0.0, gross, 1.0) ** (1.0 - gamma) / (1.0 - gamma), -np.inf)
    return (util * coef) @ weights


def brute_force_portfolio(excess, weights, coef, r_f, gamma, step, lower=None, cap=1.0):
    """Best lattice portfolio for one grid point; excess is [K, d]."""
    grid = simplex_grid(excess.shape[-1], step, lower, cap)
    utils = expected_utility(grid, excess, weights, coef, r_f, gamma)
    best = int(np.argmax(utils))
    return grid[best], utils[best]
