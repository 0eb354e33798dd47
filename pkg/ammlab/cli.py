#!/usr/bin/env python3
"""
ammlab command-line runner

Solves the LP problem for a config, sweeps one parameter or the (f, eta)
design surface, estimates market parameters from kline files, runs the fee
regression and writes seeded ratio trajectories. Results are written as
CSV/JSON under the output directory; short machine-readable echoes go to
stdout and logs to stderr.

Exit codes: 0 success, 2 usage/config/data error, 3 numerical failure,
1 anything unexpected.
"""
import argparse
import logging
import sys
import traceback
from pathlib import Path
from typing import List, Optional

import numpy as np

from ammlab import export
from ammlab.config import RunConfig, configure_logging
from ammlab.design_optimizer import (DEFAULT_ETAS, DEFAULT_FEES, DESIGN_HEADER, INVEST_THRESHOLD, SWEEP_HEADER,
                                     SweepAxis, efficient_allocation, optimal_design, sweep, sweep_with_optimal_eta)
from ammlab.dp_solver import solve_fixed_point
from ammlab.errors import AmmLabError, ConfigError, DataError, DomainError, NumericalError
from ammlab.market_data import KlineSchema, estimate_params, load_klines, load_table, ols
from ammlab.pool_dynamics import net_profit_condition
from ammlab.stationary_analysis import TRACE_HEADER, simulate_chain, stationary_distribution, stationary_expectation

logger = logging.getLogger("ammlab.cli")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

COMMANDS = [
    {
        "name": "solve",
        "description": "Solve the LP's consumption/investment problem and its stationary averages",
        "notes": "Writes value_function, policy, stationary, summary and solve artifacts",
    },
    {
        "name": "sweep",
        "description": "Solve across values of one parameter",
        "notes": "Axes: " + ", ".join(a.value for a in SweepAxis),
    },
    {
        "name": "design",
        "description": "Expected utility over the (f, eta) grid and the best pool design",
        "notes": "Flags design_irrelevant when the LP never holds the pool",
    },
    {
        "name": "estimate",
        "description": "Estimate return parameters from two kline files",
        "notes": "Prints a config fragment (muA, muB, sigmaA, sigmaB, rho)",
    },
    {
        "name": "regress",
        "description": "OLS of one table column on others, with two-sided p-values",
        "notes": "Table needs a header row",
    },
    {
        "name": "simulate",
        "description": "Seeded Monte-Carlo trajectory of the exchange-rate ratio",
        "notes": "Writes trajectory.csv with the per-period return decomposition",
    },
]


def parse_values(text: str) -> List[float]:
    """Comma list ("0.001,0.003") or inclusive range "start:stop:count"."""
    text = text.strip()
    if not text:
        return []
    try:
        if ":" in text:
            start, stop, count = text.split(":")
            return np.linspace(float(start), float(stop), int(count)).tolist()
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"Cannot parse values {text!r}: {e}") from e


def load_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    formats = [args.format] if args.format else None
    return config.with_overrides(args.set or [], directory=args.out, formats=formats, seed=args.seed)


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.output.directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"Output directory {out} is not writable: {e}") from e
    return out


def cmd_solve(args, config: RunConfig) -> int:
    params, pool = config.market, config.pool
    result = solve_fixed_point(params, pool, config.constraint, config.solver)
    dist = stationary_distribution(params, pool, result.grid, config.solver.kernel_nodes)
    utility = result.value.utility(params)
    omega = stationary_expectation(dist, result.policy.omega[0].T)
    invests = bool(omega[0] > INVEST_THRESHOLD)

    summary = {
        "expected_v0": float(stationary_expectation(dist, utility[0])),
        "expected_omega": {"dex": float(omega[0]), "cex_a": float(omega[1]), "cex_b": float(omega[2])},
        "expected_consumption": float(stationary_expectation(dist, result.policy.consumption)),
        "invests_on_dex": invests,
        "note": None if invests else "LP does not invest on DEX",
        "iterations": result.iterations,
        "residual": result.residual,
        "contraction_ratio": result.contraction_ratio,
        "stationary_degenerate": dist.degenerate,
        "net_profit": net_profit_condition(params, pool).to_dict(),
        "efficient_allocation": efficient_allocation(params, config.constraint, config.solver.nodes_per_dim,
                                                     pool).to_dict(),
        "config": config.to_mapping(),
    }

    out = _out_dir(config)
    formats = config.output.formats
    if "csv" in formats:
        n = params.n_periods
        export.write_csv(out / "value_function.csv", ["s"] + [f"v_{k}" for k in range(n)],
                         [[s, *utility[:, i]] for i, s in enumerate(result.grid)])
        rows = []
        for k in range(n):
            for i, s in enumerate(result.grid):
                c = result.policy.consumption[i] if k == 0 else None
                rows.append([s, k, c, *result.policy.omega[k, i]])
        export.write_csv(out / "policy.csv", ["s", "phase", "consumption", "omega_m", "omega_a", "omega_b"], rows)
        export.write_csv(out / "stationary.csv", ["s", "mass"], dist.rows())
    if "json" in formats:
        export.write_json(out / "solve.json", result.to_dict())
    export.write_json(out / "summary.json", summary)

    print(f"expected_v0={summary['expected_v0']:.10g}")
    print(f"omega_m={omega[0]:.6g} omega_a={omega[1]:.6g} omega_b={omega[2]:.6g}")
    if not invests:
        print("LP does not invest on DEX")
    return EXIT_OK


def cmd_sweep(args, config: RunConfig) -> int:
    values = parse_values(args.values)
    if not values:
        raise ConfigError("Sweep needs at least one value")
    axis = SweepAxis(args.axis)
    out = _out_dir(config)
    if args.optimal_eta:
        etas = parse_values(args.etas) if args.etas else list(DEFAULT_ETAS)
        found = sweep_with_optimal_eta(axis, values, config.market, config.pool, config.constraint, config.solver,
                                       etas, args.threads)
        rows = [[p.value, p.eta_star, *(p.point.row()[3:] if p.point else [None] * 10)] for p in found]
        header = [axis.value, "eta_star"] + SWEEP_HEADER[3:]
        payload = {"axis": axis.value, "header": header, "points": rows}
        export.write_artifacts(out, f"sweep_{axis.value}_optimal_eta", config.output.formats, header, rows, payload)
        for p in found:
            print(f"{axis.value}={p.value:g} eta_star={p.eta_star}")
        return EXIT_OK

    result = sweep(axis, values, config.market, config.pool, config.constraint, config.solver, args.threads)
    header = [axis.value] + SWEEP_HEADER[1:]
    export.write_artifacts(out, f"sweep_{axis.value}", config.output.formats, header, result.rows(), result.to_dict())
    print(f"argmax {axis.value}={result.argmax}")
    if result.design_irrelevant:
        print("design_irrelevant=true")
    return EXIT_OK


def cmd_design(args, config: RunConfig) -> int:
    fees = parse_values(args.fees) if args.fees else list(DEFAULT_FEES)
    etas = parse_values(args.etas) if args.etas else list(DEFAULT_ETAS)
    result = optimal_design(config.market, fees, etas, config.constraint, config.solver, args.threads)
    export.write_artifacts(_out_dir(config), "design_surface", config.output.formats, DESIGN_HEADER, result.rows(),
                           result.to_dict())
    print(f"f_star={result.f_star} eta_star={result.eta_star} design_irrelevant={str(result.design_irrelevant).lower()}")
    return EXIT_OK


def cmd_estimate(args, config: RunConfig) -> int:
    schema = KlineSchema(has_header=args.header, time_column=args.time_column, close_column=args.close_column,
                         delimiter=args.delimiter)
    estimate = estimate_params(load_klines(args.a, schema), load_klines(args.b, schema))
    export.write_json(_out_dir(config) / "estimate.json", estimate.to_dict())
    sys.stdout.write(export.dumps(estimate.to_config_fragment()))
    return EXIT_OK


def cmd_regress(args, config: RunConfig) -> int:
    y, X = load_table(args.table, args.response, args.regressors, args.delimiter)
    result = ols(y, X, args.regressors)
    export.write_json(_out_dir(config) / "regression.json", result.to_dict())
    for name, coef, p in zip(result.names, result.coefficients, result.p_values):
        print(f"{name}: coefficient={coef:.6g} p_value={p:.4g}")
    return EXIT_OK


def cmd_simulate(args, config: RunConfig) -> int:
    trace = simulate_chain(config.market, config.pool, args.steps, config.seed, args.s0)
    path = export.write_csv(_out_dir(config) / "trajectory.csv", TRACE_HEADER, trace.rows())
    print(f"wrote {path}")
    return EXIT_OK


HANDLERS = {
    "solve": cmd_solve,
    "sweep": cmd_sweep,
    "design": cmd_design,
    "estimate": cmd_estimate,
    "regress": cmd_regress,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults to the built-in calibration)")
    common.add_argument("--out", help="Output directory (overrides output.directory)")
    common.add_argument("--format", choices=["csv", "json"], help="Write only this format")
    common.add_argument("--seed", type=int, help="Random seed")
    common.add_argument("--threads", type=int, help="Worker threads (fallback: AMMLAB_THREADS, then CPU count)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="Override a config key, e.g. --set f=0.003 or --set solver.grid_size=51")
    common.add_argument("-v", "--verbose", action="count", default=0, help="Debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")

    epilog = "\n".join(f"  {c['name']:<9} {c['notes']}" for c in COMMANDS)
    parser = argparse.ArgumentParser(prog="ammlab", description="AMM liquidity-provision and pool-design toolkit",
                                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {c["name"]: sub.add_parser(c["name"], parents=[common], help=c["description"],
                                         description=c["description"]) for c in COMMANDS}

    p = parsers["sweep"]
    p.add_argument("--axis", required=True, choices=[a.value for a in SweepAxis], help="Parameter to vary")
    p.add_argument("--values", required=True, help="Comma list or start:stop:count")
    p.add_argument("--optimal-eta", action="store_true", help="Optimize eta at every value")
    p.add_argument("--etas", help="Eta grid for --optimal-eta")

    p = parsers["design"]
    p.add_argument("--fees", help="Fee grid (comma list or start:stop:count)")
    p.add_argument("--etas", help="Eta grid (comma list or start:stop:count)")

    p = parsers["estimate"]
    p.add_argument("--a", required=True, help="Kline file of asset A (quoted in the common numeraire)")
    p.add_argument("--b", required=True, help="Kline file of asset B")
    p.add_argument("--header", action="store_true", help="Files start with a header row")
    p.add_argument("--time-column", type=int, default=0)
    p.add_argument("--close-column", type=int, default=4)
    p.add_argument("--delimiter", default=",")

    p = parsers["regress"]
    p.add_argument("--table", required=True, help="Delimited table with a header row")
    p.add_argument("--response", required=True)
    p.add_argument("--regressors", required=True, nargs="+")
    p.add_argument("--delimiter", default=",")

    p = parsers["simulate"]
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--s0", type=float, default=1.0, help="Initial ratio (inside the band)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(-1 if args.quiet else args.verbose)
    try:
        config = load_config(args)
        return HANDLERS[args.command](args, config)
    except (ConfigError, DomainError, DataError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_USAGE
    except NumericalError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_NUMERICAL
    except AmmLabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_UNEXPECTED
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {type(e).__name__}: {e}")
        logger.error(traceback.format_exc())
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
