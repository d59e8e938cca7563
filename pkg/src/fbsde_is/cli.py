"""Command-line entry point.

    fbsde-is simulate      --config run.json [--out DIR] [--dump-paths]
    fbsde-is solve         --config run.json [--out DIR]
    fbsde-is reference     (--config run.json | --sigma S --T T [--x X] [--epsilon E])
    fbsde-is estimate      --config run.json [--out DIR]
    fbsde-is table1        --config table1.json [--out DIR]
    fbsde-is early-horizon --config run.json [--out DIR]

Exit status: 0 on success, 1 on invalid input, 2 on numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, Table1Config, load_config, parse_config, with_overrides
from .control import EstimatorError, importance_sample, make_policy
from .harness import (EarlyHorizonError, ExperimentError, build_problem, fit,
                      run_early_horizon, run_experiment, write_estimates_csv, write_table_csv)
from .lsmc import LsmcError
from .model import ModelError, exit_probability_from_value
from .pde import PdeError, PdeGrid, solve_exit_probability, value_from_probability, write_solution_csv
from .sde import SimulationError, simulate_forward, write_batch_csv
from .basis import write_coefficients_csv

OUT_ENV = "FBSDE_IS_OUT"
NUMERICAL = (LsmcError, ExperimentError, PdeError, EstimatorError, SimulationError,
             EarlyHorizonError, FloatingPointError)

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./results)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--workers", type=int, default=1, help="parallel workers (output does not depend on it)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="fbsde-is", description="FBSDE value functions and adaptive importance sampling")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("simulate", parents=[common], help="forward ensemble and exit statistics")
    s.add_argument("--dump-paths", action="store_true", help="write every trajectory to paths.csv")
    sub.add_parser("solve", parents=[common], help="one backward solve with coefficient/diagnostic dumps")
    r = sub.add_parser("reference", parents=[common], help="PDE reference value")
    r.add_argument("--sigma", type=float)
    r.add_argument("--T", type=float)
    r.add_argument("--x", type=float, default=None)
    r.add_argument("--epsilon", type=float, default=None)
    sub.add_parser("estimate", parents=[common], help="fit, then importance-sample")
    sub.add_parser("table1", parents=[common], help="all rows of a table config")
    sub.add_parser("early-horizon", parents=[common], help="tilted drift, stop at the last exit")
    return p


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or "results")


def _dump(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _metadata(out: Path, args, started: float) -> None:
    # wall-clock data stays out of the result files so those are reproducible
    _dump(out / "metadata.json", {"command": args.command, "argv": sys.argv[1:],
                                  "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
                                  "elapsed_seconds": round(time.time() - started, 3)})


def _need_config(args, model=ExperimentConfig):
    if not args.config:
        raise ConfigError(f"{args.command} needs --config PATH")
    config = load_config(args.config, model)
    if args.seed is not None:
        if model is Table1Config:
            rows = [with_overrides(row, seed=args.seed) for row in config.rows]
            config = Table1Config(rows=rows)
        else:
            config = with_overrides(config, seed=args.seed)
    return config


def cmd_simulate(args, out):
    config = _need_config(args)
    spec, grid = build_problem(config)
    out.mkdir(parents=True, exist_ok=True)
    batch = simulate_forward(spec, grid, [config.x0], config.M, config.seed, workers=args.workers)
    ok = ~batch.failed
    frac = float(batch.exited[ok].mean())
    summary = {"paths": int(batch.n_paths), "failed": int(batch.failed.sum()),
               "exit_fraction": frac,
               "exit_fraction_se": float(np.sqrt(frac * (1 - frac) / max(int(ok.sum()), 1))),
               "mean_exit_time": (float(batch.exit_step[batch.exited].mean() * batch.dt)
                                  if batch.exited.any() else None)}
    _dump(out / "simulation.json", summary)
    if args.dump_paths:
        write_batch_csv(batch, out / "paths.csv")
    print(f"exit fraction {frac:.4f} over {int(ok.sum())} paths")
    return True


def cmd_solve(args, out):
    config = _need_config(args)
    out.mkdir(parents=True, exist_ok=True)
    sol, _, _ = fit(config, config.seed)
    write_coefficients_csv(sol.coeffs, out / "coefficients.csv")
    sol.diagnostics.write_csv(out / "diagnostics.csv")
    prob = exit_probability_from_value(sol.gamma_estimate, config.epsilon)
    _dump(out / "result.json", {"gamma_estimate": sol.gamma_estimate,
                                "standard_error": sol.standard_error,
                                "exit_probability": prob.probability,
                                "exit_probability_clamped": prob.clamped,
                                "diagnostics": sol.diagnostics.summary()})
    print(f"gamma_estimate {sol.gamma_estimate:.6f} (se {sol.standard_error:.2g})")
    return True


def cmd_reference(args, out):
    if args.config:
        config = _need_config(args)
        changes = {"sigma": args.sigma, "T": args.T, "x0": args.x, "epsilon": args.epsilon}
        config = with_overrides(config, **changes)
    else:
        if args.sigma is None or args.T is None:
            raise ConfigError("reference needs --config or both --sigma and --T")
        data = {"sigma": args.sigma, "T": args.T}
        if args.x is not None:
            data["x0"] = args.x
        if args.epsilon is not None:
            data["epsilon"] = args.epsilon
        if args.T > 0:
            data["dt"] = min(1e-3, args.T)
        config = parse_config(data)
    spec, _ = build_problem(config)
    p = config.pde
    sol = solve_exit_probability(spec, PdeGrid.for_horizon(config.T, p.dt, n_x=p.n_x, x_min=p.x_min))
    value = value_from_probability(sol(config.x0), config.epsilon)
    if args.out or os.environ.get(OUT_ENV):
        out.mkdir(parents=True, exist_ok=True)
        write_solution_csv(sol, out / "psi.csv")
        _dump(out / "reference.json", {"V_ref": value, "psi": float(sol(config.x0)),
                                       "sigma": config.sigma, "T": config.T, "x": config.x0,
                                       "epsilon": config.epsilon})
    print(f"{value:.4f}")
    return bool(args.out or os.environ.get(OUT_ENV))


def cmd_estimate(args, out):
    config = _need_config(args)
    out.mkdir(parents=True, exist_ok=True)
    sol, basis, _ = fit(config, config.seed)
    spec, grid = build_problem(config)
    policy = make_policy(basis, sol.coeffs, spec, config.clip)
    report = importance_sample(spec, grid, [config.x0], config.is_paths or config.M, config.seed,
                               policy, workers=args.workers, weights_path=out / "weights.csv")
    (out / "is_report.json").write_text(report.to_json() + "\n")
    print(f"estimate {report.estimate:.6g}  free energy {report.free_energy:.4f}  "
          f"variance reduction {report.variance_reduction_factor:.3g}  ESS {report.ess:.1f}")
    return True


def cmd_table1(args, out):
    config = _need_config(args, Table1Config)
    out.mkdir(parents=True, exist_ok=True)
    results = [run_experiment(row, workers=args.workers) for row in config.rows]
    write_table_csv(results, out / "table1.csv")
    _dump(out / "table1.json", [r.to_dict() for r in results])
    print(f"{'id':<12} {'V_ref':>8} {'V_bar':>8} {'S2':>10}")
    for r in results:
        ref = f"{r.reference:8.4f}" if r.reference is not None else f"{'-':>8}"
        print(f"{r.id:<12} {ref} {r.mean:8.4f} {r.variance:10.3g}")
    return True


def cmd_early(args, out):
    config = _need_config(args)
    if config.drift_tilt is None:
        raise ConfigError("drift_tilt: required for early-horizon runs")
    out.mkdir(parents=True, exist_ok=True)
    result = run_early_horizon(config, workers=args.workers)
    _dump(out / "result.json", result.to_dict())
    write_estimates_csv(result, out / "estimates.csv")
    horizons = [h for h in result.effective_horizons if h is not None]
    print(f"V_bar {result.mean:.4f}  S2 {result.variance:.3g}  mean T~ {np.mean(horizons):.3f}")
    return True


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "reference": cmd_reference,
            "estimate": cmd_estimate, "table1": cmd_table1, "early-horizon": cmd_early}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(f"fbsde-is: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("fbsde-is: error: --workers must be >= 1", file=sys.stderr)
        return 1
    started = time.time()
    out = _out_dir(args)
    try:
        wrote = COMMANDS[args.command](args, out)
    except (ConfigError, ModelError) as exc:
        print(f"fbsde-is: invalid input: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL as exc:
        print(f"fbsde-is: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    if wrote:
        _metadata(out, args, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
