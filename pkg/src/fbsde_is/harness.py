"""Repeated end-to-end runs: simulate, fit, importance-sample, compare.

Repetition r of an experiment uses seed ``config.seed + r`` for every
ensemble it draws. Repetitions are independent, so they can be farmed out
to worker processes. Aggregation always runs in repetition order.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .basis import BasisSet, adaptive_centres
from .config import ExperimentConfig
from .control import importance_sample, make_policy
from .lsmc import LsmcConfig, LsmcError, backward_solve, drift_changed_driver
from .model import ModelError, exit_value_bounds, make_double_well
from .pde import PdeGrid, reference_value
from .sde import SimulationError, TimeGrid, TrajectoryBatch, simulate_forward

logger = logging.getLogger(__name__)


class ExperimentError(RuntimeError):
    pass


class EarlyHorizonError(ValueError):
    """No trajectory exits, so there is no early horizon to stop at."""


@dataclass
class ExperimentResult:
    id: str
    mode: str
    estimates: List[Optional[float]]
    mean: float
    variance: float
    reference: Optional[float]
    failures: List[dict] = field(default_factory=list)
    importance_sampling: Optional[dict] = None
    diagnostics: dict = field(default_factory=dict)
    effective_horizons: Optional[List[Optional[float]]] = None
    config: dict = field(default_factory=dict)

    @property
    def n_success(self) -> int:
        return sum(e is not None for e in self.estimates)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def build_problem(config: ExperimentConfig):
    spec = make_double_well(config.sigma, config.epsilon, config.T)
    grid = TimeGrid.from_horizon(config.T, config.dt)
    return spec, grid


def lsmc_config(config: ExperimentConfig, **kw) -> LsmcConfig:
    opts = dict(z_scheme=config.z_scheme, stopping_mode=config.stopping_mode,
                rank_tolerance=config.rank_tolerance, ridge=config.ridge,
                value_bounds=exit_value_bounds(config.epsilon) if config.truncate else None)
    opts.update(kw)
    return LsmcConfig(**opts)


def make_basis(spec, grid, config: ExperimentConfig, seed: int) -> BasisSet:
    centres = adaptive_centres(spec, grid, [config.x0], config.K, seed,
                               freeze=config.freeze_centres)
    return BasisSet(centres, config.delta, constant=config.constant_basis)


def fit(config: ExperimentConfig, seed: int):
    """One regression ensemble and backward solve; returns (solution, basis, batch).

    With ``drift_tilt`` set, the forward paths and centres follow b + c and
    the drift-changed driver compensates.
    """
    spec, grid = build_problem(config)
    forward, driver = spec, None
    if config.drift_tilt is not None:
        forward = make_double_well(config.sigma, config.epsilon, config.T, tilt=config.drift_tilt)
        driver = drift_changed_driver(spec, forward.drift)
    freeze = config.stopping_mode == "freeze-all"
    batch = simulate_forward(forward, grid, [config.x0], config.M, seed, freeze=freeze)
    basis = make_basis(forward, grid, config, seed)
    sol = backward_solve(batch, basis, driver, spec, lsmc_config(config))
    return sol, basis, batch


def _repetition(config: ExperimentConfig, r: int) -> dict:
    seed = config.seed + r
    try:
        sol, basis, _ = fit(config, seed)
        out = {"gamma": sol.gamma_estimate, "standard_error": sol.standard_error,
               "diagnostics": sol.diagnostics.summary()}
        if config.importance_sampling:
            spec, grid = build_problem(config)
            policy = make_policy(basis, sol.coeffs, spec, config.clip)
            report = importance_sample(spec, grid, [config.x0], config.is_paths or config.M,
                                       seed, policy)
            out["is"] = report.to_dict()
        return out
    except (LsmcError, SimulationError, ModelError, RuntimeError, FloatingPointError) as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}


def _early_repetition(config: ExperimentConfig, r: int) -> dict:
    seed = config.seed + r
    try:
        spec, grid = build_problem(config)
        tilted = make_double_well(config.sigma, config.epsilon, config.T, tilt=config.drift_tilt)
        batch = simulate_forward(tilted, grid, [config.x0], config.M, seed, freeze=False)
        t_eff = effective_horizon(batch)
        n_eff = max(1, int(batch.stop_step().max()))
        batch = batch.truncate(n_eff)
        short = grid.truncate(n_eff)
        basis = make_basis(tilted, short, config, seed)
        driver = drift_changed_driver(spec, tilted.drift)
        sol = backward_solve(batch, basis, driver, spec,
                             lsmc_config(config, stopping_mode="per-trajectory"))
        return {"gamma": sol.gamma_estimate, "standard_error": sol.standard_error,
                "diagnostics": sol.diagnostics.summary(), "effective_horizon": t_eff}
    except EarlyHorizonError as exc:
        return {"error": f"EarlyHorizonError: {exc}", "fatal": True}
    except (LsmcError, SimulationError, ModelError, RuntimeError, FloatingPointError) as exc:
        return {"error": f"{type(exc).__name__}: {exc}"}


def effective_horizon(batch: TrajectoryBatch) -> float:
    """T~ = max exit time over the batch; the horizon if some path never exits."""
    if not batch.exited.any():
        raise EarlyHorizonError("no trajectory exits before the horizon; early-horizon mode is inapplicable")
    if not batch.exited.all():
        return batch.n_steps * batch.dt
    return float(batch.exit_step.max() * batch.dt)


def _map(fn, config, workers):
    reps = range(config.repetitions)
    if workers <= 1 or config.repetitions == 1:
        return [fn(config, r) for r in reps]
    with ProcessPoolExecutor(max_workers=min(workers, config.repetitions)) as pool:
        return list(pool.map(fn, [config] * config.repetitions, reps))


def compute_reference(config: ExperimentConfig) -> float:
    spec = make_double_well(config.sigma, config.epsilon, config.T)
    p = config.pde
    grid = PdeGrid.for_horizon(config.T, p.dt, n_x=p.n_x, x_min=p.x_min)
    return reference_value(spec, grid, config.x0, config.epsilon)


def _aggregate(config, outs, mode) -> ExperimentResult:
    estimates, failures = [], []
    for r, o in enumerate(outs):
        if "error" in o:
            estimates.append(None)
            failures.append({"repetition": r, "seed": config.seed + r, "error": o["error"]})
            logger.warning("repetition %d failed: %s", r, o["error"])
        else:
            estimates.append(o["gamma"])
    if any(o.get("fatal") for o in outs):
        raise EarlyHorizonError(failures[0]["error"])
    if 2 * len(failures) > config.repetitions:
        raise ExperimentError(f"{len(failures)} of {config.repetitions} repetitions failed; "
                              f"first: {failures[0]['error']}")
    ok = np.array([e for e in estimates if e is not None])
    mean = float(ok.mean())
    variance = float(ok.var(ddof=1)) if ok.size > 1 else float("nan")

    good = [o for o in outs if "error" not in o]
    diags = [o["diagnostics"] for o in good]
    K = diags[0]["K"]
    diagnostics = {
        "K": K,
        "max_rank": max(d["max_rank"] for d in diags),
        "min_rank": min(d["min_rank"] for d in diags),
        "rank_deficient_fraction": float(np.mean([d["rank_deficient_fraction"] for d in diags])),
        "rank_deficient_repetitions": sum(d["rank_deficient_steps"] > 0 for d in diags),
        "min_active": min(d["min_active"] for d in diags),
    }
    if diagnostics["rank_deficient_repetitions"]:
        hint = (f"; consider K={diagnostics['max_rank']}" if diagnostics["max_rank"] < K else "")
        logger.warning("design matrix rank < K=%d on %.1f%% of steps in %d of %d repetitions "
                       "(max observed rank %d)%s", K, 100 * diagnostics["rank_deficient_fraction"],
                       diagnostics["rank_deficient_repetitions"], len(good), diagnostics["max_rank"], hint)

    is_summary = None
    if good and "is" in good[0]:
        reports = [o["is"] for o in good]
        vrf = [r["variance_reduction_factor"] for r in reports]
        fe = [r["free_energy"] for r in reports]
        is_summary = {
            "free_energy": fe,
            "mean_free_energy": float(np.mean(fe)),
            "variance_reduction_factor": vrf,
            "median_variance_reduction_factor": float(np.median(vrf)),
            "ess": [r["ess"] for r in reports],
            "clipped_fraction": float(np.mean([r["clipped_fraction"] for r in reports])),
        }
    horizons = None
    if mode == "early-horizon":
        horizons = [o.get("effective_horizon") for o in outs]
    reference = compute_reference(config) if config.reference else None
    return ExperimentResult(
        id=config.id, mode=mode, estimates=estimates, mean=mean, variance=variance,
        reference=reference, failures=failures, importance_sampling=is_summary,
        diagnostics=diagnostics, effective_horizons=horizons, config=config.model_dump())


def run_experiment(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """R repetitions of fit (+ importance sampling) with V-bar, S^2 and V_ref."""
    return _aggregate(config, _map(_repetition, config, workers), "standard")


def run_early_horizon(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """Fit under the tilted drift b + c up to the last exit time T~.

    The backward pass runs per trajectory with the drift-changed driver, so
    the estimate targets the untilted free energy.
    """
    if config.drift_tilt is None:
        raise ValueError("early-horizon mode needs drift_tilt in the config")
    return _aggregate(config, _map(_early_repetition, config, workers), "early-horizon")


def write_table_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_id", "V_ref", "V_bar", "S2"])
        for res in results:
            w.writerow([res.id, "" if res.reference is None else repr(res.reference),
                        repr(res.mean), repr(res.variance)])


def write_estimates_csv(result: ExperimentResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["repetition", "seed", "gamma"])
        for r, g in enumerate(result.estimates):
            w.writerow([r, result.config.get("seed", 0) + r, "" if g is None else repr(g)])
