import csv
import json
import logging
from pathlib import Path

import numpy as np
import pytest

from fbsde_is.config import load_config, parse_config, with_overrides
from fbsde_is.harness import (EarlyHorizonError, ExperimentError, compute_reference, effective_horizon,
                              fit, run_early_horizon, run_experiment, write_estimates_csv,
                              write_table_csv)
from fbsde_is.model import make_double_well
from fbsde_is.sde import TimeGrid, simulate_forward

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMALL = {"id": "small", "K": 4, "M": 120, "T": 0.5, "dt": 1e-2, "repetitions": 3,
         "is_paths": 200, "pde": {"n_x": 141, "dt": 1e-2}}


@pytest.fixture
def small():
    return parse_config(SMALL)


def test_experiment_aggregates_repetitions(small):
    res = run_experiment(small)
    assert res.n_success == 3 and not res.failures
    est = np.array(res.estimates)
    assert res.mean == pytest.approx(est.mean())
    assert res.variance == pytest.approx(est.var(ddof=1))
    assert res.reference == pytest.approx(compute_reference(small))
    assert len(res.importance_sampling["variance_reduction_factor"]) == 3
    assert res.diagnostics["K"] == 5   # four bumps plus the constant


def test_repetition_r_uses_seed_plus_r(small):
    res = run_experiment(with_overrides(small, importance_sampling=False))
    one = with_overrides(small, seed=2, repetitions=1, importance_sampling=False)
    sol, _, _ = fit(one, one.seed)
    assert res.estimates[2] == sol.gamma_estimate


def test_json_is_reproducible_across_workers(small):
    a = run_experiment(small).to_json()
    b = run_experiment(small, workers=2).to_json()
    assert a == b
    assert json.loads(a)["config"]["seed"] == 0


def test_rank_warning_logged(small, caplog):
    cfg = with_overrides(small, K=20, importance_sampling=False, reference=False)
    with caplog.at_level(logging.WARNING, logger="fbsde_is.harness"):
        res = run_experiment(cfg)
    assert res.diagnostics["max_rank"] < 21
    assert any("design matrix rank < K=21" in r.message and "consider K=" in r.message
               for r in caplog.records)


def test_too_many_failures(small, monkeypatch):
    import fbsde_is.harness as h

    def boom(config, seed):
        raise h.LsmcError("synthetic")
    monkeypatch.setattr(h, "fit", boom)
    with pytest.raises(ExperimentError, match="3 of 3"):
        run_experiment(small)


def test_isolated_failure_is_recorded(small, monkeypatch):
    import fbsde_is.harness as h
    real = h.fit

    def flaky(config, seed):
        if seed == 1:
            raise h.LsmcError("synthetic")
        return real(config, seed)
    monkeypatch.setattr(h, "fit", flaky)
    res = run_experiment(with_overrides(small, importance_sampling=False))
    assert res.estimates[1] is None and res.failures[0]["seed"] == 1
    assert res.mean == pytest.approx(np.mean([res.estimates[0], res.estimates[2]]))


def test_effective_horizon():
    spec = make_double_well(1.0, tilt=5.0)
    grid = TimeGrid(1e-2, 300)
    batch = simulate_forward(spec, grid, [-1.0], 30, 0, freeze=False)
    assert batch.exited.all()
    assert effective_horizon(batch) == pytest.approx(batch.exit_step.max() * 1e-2)
    calm = simulate_forward(make_double_well(0.3), TimeGrid(1e-2, 10), [-1.0], 5, 0, freeze=False)
    with pytest.raises(EarlyHorizonError):
        effective_horizon(calm)


def test_early_horizon_needs_tilt(small):
    with pytest.raises(ValueError, match="drift_tilt"):
        run_early_horizon(small)


def test_early_horizon_without_exits_is_fatal():
    cfg = parse_config({**SMALL, "sigma": 0.2, "T": 0.1, "drift_tilt": 0.01, "reference": False})
    with pytest.raises(EarlyHorizonError):
        run_early_horizon(cfg)


def test_early_horizon_mild_tilt_keeps_full_horizon():
    cfg = parse_config({**SMALL, "drift_tilt": 0.5, "importance_sampling": False})
    res = run_early_horizon(cfg)
    assert res.mode == "early-horizon" and res.effective_horizons == [0.5, 0.5, 0.5]
    assert abs(res.mean - res.reference) < 0.3


@pytest.mark.xfail(strict=True, reason="when every tilted path exits, the regression only sees "
                                       "exit costs and the estimate collapses to min g")
def test_early_horizon_strong_tilt_recovers_untilted_value():
    cfg = with_overrides(load_config(CONFIGS / "early_horizon.json"), repetitions=2, reference=True)
    res = run_early_horizon(cfg)
    assert all(h < cfg.T for h in res.effective_horizons)
    assert abs(res.mean - res.reference) < 0.1


def test_table_and_estimate_csv(small, tmp_path):
    res = run_experiment(with_overrides(small, importance_sampling=False, repetitions=2))
    write_table_csv([res], tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["config_id", "V_ref", "V_bar", "S2"]
    assert rows[1][0] == "small" and float(rows[1][2]) == res.mean
    write_estimates_csv(res, tmp_path / "e.csv")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[1:] == [["0", "0", repr(res.estimates[0])], ["1", "1", repr(res.estimates[1])]]


def test_stopping_modes_agree_on_row2():
    cfg = with_overrides(load_config(CONFIGS / "row2.json"), repetitions=10,
                         importance_sampling=False, reference=False)
    frozen = run_experiment(cfg)
    per_traj = run_experiment(with_overrides(cfg, stopping_mode="per-trajectory"))
    identity = run_early_horizon(with_overrides(cfg, drift_tilt=0.0))
    se = np.sqrt(frozen.variance / 10 + per_traj.variance / 10)
    assert abs(frozen.mean - per_traj.mean) <= 3 * se
    # no tilt and some paths surviving: early-horizon is per-trajectory on [0, T]
    assert identity.estimates == per_traj.estimates


def test_row2_relative_error_within_ten_percent():
    res = run_experiment(with_overrides(load_config(CONFIGS / "row2.json"), importance_sampling=False))
    assert abs(res.mean - res.reference) / res.reference <= 0.10


@pytest.mark.xfail(strict=True, reason="the gradient-ansatz fit at M = 300 over 5000 steps is biased "
                                       "low by about 0.06 (V_bar 0.331 vs V_ref 0.395, 16%)")
def test_row1_relative_error_within_ten_percent():
    res = run_experiment(with_overrides(load_config(CONFIGS / "row1.json"), importance_sampling=False))
    assert abs(res.mean - res.reference) / res.reference <= 0.10
