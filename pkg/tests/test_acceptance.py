"""End-to-end acceptance checks.

Each test prints exactly one ``PASS``/``FAIL`` line naming the criterion and
the measured numbers, then asserts. Run with ``pytest tests/test_acceptance.py -v``;
the slow rows (sigma = 0.6, 0.5 at dt = 1e-4) take a few minutes.
"""

import dataclasses
import logging
import math
from pathlib import Path

import numpy as np
import pytest

from fbsde_is.basis import BasisSet, adaptive_centres
from fbsde_is.config import load_config, with_overrides
from fbsde_is.control import importance_sample, zero_policy
from fbsde_is.harness import run_experiment
from fbsde_is.lsmc import LsmcConfig, backward_solve, drift_changed_driver
from fbsde_is.model import make_double_well
from fbsde_is.pde import PdeGrid, solve_exit_probability
from fbsde_is.sde import TimeGrid, simulate_forward

from conftest import OU_GAMMA, OU_MEAN, OU_VAR, ou_problem

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} [{criterion}] {detail}")
        assert ok, detail
    return emit


def _row(name, **kw):
    return with_overrides(load_config(CONFIGS / f"{name}.json"), **kw)


@pytest.fixture(scope="module")
def row2():
    # importance sampling on, so criteria 2 and 6 share the run
    return run_experiment(_row("row2"))


def _ou_runs(shift, R=10, K=10, M=1000, dt=1e-2):
    spec = ou_problem()
    forward = ou_problem(drift_shift=shift)
    grid = TimeGrid.from_horizon(1.0, dt)
    driver = drift_changed_driver(spec, forward.drift) if shift else None
    out = []
    for s in range(R):
        batch = simulate_forward(forward, grid, [1.0], M, s)
        basis = BasisSet(adaptive_centres(forward, grid, [1.0], K, s), constant=True)
        out.append(backward_solve(batch, basis, driver, spec, LsmcConfig()).gamma_estimate)
    return np.array(out)


def _within_3se(a, b):
    se = math.sqrt(np.var(a, ddof=1) / len(a) + np.var(b, ddof=1) / len(b))
    return abs(np.mean(a) - np.mean(b)), se


def test_c1_table_row1(report):
    res = run_experiment(_row("row1", importance_sampling=False))
    ok = (0.33 <= res.mean <= 0.42 and res.variance <= 5e-3
          and abs(res.reference - 0.3949) <= 0.01)
    report("1 row 1", ok, f"V_bar={res.mean:.4f} in [0.33, 0.42], S2={res.variance:.2e} <= 5e-3, "
                          f"V_ref={res.reference:.4f} vs 0.3949 +- 0.01")


def test_c2_table_row2(report, row2):
    ok = (1.55 <= row2.mean <= 1.80 and row2.variance <= 0.06
          and abs(row2.reference - 1.7450) <= 0.01)
    report("2 row 2", ok, f"V_bar={row2.mean:.4f} in [1.55, 1.80], S2={row2.variance:.2e} <= 0.06, "
                          f"V_ref={row2.reference:.4f} vs 1.7450 +- 0.01")


@pytest.mark.slow
@pytest.mark.parametrize("name,v_ref,v_target", [("row3", 4.3030, 4.5779), ("row4", 4.5793, 4.6044)])
def test_c3_table_small_sigma(report, row2, caplog, name, v_ref, v_target):
    with caplog.at_level(logging.WARNING, logger="fbsde_is.harness"):
        res = run_experiment(_row(name, importance_sampling=False))
    warned = any("design matrix rank" in r.message for r in caplog.records)
    frac = res.diagnostics["rank_deficient_fraction"]
    base = row2.diagnostics["rank_deficient_fraction"]
    ok = (abs(res.reference - v_ref) <= 0.02 and abs(res.mean - v_target) <= 0.35
          and warned and frac > base)
    report(f"3 {name}", ok, f"V_ref={res.reference:.4f} vs {v_ref} +- 0.02, V_bar={res.mean:.4f} vs "
                            f"{v_target} +- 0.35, rank warning={warned}, rank-deficient steps "
                            f"{frac:.1%} (sigma=1 row: {base:.1%})")


def test_c4_ou_oracle(report):
    # brute-force check of the closed form first
    rng = np.random.default_rng(2024)
    x1 = OU_MEAN + math.sqrt(OU_VAR) * rng.standard_normal(1_000_000)
    w = np.exp(-x1 ** 2)
    mc = -math.log(w.mean())
    mc_se = w.std() / w.mean() / 1000.0
    runs = _ou_runs(0.0)
    worst = np.abs(runs - OU_GAMMA).max()
    ok = abs(mc - OU_GAMMA) < 4 * mc_se and worst < 5e-2
    report("4 OU oracle", ok, f"closed form {OU_GAMMA:.5f}, MC(1e6) {mc:.5f}; gamma over 10 seeds "
                              f"{runs.mean():.4f}, worst |error| {worst:.4f} < 5e-2")


def test_c5_unbiased_reweighting(report):
    rng = np.random.default_rng(5)
    lines, ok = [], True
    problems = [("OU", ou_problem(), [1.0], TimeGrid(1e-2, 100)),
                ("double-well", make_double_well(1.0), [-1.0], TimeGrid(1e-2, 100))]
    for i in range(6):
        name, spec, x0, grid = problems[i % 2]
        a, b, c = rng.uniform(-1.5, 1.5), rng.uniform(-2, 2), rng.uniform(-1, 1)

        def policy(x, n, a=a, b=b, c=c):
            # bounded by |a|
            return a * np.tanh(b * x + c + 0.01 * n)
        rep = importance_sample(spec, grid, x0, 10_000, 100 + i, policy)
        z = abs(rep.estimate - rep.vanilla_estimate) / math.hypot(rep.standard_error, rep.vanilla_standard_error)
        ok &= z < 3
        lines.append(f"{name}:{z:.2f}")
    report("5 unbiased reweighting", ok, "|IS - vanilla| / combined SE for 6 policies: " + ", ".join(lines))


def test_c6_variance_reduction(report, row2):
    vrf = np.array(row2.importance_sampling["variance_reduction_factor"])
    med = float(np.median(vrf))
    report("6 variance reduction", med >= 5,
           f"row 2 median variance_reduction_factor {med:.2f} >= 5 (min {vrf.min():.2f}, max {vrf.max():.2f})")


def test_c7_trivial_exactness(report):
    # constant terminal cost: Y == g exactly
    const = dataclasses.replace(ou_problem(), terminal_cost=lambda x: np.full(x.shape[0], 1.25),
                                terminal_cost_grad=lambda x: np.zeros_like(x))
    grid = TimeGrid(1e-2, 100)
    batch = simulate_forward(const, grid, [0.5], 200, 0)
    basis = BasisSet(adaptive_centres(const, grid, [0.5], 6, 0), constant=True)
    err_const = abs(backward_solve(batch, basis, None, const).gamma_estimate - 1.25)

    # zero policy == vanilla, path for path
    dw = make_double_well(1.0)
    rep = importance_sample(dw, TimeGrid(1e-3, 1000), [-1.0], 500, 1, zero_policy(1), shared_noise=True)
    identity = rep.estimate == rep.vanilla_estimate and rep.ess == pytest.approx(500)

    # basis gradient vs central differences
    x = np.linspace(-2, 0.5, 11)[:, None]
    h = 1e-6
    fd = (basis.values(40, x + h) - basis.values(40, x - h)) / (2 * h)
    an = basis.gradients(40, x)[:, :, 0]
    rel = float(np.abs(fd - an).max() / np.abs(an).max())

    # PDE: 0 <= psi <= 1 and psi non-decreasing in t
    sol = solve_exit_probability(make_double_well(0.6), PdeGrid.for_horizon(1.0, 1e-3, n_x=351),
                                 keep_history=True)
    hist = sol.history
    pde_ok = hist.min() >= 0 and hist.max() <= 1 and (np.diff(hist, axis=0) >= -1e-10).all()

    ok = err_const < 1e-10 and identity and rel < 1e-6 and pde_ok
    report("7 trivial exactness", ok, f"constant-g error {err_const:.1e}, zero-policy identity {identity}, "
                                      f"gradient rel. error {rel:.1e}, PDE max principle/monotone {pde_ok}")


def test_c8_drift_change_invariance(report, row2):
    plain, shifted = _ou_runs(0.0), _ou_runs(-0.5)
    d_ou, se_ou = _within_3se(plain, shifted)
    tilted = run_experiment(_row("row2", drift_tilt=1.0, importance_sampling=False, reference=False))
    base = [e for e in row2.estimates if e is not None]
    tilt = [e for e in tilted.estimates if e is not None]
    d_dw, se_dw = _within_3se(base, tilt)
    ok = d_ou <= 3 * se_ou and d_dw <= 3 * se_dw
    report("8 drift-change invariance", ok,
           f"OU: {plain.mean():.4f} vs {shifted.mean():.4f} (|diff| {d_ou:.4f} <= 3 SE {3 * se_ou:.4f}); "
           f"double well: {np.mean(base):.4f} vs tilted {np.mean(tilt):.4f} "
           f"(|diff| {d_dw:.4f} <= 3 SE {3 * se_dw:.4f})")


def test_c9_determinism(report):
    cfg = _row("row2", repetitions=4)
    first = run_experiment(cfg).to_json()
    again = run_experiment(cfg).to_json()
    parallel = run_experiment(cfg, workers=2).to_json()
    ok = first == again == parallel
    report("9 determinism", ok, f"row-2 JSON ({len(first)} bytes) identical across reruns and "
                                f"1 vs 2 workers: {ok}")
