"""Least-squares Monte Carlo for the uncoupled FBSDE of the free energy.

Backward recursion on a simulated ensemble::

    Y_N = g(X_N),  Z_N = sigma(X_N)^T grad g(X_N)
    b_n = Y_{n+1} + dt * h(t_n, X_n, Y_{n+1}, Z)
    alpha(t_n) = argmin |A_n alpha - b_n|^2,  (A_n)_{mk} = phi_k(X_n^m)
    Y_n = A_n alpha(t_n)

with ``h(s, x, y, z) = -|z|^2 / 2 + f(x, s)``. Z is taken either from the
gradient of the fitted ansatz at step n+1 or from a second regression of
``xi_{n+1} Y_{n+1} / sqrt(dt)`` (martingale increment).

When a priori bounds on Y are known (for f = 0, Y lies between min g and
max g) the data b_n can be truncated to them. This keeps one badly
conditioned step from feeding a huge ``|Z|^2`` into every step below it.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .basis import BasisSet, CoefficientSchedule
from .model import ModelError, ProblemSpec
from .sde import TrajectoryBatch

logger = logging.getLogger(__name__)

Z_SCHEMES = ("gradient-ansatz", "martingale-increment")
STOPPING_MODES = ("freeze-all", "per-trajectory")


class LsmcError(RuntimeError):
    pass


@dataclass(frozen=True)
class Driver:
    """BSDE driver ``h(t, x (M, d), y (M,), z (M, m)) -> (M,)``."""

    evaluate: Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    name: str = "driver"

    def __call__(self, t, x, y, z):
        return self.evaluate(t, x, y, z)


def free_energy_driver(spec: ProblemSpec) -> Driver:
    """h(s, x, y, z) = -|z|^2 / 2 + f(x, s)."""
    def h(t, x, y, z):
        return -0.5 * (z * z).sum(axis=-1) + spec.running_cost(x, t)
    return Driver(h, "free-energy")


def drift_changed_driver(spec: ProblemSpec, b0) -> Driver:
    """Driver for a forward process simulated with drift ``b0`` instead of b.

    Adds ``sigma(x)^{-1} (b(x) - b0(x)) . z`` to the free-energy driver;
    requires square, invertible sigma.
    """
    if spec.dim != spec.noise_dim:
        raise ModelError("drift change needs a square diffusion matrix (d == m)")
    base = free_energy_driver(spec)

    def h(t, x, y, z):
        shift = np.asarray(spec.drift(x, t), dtype=float) - np.asarray(b0(x, t), dtype=float)
        sig = spec.sigma(x)
        if spec.dim == 1:
            s = sig[:, 0, 0]
            if (s == 0).any():
                raise ModelError("singular diffusion coefficient in drift-changed driver")
            v = shift / s[:, None]
        else:
            try:
                v = np.linalg.solve(sig, shift[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise ModelError("singular diffusion matrix in drift-changed driver") from exc
        return base(t, x, y, z) + (v * z).sum(axis=-1)

    return Driver(h, "drift-changed")


@dataclass(frozen=True)
class LsmcConfig:
    z_scheme: str = "gradient-ansatz"
    stopping_mode: str = "freeze-all"
    rank_tolerance: float = 1e-6
    ridge: float = 0.0
    drift_change: Optional[Callable] = None
    # a-priori (lower, upper) bounds on Y; regression data are truncated to them
    value_bounds: Optional[tuple] = None

    def __post_init__(self):
        if self.z_scheme not in Z_SCHEMES:
            raise ValueError(f"z_scheme must be one of {Z_SCHEMES}, got {self.z_scheme!r}")
        if self.stopping_mode not in STOPPING_MODES:
            raise ValueError(f"stopping_mode must be one of {STOPPING_MODES}, got {self.stopping_mode!r}")
        if not self.rank_tolerance > 0:
            raise ValueError("rank_tolerance must be positive")
        if not self.ridge >= 0:
            raise ValueError("ridge must be non-negative")
        if self.value_bounds is not None:
            lo, hi = self.value_bounds
            if not lo <= hi:
                raise ValueError(f"value_bounds must satisfy lower <= upper, got {self.value_bounds!r}")


@dataclass
class Diagnostics:
    """Per-step regression record for steps n = 0..N-1."""

    active: np.ndarray          # M_n
    rank: np.ndarray
    residual: np.ndarray        # |A alpha - b|
    condition: np.ndarray       # s_max / s_min
    ridge: float = 0.0
    K: int = 0

    @property
    def rank_deficient(self) -> np.ndarray:
        return self.rank < self.K

    @property
    def fitted(self) -> slice:
        # step 0 is the read-out, where A_0 has rank 1 by construction
        return slice(1, None) if self.rank.size > 1 else slice(0, None)

    @property
    def max_rank(self) -> int:
        """Largest observed rank over fitted steps; the recommended K for a rerun."""
        return int(self.rank[self.fitted].max())

    def summary(self) -> dict:
        deficient = self.rank_deficient[self.fitted]
        return {
            "K": self.K,
            "max_rank": self.max_rank,
            "min_rank": int(self.rank[self.fitted].min()),
            "rank_deficient_steps": int(deficient.sum()),
            "rank_deficient_fraction": float(deficient.mean()),
            "min_active": int(self.active.min()),
            "ridge": self.ridge,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "M_n", "rank", "residual", "condition", "rank_deficient"])
            for n in range(self.active.size):
                w.writerow([n, int(self.active[n]), int(self.rank[n]), repr(float(self.residual[n])),
                            repr(float(self.condition[n])), int(self.rank[n] < self.K)])


@dataclass
class LsmcSolution:
    coeffs: CoefficientSchedule
    y0_samples: np.ndarray
    gamma_estimate: float
    diagnostics: Diagnostics
    z_coeffs: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def standard_error(self) -> float:
        n = self.y0_samples.size
        return float(self.y0_samples.std(ddof=1) / math.sqrt(n)) if n > 1 else float("nan")


def _lstsq(A, b, rcond, ridge):
    """Min-norm least squares via SVD; returns (x, rank, singular values)."""
    if ridge > 0:
        K = A.shape[1]
        A = np.vstack([A, math.sqrt(ridge) * np.eye(K)])
        pad = np.zeros((K,) + b.shape[1:])
        b = np.concatenate([b, pad])
    x, _, rank, s = np.linalg.lstsq(A, b, rcond=rcond)
    return x, int(rank), s


def _condition(s) -> float:
    with np.errstate(over="ignore", divide="ignore"):
        return float(s[0] / s[-1]) if s[-1] > 0 else math.inf


def backward_solve(batch: TrajectoryBatch, basis: BasisSet, driver: Optional[Driver],
                   spec: ProblemSpec, config: LsmcConfig = LsmcConfig()) -> LsmcSolution:
    """Fit alpha(t_n), n = N-1..1, and read out gamma = E[Y_0].

    ``driver=None`` builds the free-energy driver, or the drift-changed one
    when ``config.drift_change`` is set.
    """
    N = batch.n_steps
    if basis.n_steps != N:
        raise ValueError(f"basis has {basis.n_steps} steps but batch has {N}")
    per_traj = config.stopping_mode == "per-trajectory"
    if per_traj and batch.frozen:
        raise ValueError("per-trajectory stopping needs an unfrozen batch")
    if driver is None:
        driver = (free_energy_driver(spec) if config.drift_change is None
                  else drift_changed_driver(spec, config.drift_change))

    ok = ~batch.failed
    if not ok.any():
        raise LsmcError("every trajectory failed during simulation")
    X = batch.states[ok]
    xi = batch.increments[ok]
    M = X.shape[0]
    m = spec.noise_dim
    K = basis.K
    dt = batch.dt
    sqdt = math.sqrt(dt)
    martingale = config.z_scheme == "martingale-increment"
    # the stopped state in per-trajectory mode, N (the frozen end) otherwise
    stop = np.where(batch.exit_step[ok] >= 0, batch.exit_step[ok], N) if per_traj else np.full(M, N)
    lo, hi = config.value_bounds if config.value_bounds is not None else (None, None)

    alphas = np.full((N + 1, K), np.nan)
    z_coeffs = np.full((N + 1, K, m), np.nan) if martingale else None
    active_n = np.zeros(N, dtype=np.int64)
    rank_n = np.zeros(N, dtype=np.int64)
    resid_n = np.zeros(N)
    cond_n = np.zeros(N)

    Y = np.full(M, np.nan)
    Z = np.zeros((M, m))
    end = stop == N
    xe = X[end, N]
    Y[end] = spec.terminal_cost(xe)
    Z[end] = np.einsum("mij,mi->mj", spec.sigma(xe), spec.terminal_gradient(xe))

    for n in range(N - 1, -1, -1):
        t = n * dt
        act = stop >= n
        starting = stop == n          # backward path initialised here
        cont = act & ~starting        # carries Y_{n+1} from the step above
        n_act = int(act.sum())
        if n_act < 1:
            raise LsmcError(
                f"no active trajectories at step {n}; use freeze-all stopping, "
                "a drift change, or truncate the horizon")
        xa = X[act, n]
        A = basis.values(n, xa)
        ca = cont[act]
        sa = starting[act]

        if martingale:
            # Z_n = E[xi_{n+1} Y_{n+1} | X_n] / sqrt(dt), fitted on continuing paths
            if ca.any():
                # E[xi c | F_n] = 0 for F_n-measurable c, so centring Y_{n+1} on its
                # own projection leaves the target unchanged but removes most noise
                Ac = A[ca]
                beta, _, _ = _lstsq(Ac, Y[cont], config.rank_tolerance, config.ridge)
                target = xi[cont, n] * (Y[cont] - Ac @ beta)[:, None] / sqdt
                zc, _, _ = _lstsq(Ac, target, config.rank_tolerance, config.ridge)
            else:
                zc = np.zeros((K, m))
            Zn = A @ zc
            Zn[sa] = 0.0
            z_coeffs[n] = zc
            z_use = Zn[ca]
        else:
            z_use = Z[cont]

        b = np.empty(n_act)
        b[ca] = Y[cont] + dt * driver(t, X[cont, n], Y[cont], z_use)
        if sa.any():
            b[sa] = spec.terminal_cost(X[starting, n])
        if lo is not None:
            np.clip(b, lo, hi, out=b)

        if n == 0:
            y0 = b.copy()
            _, rank, s = _lstsq(A, b, config.rank_tolerance, 0.0)
            active_n[0] = n_act
            rank_n[0] = rank
            resid_n[0] = float(np.linalg.norm(b - b.mean()))
            cond_n[0] = _condition(s)
            break

        alpha, rank, s = _lstsq(A, b, config.rank_tolerance, config.ridge)
        if not np.isfinite(alpha).all():
            raise LsmcError(f"non-finite regression coefficients at step {n}")
        fitted = A @ alpha
        active_n[n] = n_act
        rank_n[n] = rank
        resid_n[n] = float(np.linalg.norm(fitted - b))
        cond_n[n] = _condition(s)
        alphas[n] = alpha

        yn = fitted
        if sa.any():
            yn[sa] = b[sa]
        Y[:] = np.nan
        Y[act] = yn
        Z[:] = 0.0
        if martingale:
            Z[act] = Zn
        else:
            grad_v = (basis.gradients(n, xa) * alpha[None, :, None]).sum(axis=1)
            zn = np.einsum("mij,mi->mj", spec.sigma(xa), grad_v)
            if sa.any():
                xs = X[starting, n]
                zn[sa] = np.einsum("mij,mi->mj", spec.sigma(xs), spec.terminal_gradient(xs))
            Z[act] = zn
        if not np.isfinite(Y[act]).all():
            raise LsmcError(f"non-finite backward values at step {n}")

    diag = Diagnostics(active_n, rank_n, resid_n, cond_n, config.ridge, K)
    deficient = int(diag.rank_deficient[1:].sum())
    if deficient:
        logger.info("A_n rank-deficient on %d of %d steps (max rank %d, K=%d)",
                    deficient, N - 1, diag.max_rank, K)
    coeffs = CoefficientSchedule(alphas, 1, N - 1) if N > 1 else CoefficientSchedule(alphas, 0, -1)
    return LsmcSolution(coeffs, y0, float(y0.mean()), diag, z_coeffs)
