"""Finite-difference reference for the 1D exit probability.

Solves ``psi_t = 1/2 sigma^2 psi_xx + b(x) psi_x`` on ``(x_min, 0)`` with
``psi(0, t) = 1``, ``psi(x, 0) = 0`` and a reflecting (zero-flux) wall at
``x_min``. Then ``psi(x, T) = P(tau < T | X_0 = x)`` and the regularised
value is ``-log(psi + eps)``.

Time stepping is Crank-Nicolson. A few implicit Euler steps at the start
damp the jump between the initial data and the boundary value.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .model import DEFAULT_EPSILON, ProblemSpec

DEFAULT_X_MIN = -3.5
DEFAULT_NX = 701      # dx = 0.005, so x = -1 is a node
DEFAULT_DT = 1e-3
RANNACHER_STEPS = 4


class PdeError(RuntimeError):
    pass


@dataclass(frozen=True)
class PdeGrid:
    n_t: int
    dt: float = DEFAULT_DT
    n_x: int = DEFAULT_NX
    x_min: float = DEFAULT_X_MIN
    x_max: float = 0.0

    def __post_init__(self):
        if int(self.n_x) != self.n_x or self.n_x < 3:
            raise ValueError(f"n_x must be an integer >= 3, got {self.n_x!r}")
        if int(self.n_t) != self.n_t or self.n_t < 1:
            raise ValueError(f"n_t must be a positive integer, got {self.n_t!r}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt!r}")
        if not self.x_min < self.x_max:
            raise ValueError("x_min must lie below x_max")

    @classmethod
    def for_horizon(cls, horizon: float, dt: float = DEFAULT_DT, **kw) -> "PdeGrid":
        n_t = max(1, int(round(horizon / dt)))
        return cls(n_t=n_t, dt=horizon / n_t, **kw)

    @property
    def horizon(self) -> float:
        return self.n_t * self.dt

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)


@dataclass
class PdeSolution:
    nodes: np.ndarray
    psi: np.ndarray                      # psi(., T)
    history: Optional[np.ndarray] = None  # (n_t + 1, n_x) when requested

    def __call__(self, x):
        """Linear interpolation of psi(., T)."""
        x = np.asarray(x, dtype=float)
        if ((x < self.nodes[0]) | (x > self.nodes[-1])).any():
            raise ValueError(f"query point outside [{self.nodes[0]}, {self.nodes[-1]}]")
        out = np.interp(x, self.nodes, self.psi)
        return float(out) if out.ndim == 0 else out


def _constant_sigma(spec: ProblemSpec, nodes: np.ndarray) -> float:
    sig = spec.sigma(nodes[:, None])[:, 0, 0]
    if not np.allclose(sig, sig[0], rtol=0, atol=0):
        raise ValueError("the PDE reference needs a constant diffusion coefficient")
    return float(sig[0])


def _operator(spec: ProblemSpec, grid: PdeGrid):
    """Tridiagonal generator L on the interior and wall nodes (all but x_max)."""
    x = grid.nodes
    dx = grid.dx
    sigma = _constant_sigma(spec, x)
    b = np.asarray(spec.drift(x[:, None], 0.0), dtype=float)[:, 0]
    diff = 0.5 * sigma * sigma / (dx * dx)
    adv = b / (2.0 * dx)
    lower = diff - adv        # coefficient of psi_{i-1}
    main = np.full(x.size, -2.0 * diff)
    upper = diff + adv        # coefficient of psi_{i+1}
    return lower, main, upper


def _banded(lower, main, upper, theta_dt, n):
    """Banded (1, 2) matrix of I - theta dt L for unknowns 0..n-1.

    Row 0 is the one-sided second-order zero-flux condition
    -3 psi_0 + 4 psi_1 - psi_2 = 0.
    """
    ab = np.zeros((4, n))
    # ab[2 + i - j, j] holds entry (i, j)
    ab[2, :] = 1.0 - theta_dt * main[:n]
    ab[1, 1:] = -theta_dt * upper[:n - 1]
    ab[3, :-1] = -theta_dt * lower[1:n]
    ab[2, 0] = -3.0
    ab[1, 1] = 4.0
    ab[0, 2] = -1.0
    return ab


def solve_exit_probability(spec: ProblemSpec, grid: PdeGrid, keep_history: bool = False,
                           rannacher_steps: int = RANNACHER_STEPS) -> PdeSolution:
    if spec.dim != 1:
        raise ValueError("the PDE reference is one-dimensional")
    if grid.n_x < 4:
        raise ValueError("the reflecting stencil needs n_x >= 4")
    lower, main, upper = _operator(spec, grid)
    n = grid.n_x - 1          # unknowns; the last node carries psi = 1
    dt = grid.dt
    psi = np.zeros(grid.n_x)
    psi[-1] = 1.0
    history = np.empty((grid.n_t + 1, grid.n_x)) if keep_history else None
    if keep_history:
        history[0] = 0.0      # initial data; the boundary value applies from t > 0

    mats = {}
    for k in range(grid.n_t):
        theta = 1.0 if k < rannacher_steps else 0.5
        if theta not in mats:
            mats[theta] = _banded(lower, main, upper, theta * dt, n)
        ab = mats[theta]
        # explicit part (I + (1 - theta) dt L) psi on interior nodes
        rhs = psi[:n].copy()
        w = (1.0 - theta) * dt
        if w:
            rhs[1:] += w * (lower[1:n] * psi[:n - 1] + main[1:n] * psi[1:n] + upper[1:n] * psi[2:n + 1])
        # implicit share of the Dirichlet value psi(0) = 1
        rhs[n - 1] += theta * dt * upper[n - 1]
        rhs[0] = 0.0
        psi[:n] = solve_banded((1, 2), ab, rhs)
        lo, hi = psi.min(), psi.max()
        if not (np.isfinite(lo) and lo >= -1e-6 and hi <= 1 + 1e-6):
            raise PdeError(f"unstable solution at step {k + 1} (range [{lo:.3g}, {hi:.3g}]); "
                           "refine the grid (larger n_x or smaller dt)")
        if keep_history:
            history[k + 1] = psi
    np.clip(psi, 0.0, 1.0, out=psi)
    return PdeSolution(grid.nodes, psi.copy(), history)


def value_from_probability(psi: float, epsilon: float = DEFAULT_EPSILON) -> float:
    return -math.log(psi + epsilon)


def reference_value(spec: ProblemSpec, grid: PdeGrid, x: float,
                    epsilon: float = DEFAULT_EPSILON) -> float:
    """V_ref = -log(psi(x, T) + eps)."""
    return value_from_probability(solve_exit_probability(spec, grid)(x), epsilon)


def write_solution_csv(solution: PdeSolution, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "psi"])
        for x, p in zip(solution.nodes, solution.psi):
            w.writerow([repr(float(x)), repr(float(p))])
