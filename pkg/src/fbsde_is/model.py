"""Stochastic control problem definitions.

A :class:`ProblemSpec` bundles the coefficients of a stopped diffusion

    dX_s = b(X_s, s) ds + sigma(X_s) dB_s,  X_0 = x,

together with the path functional ``W = int_0^tau f(X_s, s) ds + g(X_tau)``
evaluated up to ``tau = min(exit time of O, T)``.

All callables are vectorised over a leading batch axis: states are passed as
``(M, d)`` arrays and times as Python floats.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

DriftFn = Callable[[np.ndarray, float], np.ndarray]
DiffusionFn = Callable[[np.ndarray], np.ndarray]
RunningCostFn = Callable[[np.ndarray, float], np.ndarray]
TerminalCostFn = Callable[[np.ndarray], np.ndarray]
IndicatorFn = Callable[[np.ndarray], np.ndarray]

DEFAULT_EPSILON = 0.01


class ModelError(ValueError):
    """Raised when a problem definition is inconsistent or evaluates badly."""


@dataclass(frozen=True)
class ProblemSpec:
    """Definition of a stopped diffusion and its cost functional.

    Attributes:
        dim: state dimension d.
        noise_dim: Brownian dimension m (m <= d).
        drift: ``(x (M, d), t) -> (M, d)``.
        diffusion: ``x (M, d) -> (M, d, m)``.
        running_cost: ``(x (M, d), t) -> (M,)``.
        terminal_cost: ``x (M, d) -> (M,)``; must be finite everywhere.
        domain_indicator: ``x (M, d) -> (M,)`` bool, membership in O.
        horizon: final time T.
        terminal_cost_grad: optional analytic ``x (M, d) -> (M, d)``.
    """

    dim: int
    noise_dim: int
    drift: DriftFn
    diffusion: DiffusionFn
    running_cost: RunningCostFn
    terminal_cost: TerminalCostFn
    domain_indicator: IndicatorFn
    horizon: float
    terminal_cost_grad: Optional[TerminalCostFn] = None
    name: str = "problem"

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ModelError(f"dim must be a positive integer, got {self.dim!r}")
        if int(self.noise_dim) != self.noise_dim or not 1 <= self.noise_dim <= self.dim:
            raise ModelError(
                f"noise_dim must be an integer in [1, dim={self.dim}], got {self.noise_dim!r}")
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ModelError(f"horizon must be a positive finite time, got {self.horizon!r}")

    def sigma(self, x: np.ndarray) -> np.ndarray:
        """Diffusion matrices at a batch of states, shape-checked."""
        s = np.asarray(self.diffusion(x), dtype=float)
        expected = (x.shape[0], self.dim, self.noise_dim)
        if s.shape != expected:
            raise ModelError(f"diffusion returned shape {s.shape}, expected {expected}")
        return s

    def terminal_gradient(self, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
        """Gradient of g, analytic if available else central differences."""
        if self.terminal_cost_grad is not None:
            return np.asarray(self.terminal_cost_grad(x), dtype=float).reshape(x.shape)
        grad = np.empty_like(x, dtype=float)
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = h
            grad[:, i] = (self.terminal_cost(x + e) - self.terminal_cost(x - e)) / (2 * h)
        return grad

    def with_drift(self, drift: DriftFn, name: Optional[str] = None) -> "ProblemSpec":
        return dataclasses.replace(self, drift=drift, name=name or self.name)

    def with_horizon(self, horizon: float) -> "ProblemSpec":
        return dataclasses.replace(self, horizon=horizon)


def whole_space(x: np.ndarray) -> np.ndarray:
    """Indicator of O = R^d (no stopping)."""
    return np.ones(x.shape[0], dtype=bool)


def constant_diffusion(matrix) -> DiffusionFn:
    """Diffusion coefficient that does not depend on the state."""
    mat = np.atleast_2d(np.asarray(matrix, dtype=float))

    def diffusion(x):
        return np.broadcast_to(mat, (x.shape[0],) + mat.shape)

    return diffusion


def zero_running_cost(x, t):
    return np.zeros(x.shape[0])


# -- double-well exit problem ------------------------------------------------

def double_well_potential(x):
    """U(x) = (x^2 - 1)^2."""
    x = np.asarray(x, dtype=float)
    return (x * x - 1.0) ** 2


def double_well_drift(x, t=0.0):
    """-grad U = -4 x (x^2 - 1), for ``(M, 1)`` state batches."""
    return -4.0 * x * (x * x - 1.0)


def regularised_exit_cost(epsilon: float) -> TerminalCostFn:
    """g_eps(x) = -log(1_{x >= 0} + eps) for the left well O = {x < 0}."""
    hit = -math.log1p(epsilon)
    miss = -math.log(epsilon)

    def g(x):
        return np.where(x[:, 0] >= 0.0, hit, miss)

    return g


def exit_value_bounds(epsilon: float) -> tuple:
    """Range of g_eps, hence of the value function when f = 0."""
    return (-math.log1p(epsilon), -math.log(epsilon))


def make_double_well(sigma: float, epsilon: float = DEFAULT_EPSILON,
                     horizon: float = 1.0, tilt: float = 0.0) -> ProblemSpec:
    """Exit from the left well of U(x) = (x^2 - 1)^2 before the horizon.

    ``tilt`` adds a constant push ``+tilt`` to the drift, which is the
    alternate forward drift used with the drift-changed driver.
    """
    if not (math.isfinite(sigma) and sigma > 0):
        raise ModelError(f"sigma must be positive, got {sigma!r}")
    if not 0.0 < epsilon < 1.0:
        raise ModelError(f"epsilon must lie in (0, 1), got {epsilon!r}")
    if not math.isfinite(tilt):
        raise ModelError(f"tilt must be finite, got {tilt!r}")

    if tilt == 0.0:
        drift = double_well_drift
    else:
        def drift(x, t=0.0):
            return double_well_drift(x, t) + tilt

    return ProblemSpec(
        dim=1,
        noise_dim=1,
        drift=drift,
        diffusion=constant_diffusion([[sigma]]),
        running_cost=zero_running_cost,
        terminal_cost=regularised_exit_cost(epsilon),
        domain_indicator=lambda x: x[:, 0] < 0.0,
        horizon=horizon,
        # g_eps is piecewise constant: its gradient vanishes almost everywhere
        terminal_cost_grad=lambda x: np.zeros_like(x, dtype=float),
        name=f"double-well(sigma={sigma}, eps={epsilon}, tilt={tilt})",
    )


class ExitProbability(NamedTuple):
    probability: float
    clamped: bool


class NegativeProbabilityWarning(UserWarning):
    pass


def exit_probability_from_value(gamma_eps: float, epsilon: float = DEFAULT_EPSILON) -> ExitProbability:
    """Invert the regularised duality: P(tau_O < T) = exp(-gamma_eps) - eps.

    A negative result means gamma_eps was overestimated past the
    regularisation floor; it is reported as zero with ``clamped=True``.
    """
    p = math.exp(-gamma_eps) - epsilon
    if p >= 0.0:
        return ExitProbability(p, False)
    if p > -1e-12 * epsilon:
        # round-off at the floor itself
        return ExitProbability(0.0, False)
    warnings.warn(
        f"exp(-gamma)={math.exp(-gamma_eps):.6g} lies below epsilon={epsilon}; "
        "reporting zero exit probability", NegativeProbabilityWarning, stacklevel=2)
    return ExitProbability(0.0, True)
