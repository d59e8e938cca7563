"""Gaussian radial basis with time-dependent centres and the value ansatz.

The value function is represented as ``V_K(x, t_n) = sum_k alpha_k(t_n) phi_k(x)``
with ``phi_k(x) = exp(-|mu_k(n) - x|^2 / (2 delta))``. Centres are indexed by
time step so that bases built from other constructions (e.g. martingale
bases) can be substituted without changing callers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import ProblemSpec
from .sde import CENTRE_STREAM, TimeGrid, simulate_forward

DEFAULT_DELTA = 0.1


class StaleCoefficientsError(LookupError):
    """Raised when a coefficient schedule is queried at an unfitted step."""


@dataclass(frozen=True)
class BasisSet:
    """K Gaussian bumps per time step, optionally plus the constant function.

    Attributes:
        centres: ``(N+1, K_rbf, d)`` array of centres mu_k(n).
        delta: width parameter of the Gaussians.
        constant: append phi == 1 as an extra (last) basis function.
        kind: tag of the basis family.
    """

    centres: np.ndarray
    delta: float = DEFAULT_DELTA
    constant: bool = False
    kind: str = "gaussian-rbf"

    def __post_init__(self):
        if self.centres.ndim != 3:
            raise ValueError("centres must have shape (N+1, K, d)")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta!r}")
        if not np.isfinite(self.centres).all():
            raise ValueError("basis centres must be finite")

    @property
    def K(self) -> int:
        return self.centres.shape[1] + int(self.constant)

    @property
    def n_steps(self) -> int:
        return self.centres.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.centres.shape[2]

    def values(self, n: int, x: np.ndarray) -> np.ndarray:
        """Design matrix rows phi_k(x_m) for states ``(M, d)``; shape ``(M, K)``."""
        diff = self.centres[n][None, :, :] - x[:, None, :]
        phi = np.exp(-(diff * diff).sum(axis=-1) / (2.0 * self.delta))
        if self.constant:
            phi = np.concatenate([phi, np.ones((x.shape[0], 1))], axis=1)
        return phi

    def gradients(self, n: int, x: np.ndarray) -> np.ndarray:
        """grad phi_k(x_m) = phi_k (mu_k - x) / delta; shape ``(M, K, d)``."""
        diff = self.centres[n][None, :, :] - x[:, None, :]
        phi = np.exp(-(diff * diff).sum(axis=-1) / (2.0 * self.delta))
        grad = phi[:, :, None] * diff / self.delta
        if self.constant:
            grad = np.concatenate([grad, np.zeros((x.shape[0], 1, x.shape[1]))], axis=1)
        return grad


@dataclass(frozen=True)
class CoefficientSchedule:
    """Fitted coefficients alpha(t_n) for steps ``valid_from..valid_to``."""

    alphas: np.ndarray   # (N+1, K); rows outside the fitted range are NaN
    valid_from: int
    valid_to: int

    def at(self, n: int) -> np.ndarray:
        if not self.valid_from <= n <= self.valid_to:
            raise StaleCoefficientsError(
                f"step {n} is outside the fitted range [{self.valid_from}, {self.valid_to}]")
        return self.alphas[n]

    @classmethod
    def constant_in_time(cls, alpha, n_steps: int) -> "CoefficientSchedule":
        alpha = np.asarray(alpha, dtype=float)
        return cls(np.tile(alpha, (n_steps + 1, 1)), 0, n_steps)


def adaptive_centres(spec: ProblemSpec, grid: TimeGrid, x0, K: int, seed: int,
                     workers: int = 1, freeze: bool = False) -> np.ndarray:
    """Centres mu_k(n) = X^(k)_n from K auxiliary forward paths.

    The paths come from their own RNG stream, independent of the regression
    ensemble drawn with the same master seed. By default they are not frozen
    at exit. Frozen centre paths pile up at the exit point, which gives
    near-duplicate basis columns.
    """
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K!r}")
    batch = simulate_forward(spec, grid, x0, K, seed, freeze=freeze,
                             stream=CENTRE_STREAM, workers=workers)
    if batch.failed.any():
        raise RuntimeError(f"centre trajectories {np.flatnonzero(batch.failed).tolist()} diverged")
    return np.ascontiguousarray(batch.states.transpose(1, 0, 2))


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    return x.reshape(1, dim) if single else x, single


def eval_basis(basis: BasisSet, n: int, x) -> np.ndarray:
    xb, single = _as_batch(x, basis.dim)
    phi = basis.values(n, xb)
    return phi[0] if single else phi


def eval_basis_grad(basis: BasisSet, n: int, x) -> np.ndarray:
    xb, single = _as_batch(x, basis.dim)
    grad = basis.gradients(n, xb)
    return grad[0] if single else grad


def eval_value(basis: BasisSet, coeffs: CoefficientSchedule, n: int, x):
    alpha = coeffs.at(n)
    xb, single = _as_batch(x, basis.dim)
    v = (basis.values(n, xb) * alpha).sum(axis=-1)
    return float(v[0]) if single else v


def eval_value_grad(basis: BasisSet, coeffs: CoefficientSchedule, n: int, x) -> np.ndarray:
    alpha = coeffs.at(n)
    xb, single = _as_batch(x, basis.dim)
    g = (basis.gradients(n, xb) * alpha[None, :, None]).sum(axis=1)
    return g[0] if single else g


def write_coefficients_csv(coeffs: CoefficientSchedule, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "k", "alpha"])
        for n in range(coeffs.valid_from, coeffs.valid_to + 1):
            for k, a in enumerate(coeffs.alphas[n]):
                w.writerow([n, k, repr(float(a))])
