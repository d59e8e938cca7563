"""Feedback control from the fitted value function and Girsanov reweighting.

The candidate control is ``u(x, t_n) = -sigma(x)^T grad V_K(x, t_n)``. Paths
simulated under it carry the discrete log-likelihood

    L = sum_n u_n . xi_{n+1} sqrt(dt) + 1/2 sum_n |u_n|^2 dt,

and ``exp(-L - W)`` is an unbiased estimator of ``E[exp(-W)]`` under the
uncontrolled dynamics.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .basis import BasisSet, CoefficientSchedule
from .model import ProblemSpec
from .sde import (CONTROLLED_STREAM, DEFAULT_CLIP, VANILLA_STREAM, TimeGrid,
                  TrajectoryBatch, simulate_controlled, simulate_forward)


class EstimatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class ControlPolicy:
    """u = -sigma^T grad V_K, bounded in norm by ``clip``.

    Steps outside the fitted range use the coefficients of the nearest
    fitted step, so the first and last Euler steps reuse alpha(t_1) and
    alpha(t_{N-1}).
    """

    basis: BasisSet
    coeffs: CoefficientSchedule
    spec: ProblemSpec
    clip: float = DEFAULT_CLIP

    def __post_init__(self):
        if not self.clip > 0:
            raise ValueError(f"clip must be positive, got {self.clip!r}")
        if self.coeffs.valid_to < self.coeffs.valid_from:
            raise ValueError("coefficient schedule has no fitted steps")

    def _step(self, n: int) -> int:
        return min(max(int(n), self.coeffs.valid_from), self.coeffs.valid_to)

    def unclipped(self, x: np.ndarray, n: int) -> np.ndarray:
        k = self._step(n)
        alpha = self.coeffs.at(k)
        grad_v = (self.basis.gradients(k, x) * alpha[None, :, None]).sum(axis=1)
        return -np.einsum("mij,mi->mj", self.spec.sigma(x), grad_v)

    def evaluate(self, x: np.ndarray, n: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = x.reshape(1, -1) if single else x
        u = self.unclipped(xb, n)
        norm = np.sqrt((u * u).sum(axis=-1))
        over = norm > self.clip
        if over.any():
            u[over] *= (self.clip / norm[over])[:, None]
        return u[0] if single else u

    __call__ = evaluate


def make_policy(basis: BasisSet, coeffs: CoefficientSchedule, spec: ProblemSpec,
                clip: float = DEFAULT_CLIP) -> ControlPolicy:
    return ControlPolicy(basis, coeffs, spec, clip)


def zero_policy(m: int):
    """u == 0, as a plain callable usable by :func:`simulate_controlled`."""
    def u(x, n):
        return np.zeros((x.shape[0], m))
    return u


def constant_policy(c):
    c = np.atleast_1d(np.asarray(c, dtype=float))

    def u(x, n):
        return np.broadcast_to(c, (x.shape[0], c.size)).copy()
    return u


@dataclass
class ISReport:
    estimate: float
    free_energy: float
    sample_variance: float
    standard_error: float
    vanilla_estimate: float
    vanilla_variance: float
    vanilla_standard_error: float
    variance_reduction_factor: float
    ess: float
    clipped_fraction: float
    max_log_weight: float
    min_log_weight: float
    n_paths: int
    failed_paths: int

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v)
                for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=2, sort_keys=True)


def _finite(d):
    # JSON has no inf/nan; encode them as strings
    return {k: (repr(v) if isinstance(v, float) and not math.isfinite(v) else v)
            for k, v in d.items()}


def path_cost(spec: ProblemSpec, batch: TrajectoryBatch) -> np.ndarray:
    """W = sum f(X_n, t_n) dt over steps before the stop, plus g at the stop."""
    stop = batch.stop_step()
    M, N = batch.n_paths, batch.n_steps
    idx = np.arange(M)
    w = spec.terminal_cost(batch.states[idx, stop])
    running = np.zeros(M)
    for n in range(N):
        live = stop > n
        if live.any():
            running[live] += batch.dt * spec.running_cost(batch.states[live, n], n * batch.dt)
    return running + w


def log_mean_exp(a: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    top = a.max()
    if not np.isfinite(top):
        return float(top)
    return float(top + math.log(np.exp(a - top).mean()))


def _stats(log_w: np.ndarray):
    """Mean and unbiased variance of exp(log_w), computed with a max-shift."""
    top = log_w.max()
    if not np.isfinite(top):
        raise EstimatorError("all importance weights vanish (log-weights are -inf)")
    scaled = np.exp(log_w - top)
    mean = scaled.mean()
    var = scaled.var(ddof=1) if scaled.size > 1 else float("nan")
    scale = math.exp(top)
    return float(mean * scale), float(var * scale * scale)


def effective_sample_size(log_w: np.ndarray) -> float:
    """(sum w)^2 / sum w^2, invariant to a common shift of the log-weights."""
    s = np.exp(log_w - log_w.max())
    return float(s.sum() ** 2 / (s * s).sum())


def importance_sample(spec: ProblemSpec, grid: TimeGrid, x0, M: int, seed: int,
                      policy, workers: int = 1, shared_noise: bool = False,
                      weights_path=None) -> ISReport:
    """Reweighted estimate of E[exp(-W)] under ``policy`` plus a vanilla run.

    The vanilla ensemble uses its own stream unless ``shared_noise`` is set,
    in which case both runs see the same increments (for path-wise checks).
    The ESS is that of the likelihood ratios exp(-L) alone.
    """
    controlled_stream = CONTROLLED_STREAM
    vanilla_stream = CONTROLLED_STREAM if shared_noise else VANILLA_STREAM
    batch, loglik = simulate_controlled(spec, grid, x0, M, seed, policy,
                                        stream=controlled_stream, workers=workers)
    ok = ~batch.failed
    if not ok.any():
        raise EstimatorError("every controlled trajectory failed")
    cost = path_cost(spec, batch)
    log_w = (-loglik - cost)[ok]
    estimate, variance = _stats(log_w)
    if not estimate > 0:
        raise EstimatorError("importance-sampling estimate underflowed to zero")

    vanilla = simulate_forward(spec, grid, x0, M, seed, freeze=True,
                               stream=vanilla_stream, workers=workers)
    vok = ~vanilla.failed
    v_estimate, v_variance = _stats(-path_cost(spec, vanilla)[vok])

    n_ok = int(ok.sum())
    stop = batch.stop_step()[ok]
    steps = max(int(stop.sum()), 1)
    clipped = 0 if batch.clipped_steps is None else int(batch.clipped_steps[ok].sum())
    vrf = v_variance / variance if variance > 0 else float("inf")
    if weights_path is not None:
        write_weights_csv(weights_path, -loglik, cost, batch.failed)
    return ISReport(
        estimate=estimate,
        free_energy=-math.log(estimate),
        sample_variance=variance,
        standard_error=math.sqrt(variance / n_ok) if n_ok > 1 else float("nan"),
        vanilla_estimate=v_estimate,
        vanilla_variance=v_variance,
        vanilla_standard_error=math.sqrt(v_variance / int(vok.sum())) if vok.sum() > 1 else float("nan"),
        variance_reduction_factor=vrf,
        ess=effective_sample_size(-loglik[ok]),
        clipped_fraction=clipped / steps,
        max_log_weight=float(log_w.max()),
        min_log_weight=float(log_w.min()),
        n_paths=int(M),
        failed_paths=int(M - n_ok),
    )


def write_weights_csv(path, log_lr: np.ndarray, cost: np.ndarray,
                      failed: Optional[np.ndarray] = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "log_likelihood_ratio", "path_cost", "log_weight", "failed"])
        for m in range(log_lr.size):
            bad = int(failed[m]) if failed is not None else 0
            w.writerow([m, repr(float(log_lr[m])), repr(float(cost[m])),
                        repr(float(log_lr[m] - cost[m])), bad])
