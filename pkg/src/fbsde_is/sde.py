"""Euler-Maruyama simulation of stopped diffusions.

Every trajectory draws its Gaussian increments from its own Philox stream
keyed by ``(seed, stream, path index)``, so a batch is reproducible no
matter how the paths are split across workers.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ProblemSpec

logger = logging.getLogger(__name__)

NO_EXIT = -1

# stream ids separating the independent ensembles of one experiment
REGRESSION_STREAM = 0
CENTRE_STREAM = 1
CONTROLLED_STREAM = 2
VANILLA_STREAM = 3

DEFAULT_CLIP = 1e3


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_n = n dt, n = 0..n_steps."""

    dt: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be positive, got {self.dt!r}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps!r}")

    @classmethod
    def from_horizon(cls, horizon: float, dt: float) -> "TimeGrid":
        """N = floor(T / dt), tolerating round-off in the ratio."""
        ratio = horizon / dt
        n = int(round(ratio)) if abs(ratio - round(ratio)) < 1e-9 * max(1.0, ratio) else int(ratio)
        return cls(dt=dt, n_steps=n)

    @property
    def horizon(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def truncate(self, n_steps: int) -> "TimeGrid":
        return TimeGrid(self.dt, n_steps)


@dataclass(frozen=True)
class TrajectoryBatch:
    """M discretised paths with their driving noise.

    ``exit_step[m]`` is the first n with ``states[m, n]`` outside O, or
    ``NO_EXIT``. ``failed`` marks paths aborted on a non-finite state; those
    are held at their last finite state.
    """

    states: np.ndarray        # (M, N+1, d)
    increments: np.ndarray    # (M, N, m)
    exit_step: np.ndarray     # (M,) int
    frozen: bool
    dt: float
    failed: np.ndarray        # (M,) bool
    clipped_steps: Optional[np.ndarray] = None   # (M,) int, controlled runs only

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1] - 1

    @property
    def exited(self) -> np.ndarray:
        return self.exit_step != NO_EXIT

    def stop_step(self) -> np.ndarray:
        """Index of the stopped state min(exit step, N) per path."""
        return np.where(self.exited, self.exit_step, self.n_steps)

    def truncate(self, n_steps: int) -> "TrajectoryBatch":
        """Restrict to steps 0..n_steps; later exits become non-exits."""
        if not 1 <= n_steps <= self.n_steps:
            raise ValueError(f"cannot truncate {self.n_steps} steps to {n_steps}")
        exit_step = np.where(self.exit_step > n_steps, NO_EXIT, self.exit_step)
        clipped = None if self.clipped_steps is None else self.clipped_steps.copy()
        return dataclasses.replace(
            self,
            states=self.states[:, :n_steps + 1].copy(),
            increments=self.increments[:, :n_steps].copy(),
            exit_step=exit_step,
            clipped_steps=clipped,
        )


def draw_increments(seed: int, stream: int, indices, n_steps: int, noise_dim: int) -> np.ndarray:
    """Standard Gaussian increments for the given path indices, (len, N, m)."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty((indices.size, n_steps, noise_dim))
    for i, idx in enumerate(indices):
        ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(idx)))
        out[i] = np.random.Generator(np.random.Philox(ss)).standard_normal((n_steps, noise_dim))
    return out


def _euler(spec: ProblemSpec, grid: TimeGrid, x0: np.ndarray, xi: np.ndarray,
           freeze: bool, control=None, clip: float = DEFAULT_CLIP):
    """Run the (controlled) Euler scheme for one block of paths.

    Returns states, exit steps, failure flags, log-likelihoods and clipped
    step counts. The control only acts while a path is inside O.
    """
    M, N, m = xi.shape
    d = spec.dim
    dt = grid.dt
    sqdt = math.sqrt(dt)
    states = np.empty((M, N + 1, d))
    states[:, 0] = x0
    exit_step = np.full(M, NO_EXIT, dtype=np.int64)
    failed = np.zeros(M, dtype=bool)
    loglik = np.zeros(M)
    clipped = np.zeros(M, dtype=np.int64)

    inside = np.asarray(spec.domain_indicator(states[:, 0]), dtype=bool)
    exit_step[~inside] = 0
    running = inside.copy()   # inside O and not failed

    unclipped = getattr(control, "unclipped", control)
    for n in range(N):
        x = states[:, n]
        t = n * dt
        drift = np.asarray(spec.drift(x, t), dtype=float)
        sig = spec.sigma(x)
        noise = sqdt * (sig * xi[:, n, None, :]).sum(axis=-1)
        if control is not None:
            u = np.asarray(unclipped(x, n), dtype=float).reshape(M, m)
            u = np.where(running[:, None], u, 0.0)
            norm = np.sqrt((u * u).sum(axis=-1))
            over = norm > clip
            if over.any():
                u[over] *= (clip / norm[over])[:, None]
                clipped += over
            drift = drift + (sig * u[:, None, :]).sum(axis=-1)
            loglik += np.where(running, sqdt * (u * xi[:, n]).sum(axis=-1)
                               + 0.5 * dt * (u * u).sum(axis=-1), 0.0)
        new = x + dt * drift + noise

        hold = failed.copy()
        if freeze:
            hold |= exit_step != NO_EXIT
        bad = ~np.isfinite(new).all(axis=-1) & ~hold
        if bad.any():
            # divergence after the stop is irrelevant; hold those paths silently
            live = bad & running
            for idx in np.flatnonzero(live):
                logger.warning("trajectory %d: non-finite state at step %d, aborted", idx, n + 1)
            failed |= live
            hold |= bad
            running &= ~live
        states[:, n + 1] = np.where(hold[:, None], x, new)

        now_inside = np.asarray(spec.domain_indicator(states[:, n + 1]), dtype=bool)
        leaving = running & ~now_inside
        exit_step[leaving] = n + 1
        running &= now_inside
    return states, exit_step, failed, loglik, clipped


def _run_blocks(spec, grid, x0, M, seed, stream, freeze, control, clip, workers, increments=None):
    x0 = np.asarray(x0, dtype=float).reshape(spec.dim)
    chunks = np.array_split(np.arange(M), max(1, min(int(workers), M)))

    def block(idx):
        if increments is None:
            xi = draw_increments(seed, stream, idx, grid.n_steps, spec.noise_dim)
        else:
            xi = increments[idx]
        return (xi,) + _euler(spec, grid, x0, xi, freeze, control, clip)

    if len(chunks) == 1:
        parts = [block(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(block, chunks))
    return tuple(np.concatenate(p) for p in zip(*parts))


def _check(M, grid):
    if int(M) != M or M < 1:
        raise ValueError(f"number of trajectories must be >= 1, got {M!r}")
    if not isinstance(grid, TimeGrid):
        raise TypeError("grid must be a TimeGrid")


def simulate_forward(spec: ProblemSpec, grid: TimeGrid, x0, M: int, seed: int,
                     freeze: bool = True, stream: int = REGRESSION_STREAM,
                     workers: int = 1) -> TrajectoryBatch:
    """Simulate M uncontrolled paths, detecting the first exit from O."""
    _check(M, grid)
    xi, states, exit_step, failed, _, _ = _run_blocks(
        spec, grid, x0, M, seed, stream, freeze, None, DEFAULT_CLIP, workers)
    if (exit_step == 0).any():
        raise ValueError("initial state must lie inside the domain O")
    return TrajectoryBatch(states, xi, exit_step, bool(freeze), grid.dt, failed)


def simulate_controlled(spec: ProblemSpec, grid: TimeGrid, x0, M: int, seed: int,
                        control, stream: int = REGRESSION_STREAM,
                        clip: Optional[float] = None, workers: int = 1):
    """Simulate the drift-shifted scheme b + sigma u, stopped at exit.

    ``control(x, n)`` maps a ``(M, d)`` state batch at step n to ``(M, m)``.
    If the control exposes ``unclipped``/``clip`` (see :class:`ControlPolicy`)
    those are used. Returns the frozen batch and the per-path discrete
    log-likelihood ``sum u.xi sqrt(dt) + 1/2 sum |u|^2 dt``.
    """
    _check(M, grid)
    if clip is None:
        clip = getattr(control, "clip", DEFAULT_CLIP)
    xi, states, exit_step, failed, loglik, clipped = _run_blocks(
        spec, grid, x0, M, seed, stream, True, control, clip, workers)
    if (exit_step == 0).any():
        raise ValueError("initial state must lie inside the domain O")
    n_clipped = int((clipped > 0).sum())
    if n_clipped:
        logger.info("control clipped at |u| = %g on %d of %d paths", clip, n_clipped, M)
    batch = TrajectoryBatch(states, xi, exit_step, True, grid.dt, failed, clipped)
    return batch, loglik


def replay(spec: ProblemSpec, grid: TimeGrid, x0, batch: TrajectoryBatch,
           control=None, clip: float = DEFAULT_CLIP) -> TrajectoryBatch:
    """Regenerate a batch from its stored increments."""
    _, states, exit_step, failed, _, clipped = _run_blocks(
        spec, grid, x0, batch.n_paths, 0, 0, batch.frozen, control, clip, 1,
        increments=batch.increments)
    return dataclasses.replace(batch, states=states, exit_step=exit_step, failed=failed,
                               clipped_steps=None if control is None else clipped)


def write_batch_csv(batch: TrajectoryBatch, path) -> None:
    """Dump path index, step, state components and exit flag, one row per state."""
    d = batch.states.shape[2]
    stop = batch.stop_step()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "step"] + [f"x{i}" for i in range(d)] + ["exited"])
        for m in range(batch.n_paths):
            for n in range(batch.n_steps + 1):
                flag = int(batch.exited[m] and n >= stop[m])
                w.writerow([m, n] + [repr(float(v)) for v in batch.states[m, n]] + [flag])
