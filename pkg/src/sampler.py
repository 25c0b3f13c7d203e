"""Exponential-integrator sampler for the reverse variance-exploding SDE.

One step from backward index j to j+1 freezes the score at the left endpoint
``T - t_back_j = t_{N-j}`` and integrates the diffusion coefficient exactly::

    Y <- Y + Delta_j * score(t_{N-j}, Y) + sqrt(Delta_j) * U
    Delta_j = sigma_bar^2(t_{N-j}) - sigma_bar^2(t_{N-j-1})

Trajectories are simulated in fixed-size chunks; chunk ``c`` draws from
``numpy.random.default_rng([seed, c])`` so the output does not depend on the
number of worker threads.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from numpy.typing import NDArray
import structlog

from .parallel import ordered_map
from .schedules import TimeGrid, VarianceSchedule, backward_variances
from .score_net import ScoreNet, forward_batch


logger = structlog.get_logger(__name__)

FloatArray = NDArray[np.float64]
ScoreFn = Callable[[float, FloatArray], FloatArray]


class SamplerError(RuntimeError):
    pass


class NegativeIncrementError(SamplerError):
    """The variance increment of a step is negative: grid and schedule disagree."""


class TrajectoryNaNError(SamplerError):
    def __init__(self, index: int, step: int):
        self.index = index
        self.step = step
        super().__init__(f"trajectory {index} became non-finite at step {step}")


@dataclass(frozen=True)
class SamplerConfig:
    grid: TimeGrid
    schedule: VarianceSchedule
    d: int
    trajectories: int
    seed: int
    chunk_size: int = 4096
    threads: int = 1

    def __post_init__(self) -> None:
        if self.d < 1:
            raise SamplerError(f"dimension must be positive, got {self.d}")
        if self.trajectories < 0:
            raise SamplerError(f"trajectories must be non-negative, got {self.trajectories}")
        if self.chunk_size < 1 or self.threads < 1:
            raise SamplerError("chunk_size and threads must be positive")


class SampleMoments(NamedTuple):
    mean: FloatArray
    variance: FloatArray
    mean_stderr: FloatArray
    variance_stderr: FloatArray
    count: int


def increments(grid: TimeGrid, schedule: VarianceSchedule) -> FloatArray:
    """All ``Delta_j`` for ``j = 0 .. N-1``; they telescope to ``sigma_bar_T^2 - sigma_bar_delta^2``."""
    variances = backward_variances(grid, schedule)
    deltas = variances[:-1] - variances[1:]
    if np.any(deltas < 0.0):
        j = int(np.argmax(deltas < 0.0))
        raise NegativeIncrementError(f"Delta_{j} = {deltas[j]!r} is negative")
    return deltas


def step(
    y: FloatArray,
    j: int,
    score: ScoreFn,
    grid: TimeGrid,
    schedule: VarianceSchedule,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[FloatArray] = None,
) -> FloatArray:
    """Advance ``y`` (one state or a stack of rows) from backward index j to j+1."""
    N = grid.N  # noqa: N806
    if not 0 <= j < N:
        raise SamplerError(f"step index {j} outside [0, {N})")
    t_eval = float(grid.times[N - j])
    delta = schedule.sigma_bar_sq(t_eval) - schedule.sigma_bar_sq(float(grid.times[N - j - 1]))
    if delta < 0.0:
        raise NegativeIncrementError(f"Delta_{j} = {delta!r} is negative")
    y = np.asarray(y, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise SamplerError("either rng or noise must be given")
        noise = rng.standard_normal(y.shape)
    return y + delta * score(t_eval, y) + np.sqrt(delta) * noise


def _run_chunk(config: SamplerConfig, score: ScoreFn, chunk: int) -> FloatArray:
    start = chunk * config.chunk_size
    rows = min(config.chunk_size, config.trajectories - start)
    rng = np.random.default_rng([config.seed, chunk])
    grid = config.grid
    y = config.schedule.sigma_bar(grid.T) * rng.standard_normal((rows, config.d))
    for j in range(grid.N):
        y = step(y, j, score, grid, config.schedule, noise=rng.standard_normal((rows, config.d)))
        bad = ~np.isfinite(y).all(axis=1)
        if bad.any():
            index = start + int(np.argmax(bad))
            logger.error("trajectory_not_finite", trajectory=index, step=j)
            raise TrajectoryNaNError(index, j)
    return y


def sample(config: SamplerConfig, score: ScoreFn) -> FloatArray:
    """Terminal states ``Y_{T - delta}`` of ``config.trajectories`` independent runs, shape ``(trajectories, d)``."""
    if config.trajectories == 0:
        return np.empty((0, config.d), dtype=np.float64)
    # rejects a grid with a negative increment before any chunk starts
    increments(config.grid, config.schedule)
    chunks = range(-(-config.trajectories // config.chunk_size))
    results = ordered_map(lambda c: _run_chunk(config, score, c), list(chunks), threads=config.threads)
    samples = np.concatenate(results, axis=0)
    logger.info(
        "samples_drawn",
        trajectories=config.trajectories,
        N=config.grid.N,
        chunks=len(results),
        threads=config.threads,
    )
    return samples


def net_score_fn(net: ScoreNet, schedule: VarianceSchedule) -> ScoreFn:
    """Score of a trained network; ``sigma_bar_t`` is fed through the augmented coordinate."""

    def score(t: float, y: FloatArray) -> FloatArray:
        rows = np.atleast_2d(y)
        augmented = np.column_stack([rows, np.full(rows.shape[0], schedule.sigma_bar(t))])
        return forward_batch(net, augmented).reshape(np.shape(y))

    return score


def zero_score_fn(d: int) -> ScoreFn:
    def score(t: float, y: FloatArray) -> FloatArray:
        if np.shape(y)[-1] != d:
            raise SamplerError(f"expected states of dimension {d}, got {np.shape(y)}")
        return np.zeros_like(y, dtype=np.float64)

    return score


def sample_moments(samples: FloatArray) -> SampleMoments:
    """Per-coordinate mean and variance with their standard errors."""
    count = samples.shape[0]
    if count < 2:
        raise SamplerError("moments need at least two samples")
    mean = samples.mean(axis=0)
    variance = samples.var(axis=0, ddof=1)
    mean_stderr = np.sqrt(variance / count)
    centered = samples - mean
    fourth = (centered**4).mean(axis=0)
    variance_stderr = np.sqrt(np.maximum(fourth - variance**2, 0.0) / count)
    return SampleMoments(mean, variance, mean_stderr, variance_stderr, count)


__all__ = [
    "NegativeIncrementError",
    "SampleMoments",
    "SamplerConfig",
    "SamplerError",
    "ScoreFn",
    "TrajectoryNaNError",
    "increments",
    "net_score_fn",
    "sample",
    "sample_moments",
    "step",
    "zero_score_fn",
]
