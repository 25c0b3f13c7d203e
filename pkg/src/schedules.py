"""Variance schedules, time grids and loss weightings.

Two variance schedules are supported: EDM (``sigma_bar(t) = t``) and SONG
(``sigma_bar(t) = sqrt(t)``). Each has a first-class time grid: polynomial
for EDM and exponential for SONG. The crossed pairings are available behind
the ``experimental`` flag.

Forward grid ``t_0 < ... < t_N`` with ``t_0 = delta`` and ``t_N = T``. The
backward grid used by the sampler is ``t_back_j = T - t_{N-j}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union, overload

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator
import structlog


logger = structlog.get_logger(__name__)

FloatArray = NDArray[np.float64]

P_MEAN = -1.2
P_STD = 1.2
SIGMA_DATA = 0.5


class ScheduleError(ValueError):
    """Raised for invalid grids, pairings or weightings."""


class VarianceKind(str, Enum):
    EDM = "edm"
    SONG = "song"


class GridKind(str, Enum):
    POLYNOMIAL = "poly"
    EXPONENTIAL = "exp"


FIRST_CLASS_PAIRINGS = {
    (VarianceKind.EDM, GridKind.POLYNOMIAL),
    (VarianceKind.SONG, GridKind.EXPONENTIAL),
}


class VarianceSchedule(BaseModel):
    """sigma_bar as a function of forward time, with its noise-level range."""

    model_config = ConfigDict(frozen=True)

    kind: VarianceKind
    sigma_bar_min: float = Field(gt=0.0)
    sigma_bar_max: float = Field(gt=0.0)

    @model_validator(mode="after")
    def _check_range(self) -> VarianceSchedule:
        if not self.sigma_bar_min < self.sigma_bar_max:
            raise ValueError(
                f"sigma_bar_min ({self.sigma_bar_min}) must be smaller than sigma_bar_max ({self.sigma_bar_max})"
            )
        return self

    @overload
    def sigma_bar(self, t: float) -> float: ...

    @overload
    def sigma_bar(self, t: FloatArray) -> FloatArray: ...

    def sigma_bar(self, t: Union[float, FloatArray]) -> Union[float, FloatArray]:
        if self.kind is VarianceKind.EDM:
            return t
        return np.sqrt(t)

    @overload
    def sigma_bar_sq(self, t: float) -> float: ...

    @overload
    def sigma_bar_sq(self, t: FloatArray) -> FloatArray: ...

    def sigma_bar_sq(self, t: Union[float, FloatArray]) -> Union[float, FloatArray]:
        if self.kind is VarianceKind.EDM:
            return t * t
        return t

    def time_of(self, sigma_bar: float) -> float:
        """Inverse of ``sigma_bar``."""
        if self.kind is VarianceKind.EDM:
            return float(sigma_bar)
        return float(sigma_bar) ** 2

    @property
    def t_min(self) -> float:
        return self.time_of(self.sigma_bar_min)

    @property
    def t_max(self) -> float:
        return self.time_of(self.sigma_bar_max)


def _read_only(values: ArrayLike) -> FloatArray:
    array = np.array(values, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class TimeGrid:
    """Forward time grid ``t_0 ... t_N`` (immutable)."""

    times: FloatArray
    kind: GridKind
    rho: Optional[float] = None
    experimental: bool = False
    _backward: FloatArray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        times = _read_only(self.times)
        if times.ndim != 1 or times.size < 1:
            raise ScheduleError("time grid must be a non-empty 1-D array")
        if not np.all(np.isfinite(times)) or times[0] <= 0.0:
            raise ScheduleError("time grid must be finite with t_0 > 0")
        if np.any(np.diff(times) <= 0.0):
            raise ScheduleError("time grid must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "_backward", _read_only(times[-1] - times[::-1]))

    @property
    def N(self) -> int:  # noqa: N802
        return int(self.times.size - 1)

    @property
    def delta(self) -> float:
        return float(self.times[0])

    @property
    def T(self) -> float:  # noqa: N802
        return float(self.times[-1])

    @property
    def backward_times(self) -> FloatArray:
        """``t_back_j = T - t_{N-j}``; ``t_back_0 = 0`` and ``t_back_N = T - delta``."""
        return self._backward

    @property
    def forward_steps(self) -> FloatArray:
        """``t_j - t_{j-1}`` for ``j = 1..N``."""
        return np.diff(self.times)

    @property
    def backward_steps(self) -> FloatArray:
        """``gamma_j = t_back_{j+1} - t_back_j = t_{N-j} - t_{N-j-1}`` for ``j = 0..N-1``."""
        return np.diff(self.times)[::-1].copy()


def build_time_grid(
    schedule: VarianceSchedule,
    kind: GridKind,
    N: int,  # noqa: N803
    rho: Optional[float] = None,
    *,
    experimental: bool = False,
) -> TimeGrid:
    """Build the N+1 point forward grid for ``schedule``.

    Polynomial: ``t_j = (b - (b - a) (N-j)/N) ** rho`` with ``a = t_min ** (1/rho)``
    and ``b = t_max ** (1/rho)``. Exponential: ``t_j = t_max (t_min/t_max) ** ((N-j)/N)``
    evaluated in log space. For the first-class pairings these are exactly the
    EDM and SONG grids; endpoints are pinned to ``t_min`` and ``t_max``.
    """
    if N < 1:
        raise ScheduleError(f"grid needs at least one step, got N={N}")
    kind = GridKind(kind)
    if (schedule.kind, kind) not in FIRST_CLASS_PAIRINGS and not experimental:
        raise ScheduleError(
            f"pairing ({schedule.kind.value}, {kind.value}) is experimental; pass experimental=True to allow it"
        )

    t_lo, t_hi = schedule.t_min, schedule.t_max
    fraction = (N - np.arange(N + 1)) / N

    if kind is GridKind.POLYNOMIAL:
        if rho is None or rho < 1.0:
            raise ScheduleError(f"polynomial grid needs rho >= 1, got {rho}")
        lo_root = t_lo ** (1.0 / rho)
        hi_root = t_hi ** (1.0 / rho)
        times = (hi_root - (hi_root - lo_root) * fraction) ** rho
    else:
        rho = None
        log_lo, log_hi = np.log(t_lo), np.log(t_hi)
        times = np.exp(log_hi + fraction * (log_lo - log_hi))

    times[0] = t_lo
    times[-1] = t_hi
    grid = TimeGrid(times=times, kind=kind, rho=rho, experimental=experimental)
    logger.debug("time_grid_built", variance=schedule.kind.value, grid=kind.value, N=N, rho=rho)
    return grid


def backward_variances(grid: TimeGrid, schedule: VarianceSchedule) -> FloatArray:
    """``sigma_bar^2(T - t_back_k)`` for ``k = 0..N``, i.e. the forward variances reversed."""
    return schedule.sigma_bar_sq(grid.times[::-1].copy())


@overload
def diffusion_coeff_sq(schedule: VarianceSchedule, t: float) -> float: ...


@overload
def diffusion_coeff_sq(schedule: VarianceSchedule, t: FloatArray) -> FloatArray: ...


def diffusion_coeff_sq(schedule: VarianceSchedule, t: Union[float, FloatArray]) -> Union[float, FloatArray]:
    """``sigma_t^2 = 0.5 * d(sigma_bar_t^2)/dt`` for the zero-drift forward SDE."""
    if np.any(np.asarray(t) <= 0.0):
        raise ScheduleError("diffusion coefficient is defined for t > 0 only")
    if schedule.kind is VarianceKind.EDM:
        return t
    if isinstance(t, np.ndarray):
        return np.full_like(t, 0.5, dtype=np.float64)
    return 0.5


@overload
def edm_total_weighting(
    sigma_bar: float, p_mean: float = ..., p_std: float = ..., sigma_data: float = ...
) -> float: ...


@overload
def edm_total_weighting(
    sigma_bar: FloatArray, p_mean: float = ..., p_std: float = ..., sigma_data: float = ...
) -> FloatArray: ...


def edm_total_weighting(
    sigma_bar: Union[float, FloatArray],
    p_mean: float = P_MEAN,
    p_std: float = P_STD,
    sigma_data: float = SIGMA_DATA,
) -> Union[float, FloatArray]:
    """EDM total weighting: log-normal noise density times the EDM loss weight."""
    if np.any(np.asarray(sigma_bar) <= 0.0):
        raise ScheduleError("sigma_bar must be positive")
    if p_std <= 0.0 or sigma_data <= 0.0:
        raise ScheduleError("p_std and sigma_data must be positive")
    gaussian = np.exp(-((np.log(sigma_bar) - p_mean) ** 2) / (2.0 * p_std**2))
    value = gaussian * (sigma_bar**2 + sigma_data**2) / (sigma_bar * sigma_data**2)
    if isinstance(value, np.ndarray):
        return value
    return float(value)


@dataclass(frozen=True)
class WeightingSpec:
    """Per-gridpoint weighting ``w(t_j)`` and total weighting ``beta_j`` for ``j = 1..N``."""

    w: FloatArray
    beta: FloatArray

    def __post_init__(self) -> None:
        w = _read_only(self.w)
        beta = _read_only(self.beta)
        if w.shape != beta.shape or w.ndim != 1:
            raise ScheduleError("w and beta must be 1-D arrays of equal length")
        for name, values in (("w", w), ("beta", beta)):
            if not np.all(np.isfinite(values)) or np.any(values <= 0.0):
                raise ScheduleError(f"{name} entries must be finite and positive")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "beta", beta)

    @property
    def N(self) -> int:  # noqa: N802
        return int(self.beta.size)


def weighting_from_total(beta: ArrayLike, grid: TimeGrid, schedule: VarianceSchedule) -> WeightingSpec:
    """Invert ``beta_j = w(t_j) (t_j - t_{j-1}) / sigma_bar(t_j)`` for ``w``."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (grid.N,):
        raise ScheduleError(f"beta has shape {beta.shape}, grid needs ({grid.N},)")
    if np.any(beta <= 0.0):
        raise ScheduleError("total weighting must be positive")
    steps = grid.forward_steps
    if np.any(steps == 0.0):
        raise ScheduleError("grid contains zero-length steps")
    sigma_bars = schedule.sigma_bar(grid.times[1:])
    w = beta * sigma_bars / steps
    return WeightingSpec(w=w, beta=beta)


def total_from_weighting(w: ArrayLike, grid: TimeGrid, schedule: VarianceSchedule) -> FloatArray:
    w = np.asarray(w, dtype=np.float64)
    return w * grid.forward_steps / schedule.sigma_bar(grid.times[1:])


def uniform_weighting(grid: TimeGrid, schedule: VarianceSchedule) -> WeightingSpec:
    return weighting_from_total(np.ones(grid.N), grid, schedule)


def edm_weighting(
    grid: TimeGrid,
    schedule: VarianceSchedule,
    *,
    p_mean: float = P_MEAN,
    p_std: float = P_STD,
    sigma_data: float = SIGMA_DATA,
    scale: float = 1.0,
) -> WeightingSpec:
    """``beta_j = scale * beta_EDM(sigma_bar(t_j))``, converted to ``w``."""
    sigma_bars = schedule.sigma_bar(grid.times[1:])
    beta = scale * edm_total_weighting(sigma_bars, p_mean, p_std, sigma_data)
    return weighting_from_total(beta, grid, schedule)


def rate_factors(weighting: WeightingSpec, grid: TimeGrid, schedule: VarianceSchedule) -> FloatArray:
    """``w(t_j) (t_j - t_{j-1}) sigma_bar(t_j)``, the per-time factor in the GD decay rate."""
    return weighting.w * grid.forward_steps * schedule.sigma_bar(grid.times[1:])


def weighting_norm_sum(weighting: WeightingSpec, grid: TimeGrid, schedule: VarianceSchedule) -> float:
    """Sum of the rate factors. Expected to be O(N); reported, never enforced."""
    return float(np.sum(rate_factors(weighting, grid, schedule)))


__all__ = [
    "FIRST_CLASS_PAIRINGS",
    "GridKind",
    "ScheduleError",
    "TimeGrid",
    "VarianceKind",
    "VarianceSchedule",
    "WeightingSpec",
    "backward_variances",
    "build_time_grid",
    "diffusion_coeff_sq",
    "edm_total_weighting",
    "edm_weighting",
    "rate_factors",
    "total_from_weighting",
    "uniform_weighting",
    "weighting_from_total",
    "weighting_norm_sum",
]
