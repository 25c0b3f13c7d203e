"""Full-batch gradient descent on the empirical denoising objective.

The noise draws ``xi_ij`` are sampled once per batch and held fixed, so the
objective is a deterministic function of the hidden layers. ``gd_run`` records
every iterate together with the argmax set of the per-term losses and the
rate factor ``beta_j sigma_bar_j^2`` of the selected time index.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import NamedTuple, Optional, Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray
import pandas as pd
from scipy import stats
import structlog

from .schedules import TimeGrid, VarianceSchedule, WeightingSpec, rate_factors
from .score_net import NumericalFailureError, ScoreNet, forward_batch, loss_and_grad, with_hidden


logger = structlog.get_logger(__name__)

FloatArray = NDArray[np.float64]

DIVERGENCE_FACTOR = 10.0


class TrainingError(RuntimeError):
    pass


class DataSourceError(TrainingError):
    pass


class TrainStatus(str, Enum):
    RUNNING = "running"
    CONVERGED = "converged"
    MAX_STEPS = "max_steps"
    DIVERGED = "diverged"
    UNSTABLE = "unstable"


# --- data -------------------------------------------------------------------


class DataSource(Protocol):
    @property
    def d(self) -> int: ...

    def draw(self, n: int, rng: np.random.Generator) -> FloatArray: ...


@dataclass(frozen=True)
class GaussianSource:
    """Isotropic Gaussian ``N(mean, sigma^2 I_d)``."""

    d: int
    mean: tuple[float, ...] = ()
    sigma: float = 1.0

    def __post_init__(self) -> None:
        if self.d < 1 or self.sigma <= 0.0:
            raise DataSourceError(f"invalid Gaussian source d={self.d}, sigma={self.sigma}")
        if self.mean and len(self.mean) != self.d:
            raise DataSourceError(f"mean has {len(self.mean)} entries, d={self.d}")

    @property
    def mean_vector(self) -> FloatArray:
        return np.asarray(self.mean, dtype=np.float64) if self.mean else np.zeros(self.d)

    def draw(self, n: int, rng: np.random.Generator) -> FloatArray:
        return self.mean_vector + self.sigma * rng.standard_normal((n, self.d))


@dataclass(frozen=True)
class GaussianMixtureSource:
    """Two equal-weight components ``N(+-mu, sigma^2 I)`` with ``mu = separation * (1, ..., 1)``."""

    d: int
    separation: float = 1.0
    sigma: float = 1.0

    def __post_init__(self) -> None:
        if self.d < 1 or self.sigma <= 0.0 or self.separation < 0.0:
            raise DataSourceError("invalid mixture source parameters")

    def draw(self, n: int, rng: np.random.Generator) -> FloatArray:
        signs = np.where(rng.integers(0, 2, size=n) == 1, 1.0, -1.0)
        centers = signs[:, np.newaxis] * self.separation * np.ones(self.d)
        return centers + self.sigma * rng.standard_normal((n, self.d))


@dataclass(frozen=True)
class FileSource:
    """Samples read from a CSV (``.csv``) or whitespace-separated text file, one sample per row."""

    path: Path
    d: int

    def load(self) -> FloatArray:
        if not self.path.exists():
            raise DataSourceError(f"data file missing at {self.path}")
        sep = "," if self.path.suffix.lower() == ".csv" else r"\s+"
        try:
            frame = pd.read_csv(self.path, sep=sep, header=None, comment="#", engine="python")
        except (ValueError, pd.errors.ParserError) as exc:
            raise DataSourceError(f"could not parse {self.path}: {exc}") from exc
        values = frame.to_numpy(dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != self.d:
            raise DataSourceError(f"{self.path} has rows of dimension {values.shape[-1]}, expected {self.d}")
        if not np.all(np.isfinite(values)):
            raise DataSourceError(f"{self.path} contains non-finite values")
        return values

    def draw(self, n: int, rng: np.random.Generator) -> FloatArray:
        values = self.load()
        if values.shape[0] < n:
            raise DataSourceError(f"{self.path} has {values.shape[0]} rows, {n} requested")
        return values[:n].copy()


@dataclass(frozen=True)
class TrainBatch:
    """Data ``x`` (n x d), fixed noise ``xi`` (n x N x d) and noise levels ``sigma_bar(t_1..t_N)``."""

    x: FloatArray
    xi: FloatArray
    sigma_bars: FloatArray
    seed: int

    def __post_init__(self) -> None:
        for name in ("x", "xi", "sigma_bars"):
            array = np.array(getattr(self, name), dtype=np.float64)
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        n, d = self.x.shape
        if self.xi.shape != (n, self.sigma_bars.size, d):
            raise TrainingError(f"xi has shape {self.xi.shape}, expected {(n, self.sigma_bars.size, d)}")

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    @property
    def N(self) -> int:  # noqa: N802
        return int(self.sigma_bars.size)

    @property
    def d(self) -> int:
        return int(self.x.shape[1])

    def inputs(self) -> FloatArray:
        """Augmented inputs ``[x_i + sigma_bar_j xi_ij; sigma_bar_j]``, shape ``(n, N, d+1)``."""
        noisy = self.x[:, np.newaxis, :] + self.sigma_bars[np.newaxis, :, np.newaxis] * self.xi
        levels = np.broadcast_to(self.sigma_bars[np.newaxis, :, np.newaxis], (self.n, self.N, 1))
        return np.concatenate([noisy, levels], axis=2)


def make_batch(
    source: DataSource,
    n: int,
    grid: TimeGrid,
    schedule: VarianceSchedule,
    seed: int,
) -> TrainBatch:
    if n < 1:
        raise TrainingError(f"batch needs n >= 1, got {n}")
    rng = np.random.default_rng(seed)
    x = np.asarray(source.draw(n, rng), dtype=np.float64)
    if x.shape != (n, source.d):
        raise DataSourceError(f"source produced shape {x.shape}, expected {(n, source.d)}")
    xi = rng.standard_normal((n, grid.N, source.d))
    sigma_bars = schedule.sigma_bar(grid.times[1:])
    logger.info("batch_built", n=n, N=grid.N, d=source.d, seed=seed)
    return TrainBatch(x=x, xi=xi, sigma_bars=sigma_bars, seed=seed)


# --- gradient descent ---------------------------------------------------------


class StepRecord(NamedTuple):
    step: int
    loss: float
    j_star: int
    rate_factor: float
    argmax_size: int
    # (i, j) pairs attaining the largest per-term loss; i is 0-based, j is 1-based
    argmax_set: tuple[tuple[int, int], ...] = ()


@dataclass
class TrainState:
    net: ScoreNet
    lr: float
    step: int = 0
    loss_trace: list[tuple[int, float]] = field(default_factory=list)
    per_term_loss: Optional[FloatArray] = None
    step_records: list[StepRecord] = field(default_factory=list)
    status: TrainStatus = TrainStatus.RUNNING
    halvings: int = 0

    @property
    def initial_loss(self) -> Optional[float]:
        return self.loss_trace[0][1] if self.loss_trace else None

    @property
    def final_loss(self) -> Optional[float]:
        return self.loss_trace[-1][1] if self.loss_trace else None


def _step_record(step: int, loss: float, per_term: FloatArray, factors: FloatArray) -> StepRecord:
    peak = per_term.max()
    rows, columns = np.nonzero(per_term == peak)
    candidates = np.unique(columns)
    j_index = int(candidates[np.argmax(factors[candidates])])
    # time indices are reported 1-based to match t_1 ... t_N
    argmax_set = tuple((int(i), int(j) + 1) for i, j in zip(rows, columns))
    return StepRecord(step, loss, j_index + 1, float(factors[j_index]), int(columns.size), argmax_set)


def gd_run(
    state: TrainState,
    batch: TrainBatch,
    weighting: WeightingSpec,
    max_steps: int,
    eps_train: float,
    abort_on_increase_after: Optional[int] = None,
) -> TrainState:
    """Run ``W <- W - h grad`` on the hidden layers until the loss drops to ``eps_train``.

    Terminal status is ``converged``, ``max_steps``, ``diverged`` (loss above ten
    times the initial loss, or a non-finite activation after an update) or
    ``unstable`` (a loss increase after step ``abort_on_increase_after``).
    """
    if state.net.L == 0:
        raise TrainingError("network has no trainable layers (L = 0)")
    if state.lr < 0.0 or not np.isfinite(state.lr):
        raise TrainingError(f"learning rate must be finite and non-negative, got {state.lr}")
    if max_steps < 1:
        raise TrainingError(f"max_steps must be >= 1, got {max_steps}")
    if not eps_train > 0.0:
        raise TrainingError(f"eps_train must be positive, got {eps_train}")

    factors = weighting.beta * batch.sigma_bars**2
    net = state.net
    k = state.step
    trace = list(state.loss_trace)
    records = list(state.step_records)

    result = loss_and_grad(net, batch, weighting)
    if not trace or trace[-1][0] != k:
        trace.append((k, result.loss))
        records.append(_step_record(k, result.loss, result.per_term, factors))
    initial = trace[0][1]
    status = TrainStatus.RUNNING
    taken = 0

    while True:
        # at least one update is always taken
        if taken >= 1 and result.loss <= eps_train:
            status = TrainStatus.CONVERGED
            break
        if taken >= max_steps:
            status = TrainStatus.MAX_STEPS
            break
        previous_loss = result.loss
        previous = (net, result)
        net = with_hidden(net, [W - state.lr * g for W, g in zip(net.hidden, result.grads)])
        k += 1
        taken += 1
        try:
            result = loss_and_grad(net, batch, weighting)
        except NumericalFailureError as exc:
            logger.warning("gd_numerical_failure", step=k, i=exc.i, j=exc.j, lr=state.lr)
            net, result = previous
            k -= 1
            status = TrainStatus.DIVERGED
            break
        trace.append((k, result.loss))
        records.append(_step_record(k, result.loss, result.per_term, factors))
        if not np.isfinite(result.loss) or result.loss > DIVERGENCE_FACTOR * initial:
            status = TrainStatus.DIVERGED
            break
        if abort_on_increase_after is not None and k > abort_on_increase_after and result.loss > previous_loss:
            status = TrainStatus.UNSTABLE
            break

    logger.info(
        "gd_run_finished",
        status=status.value,
        steps=taken,
        lr=state.lr,
        initial_loss=initial,
        final_loss=result.loss,
    )
    return replace(
        state,
        net=net,
        step=k,
        loss_trace=trace,
        per_term_loss=result.per_term,
        step_records=records,
        status=status,
    )


def default_learning_rate(
    grid: TimeGrid,
    schedule: VarianceSchedule,
    weighting: WeightingSpec,
    n: int,
    m: int,
    constant: float = 0.1,
) -> float:
    """``constant * n N / (m * min_j w(t_j)(t_j - t_{j-1}) sigma_bar_{t_j})``."""
    factors = rate_factors(weighting, grid, schedule)
    return float(constant * n * grid.N / (m * factors.min()))


def fit(
    net: ScoreNet,
    batch: TrainBatch,
    weighting: WeightingSpec,
    lr: float,
    max_steps: int,
    eps_train: float,
    *,
    max_halvings: int = 40,
    abort_on_increase_after: Optional[int] = None,
) -> TrainState:
    """Train from ``net``, halving the learning rate and restarting whenever a run diverges.

    With ``abort_on_increase_after`` set, a loss increase after that step also
    triggers a halving, which yields a monotone trace past the warm-up.
    The returned state carries the number of halvings; its ``lr`` is
    ``lr / 2 ** halvings``.
    """
    initial_lr = lr
    state = TrainState(net=net, lr=lr)
    for attempt in range(max_halvings + 1):
        state = gd_run(
            TrainState(net=net, lr=lr, halvings=attempt),
            batch,
            weighting,
            max_steps,
            eps_train,
            abort_on_increase_after=abort_on_increase_after,
        )
        if state.status not in (TrainStatus.DIVERGED, TrainStatus.UNSTABLE):
            logger.info(
                "fit_finished",
                status=state.status.value,
                halvings=attempt,
                initial_lr=initial_lr,
                lr=lr,
                steps=state.step,
            )
            return state
        if attempt < max_halvings:
            logger.info("learning_rate_halved", lr=lr, new_lr=lr / 2.0, reason=state.status.value)
            lr /= 2.0
    logger.warning("fit_gave_up", halvings=max_halvings, initial_lr=initial_lr, lr=lr, status=state.status.value)
    return state


# --- diagnostics --------------------------------------------------------------


class DecayTrace(NamedTuple):
    steps: NDArray[np.int64]
    losses: FloatArray
    ratios: FloatArray
    j_star: NDArray[np.int64]
    rate_factor: FloatArray
    argmax_size: NDArray[np.int64]
    argmax_sets: tuple[tuple[tuple[int, int], ...], ...]


def decay_ratio_trace(state: TrainState) -> DecayTrace:
    """Ratios ``L(k+1) / L(k)``; entry k is paired with ``j*(k)`` and its rate factor."""
    if len(state.loss_trace) < 2:
        raise TrainingError("decay ratios need at least two recorded losses")
    steps = np.array([k for k, _ in state.loss_trace], dtype=np.int64)
    losses = np.array([loss for _, loss in state.loss_trace], dtype=np.float64)
    numerators, denominators = losses[1:], losses[:-1]
    ratios = np.divide(numerators, denominators, out=np.ones_like(numerators), where=denominators != 0.0)
    records = state.step_records[: len(ratios)]
    return DecayTrace(
        steps=steps[:-1],
        losses=denominators,
        ratios=ratios,
        j_star=np.array([r.j_star for r in records], dtype=np.int64),
        rate_factor=np.array([r.rate_factor for r in records], dtype=np.float64),
        argmax_size=np.array([r.argmax_size for r in records], dtype=np.int64),
        argmax_sets=tuple(r.argmax_set for r in records),
    )


def rate_factor_correlation(trace: DecayTrace) -> float:
    """Spearman rank correlation between the per-step decay ``1 - ratio`` and the selected rate factor.

    A larger rate factor at ``j*(k)`` should mean a faster decay at step k, so
    the expected sign is positive. NaN when either series is constant.
    """
    decay = 1.0 - trace.ratios
    if decay.size < 2 or np.ptp(decay) == 0.0 or np.ptp(trace.rate_factor) == 0.0:
        return float("nan")
    result = stats.spearmanr(decay, trace.rate_factor)
    return float(result.statistic)


def loss_trace_frame(state: TrainState) -> pd.DataFrame:
    return pd.DataFrame(state.loss_trace, columns=["step", "loss"])


def decay_frame(state: TrainState) -> pd.DataFrame:
    """Decay diagnostics with columns ``step, loss, ratio, j_star, rate_factor``."""
    trace = decay_ratio_trace(state)
    return pd.DataFrame(
        {
            "step": trace.steps,
            "loss": trace.losses,
            "ratio": trace.ratios,
            "j_star": trace.j_star,
            "rate_factor": trace.rate_factor,
        }
    )


def residual_norms_sq(net: ScoreNet, batch: TrainBatch) -> FloatArray:
    """``||sigma_bar_j S(X_ij) + xi_ij||^2`` for every (i, j)."""
    rows = batch.inputs().reshape(batch.n * batch.N, batch.d + 1)
    output = forward_batch(net, rows).reshape(batch.n, batch.N, batch.d)
    residual = batch.sigma_bars[np.newaxis, :, np.newaxis] * output + batch.xi
    return np.einsum("ijd,ijd->ij", residual, residual)


def equalizing_total_weighting(net: ScoreNet, batch: TrainBatch) -> FloatArray:
    """Bell-shaped ``beta`` making the per-time mean of ``f(theta; i, j)`` equal across j (mean 1)."""
    mean_residual = residual_norms_sq(net, batch).mean(axis=0)
    if np.any(mean_residual <= 0.0) or not np.all(np.isfinite(mean_residual)):
        raise TrainingError("per-time residuals must be finite and positive to equalize")
    beta = 1.0 / mean_residual
    return beta / beta.mean()


def bell_shape_probe(net: ScoreNet, x: ArrayLike, xi: ArrayLike, sigma_grid: ArrayLike) -> FloatArray:
    """Rows ``(sigma_bar, ||sigma_bar S(x + sigma_bar xi; sigma_bar) + xi||)`` over ``sigma_grid``."""
    x = np.asarray(x, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    levels = np.asarray(sigma_grid, dtype=np.float64)
    if levels.ndim != 1 or np.any(levels <= 0.0) or np.any(np.diff(levels) <= 0.0):
        raise ValueError("sigma_grid must be positive and strictly ascending")
    noisy = x[np.newaxis, :] + levels[:, np.newaxis] * xi[np.newaxis, :]
    output = forward_batch(net, np.column_stack([noisy, levels]))
    residual = levels[:, np.newaxis] * output + xi[np.newaxis, :]
    return np.column_stack([levels, np.linalg.norm(residual, axis=1)])


__all__ = [
    "DataSource",
    "DataSourceError",
    "DecayTrace",
    "FileSource",
    "GaussianMixtureSource",
    "GaussianSource",
    "StepRecord",
    "TrainBatch",
    "TrainState",
    "TrainStatus",
    "TrainingError",
    "bell_shape_probe",
    "decay_frame",
    "decay_ratio_trace",
    "default_learning_rate",
    "equalizing_total_weighting",
    "fit",
    "gd_run",
    "loss_trace_frame",
    "make_batch",
    "rate_factor_correlation",
    "residual_norms_sq",
]
