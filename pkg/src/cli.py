from __future__ import annotations

from contextlib import contextmanager
import logging
from pathlib import Path
from typing import Iterator, Optional

import pandas as pd
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table
import structlog
import typer

from . import main
from .config import ExperimentConfig, load_config
from .gaussian_oracle import OracleError
from .quadrature import QuadratureError
from .sampler import SamplerError
from .score_net import NumericalFailureError
from .training import TrainingError, TrainStatus


app = typer.Typer(help="Variance-exploding diffusion lab")
console = Console()
logger = structlog.get_logger(__name__)

EXIT_MAX_STEPS = 1
EXIT_DIVERGED = 3
EXIT_NUMERICAL = 4

ConfigOption = typer.Option(None, "--config", exists=True, dir_okay=False, help="KEY=value config file")
SeedOption = typer.Option(None, "--seed", min=0)
OutOption = typer.Option(None, "--out", file_okay=False, help="Output directory (runs are written below it)")
ThreadsOption = typer.Option(None, "--threads", min=1)
LogLevelOption = typer.Option("info", "--log-level")
CheckpointOption = typer.Option(None, "--checkpoint", exists=True, dir_okay=False)


def configure_logging(level: str, command: str) -> None:
    """Key=value event lines, each tagged with the running subcommand."""
    numeric = logging.getLevelNamesMapping().get(level.upper(), logging.INFO)
    structlog.contextvars.clear_contextvars()
    structlog.contextvars.bind_contextvars(command=command)
    structlog.configure(
        wrapper_class=structlog.make_filtering_bound_logger(numeric),
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso", utc=True),
            structlog.processors.format_exc_info,
            structlog.processors.KeyValueRenderer(
                key_order=["timestamp", "level", "command", "event"], drop_missing=True, sort_keys=True
            ),
        ],
    )


def _load(
    config: Optional[Path],
    seed: Optional[int],
    out: Optional[Path],
    threads: Optional[int],
) -> ExperimentConfig:
    try:
        return load_config(config, seed=seed, output_dir=out, threads=threads)
    except (ValidationError, ValueError) as exc:
        raise typer.BadParameter(str(exc)) from exc


@contextmanager
def _error_exit_codes() -> Iterator[None]:
    """Map pipeline failures to exit codes: bad input 2, numerical failure 4."""
    try:
        yield
    except (NumericalFailureError, OracleError, QuadratureError, SamplerError) as exc:
        logger.error("numerical_failure", error=str(exc), kind=type(exc).__name__)
        typer.echo(f"numerical failure: {exc}", err=True)
        raise typer.Exit(code=EXIT_NUMERICAL) from exc
    except (ValidationError, ValueError, TrainingError) as exc:
        raise typer.BadParameter(str(exc)) from exc


def _print_frame(frame: pd.DataFrame, title: str) -> None:
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column))
    for row in frame.itertuples(index=False):
        table.add_row(*[f"{value:.6g}" if isinstance(value, float) else str(value) for value in row])
    console.print(table)


def _print_paths(paths: dict[str, Path]) -> None:
    for name, path in paths.items():
        typer.echo(f"{name}: {path}")


@app.command()
def train(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    threads: Optional[int] = ThreadsOption,
    log_level: str = LogLevelOption,
) -> None:
    """Train the score network by full-batch gradient descent."""
    configure_logging(log_level, "train")
    settings = _load(config, seed, out, threads)
    with _error_exit_codes():
        outcome = main.run_train(settings)
    _print_paths(outcome.paths)
    assert outcome.state is not None
    state = outcome.state
    typer.echo(
        f"status={state.status.value} steps={state.step} lr={state.lr:.6g} "
        f"halvings={state.halvings} final_loss={state.final_loss:.6g}"
    )
    if state.status is TrainStatus.MAX_STEPS:
        raise typer.Exit(code=EXIT_MAX_STEPS)
    if state.status in (TrainStatus.DIVERGED, TrainStatus.UNSTABLE):
        raise typer.Exit(code=EXIT_DIVERGED)


@app.command()
def sample(
    checkpoint: Optional[Path] = CheckpointOption,
    fmt: Optional[str] = typer.Option(None, "--format", help="csv or bin"),
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    threads: Optional[int] = ThreadsOption,
    log_level: str = LogLevelOption,
) -> None:
    """Run the sampler with a trained checkpoint, or the analytic Gaussian score without one."""
    configure_logging(log_level, "sample")
    settings = _load(config, seed, out, threads)
    if fmt is not None:
        if fmt not in ("csv", "bin"):
            raise typer.BadParameter(f"--format must be csv or bin, got {fmt}")
        settings = settings.model_copy(update={"sample": settings.sample.model_copy(update={"format": fmt})})
    with _error_exit_codes():
        outcome = main.run_sample(settings, checkpoint)
    if not outcome.moments.empty:
        _print_frame(outcome.moments, "sample moments")
    _print_paths(outcome.paths)


@app.command()
def oracle(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    threads: Optional[int] = ThreadsOption,
    log_level: str = LogLevelOption,
) -> None:
    """Exact KL and error terms for Gaussian data over the configured step counts."""
    configure_logging(log_level, "oracle")
    settings = _load(config, seed, out, threads)
    with _error_exit_codes():
        frame, paths = main.run_oracle(settings)
    _print_frame(frame[["N", "E_sigma", "exact_kl", "E_I", "E_D"]], "Gaussian oracle")
    _print_paths(paths)


@app.command("compare-schedules")
def compare_schedules(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    threads: Optional[int] = ThreadsOption,
    log_level: str = LogLevelOption,
) -> None:
    """Polynomial against exponential grid: exact KL, score factors and complexity."""
    configure_logging(log_level, "compare-schedules")
    settings = _load(config, seed, out, threads)
    with _error_exit_codes():
        comparison, _, paths = main.run_compare(settings)
    _print_frame(
        comparison[["N", "exact_kl_poly", "exact_kl_exp", "sampling_dominant_winner", "score_dominant_winner"]],
        "schedule comparison",
    )
    _print_paths(paths)


@app.command("probe-bell")
def probe_bell(
    checkpoint: Optional[Path] = CheckpointOption,
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    threads: Optional[int] = ThreadsOption,
    log_level: str = LogLevelOption,
) -> None:
    """Residual norm of one training sample across noise levels."""
    configure_logging(log_level, "probe-bell")
    settings = _load(config, seed, out, threads)
    with _error_exit_codes():
        _, paths = main.run_probe(settings, checkpoint)
    _print_paths(paths)


@app.command()
def report(
    checkpoint: Optional[Path] = CheckpointOption,
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    out: Optional[Path] = OutOption,
    threads: Optional[int] = ThreadsOption,
    log_level: str = LogLevelOption,
) -> None:
    """Full error report for the configured schedule on Gaussian data."""
    configure_logging(log_level, "report")
    settings = _load(config, seed, out, threads)
    with _error_exit_codes():
        _, text, paths = main.run_report(settings, checkpoint)
    typer.echo(text)
    _print_paths(paths)


if __name__ == "__main__":
    app()
