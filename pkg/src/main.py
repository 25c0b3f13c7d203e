"""Pipelines behind the CLI commands.

Each ``run_*`` function validates what it needs, computes, writes its
artifacts below ``<output_dir>/<run_name>/`` and returns the data it wrote.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import structlog

from . import error_analysis
from .config import ExperimentConfig
from .gaussian_oracle import analytic_score_fn, exact_kl_report, iterate_law
from .models import ComparisonRow, ErrorReport, OracleRow
from .sampler import SamplerConfig, ScoreFn, net_score_fn, sample, sample_moments
from .schedules import (
    GridKind,
    TimeGrid,
    VarianceKind,
    VarianceSchedule,
    WeightingSpec,
    build_time_grid,
    edm_weighting,
    uniform_weighting,
)
from .score_net import ScoreNet, init_net
from .storage import files
from .storage.checkpoint import load_checkpoint, save_checkpoint
from .training import (
    TrainState,
    bell_shape_probe,
    decay_frame,
    default_learning_rate,
    fit,
    loss_trace_frame,
    make_batch,
)


logger = structlog.get_logger(__name__)

DECAY_COLUMNS = ["step", "loss", "ratio", "j_star", "rate_factor"]
ORACLE_COLUMNS = list(OracleRow.model_fields)
COMPARISON_COLUMNS = list(ComparisonRow.model_fields)


@dataclass
class RunArtifacts:
    paths: dict[str, Path] = field(default_factory=dict)


@dataclass
class TrainOutcome(RunArtifacts):
    state: Optional[TrainState] = None


@dataclass
class SampleOutcome(RunArtifacts):
    samples: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    moments: pd.DataFrame = field(default_factory=pd.DataFrame)


def build_weighting(config: ExperimentConfig, grid: TimeGrid, schedule: VarianceSchedule) -> WeightingSpec:
    if config.train.weighting == "uniform":
        return uniform_weighting(grid, schedule)
    return edm_weighting(grid, schedule)


def batch_seed(config: ExperimentConfig) -> int:
    """Data and noise draws use a stream separate from the network initialization."""
    return (config.seed + 1) % 2**64


def run_train(config: ExperimentConfig) -> TrainOutcome:
    schedule = config.schedule.variance_schedule()
    grid = config.schedule.time_grid()
    batch = make_batch(config.data.data_source(), config.data.n, grid, schedule, batch_seed(config))
    net = init_net(config.data.d, config.net.width, config.net.depth, config.seed)
    weighting = build_weighting(config, grid, schedule)
    lr = config.train.lr or default_learning_rate(
        grid, schedule, weighting, config.data.n, config.net.width, config.train.lr_constant
    )
    logger.info("training_started", run_name=config.run_name, lr=lr, N=grid.N, n=config.data.n)

    state = fit(
        net,
        batch,
        weighting,
        lr,
        config.train.max_steps,
        config.train.eps_train,
        max_halvings=config.train.max_halvings,
        abort_on_increase_after=config.train.abort_on_increase_after,
    )

    run_path = files.run_directory(config)
    outcome = TrainOutcome(state=state)
    outcome.paths["checkpoint"] = save_checkpoint(state.net, run_path / "checkpoint.vesn")
    outcome.paths["loss_trace"] = files.write_csv(loss_trace_frame(state), "loss_trace.csv", config)
    decay = decay_frame(state) if len(state.loss_trace) >= 2 else pd.DataFrame(columns=DECAY_COLUMNS)
    outcome.paths["decay_ratio"] = files.write_csv(decay, "decay_ratio.csv", config)
    outcome.paths["meta"] = files.write_meta_json(
        config=config,
        command="train",
        extra={"status": state.status.value, "lr": state.lr, "halvings": state.halvings, "steps": state.step},
    )
    return outcome


def _score_source(config: ExperimentConfig, schedule: VarianceSchedule, checkpoint: Optional[Path]) -> ScoreFn:
    if checkpoint is None:
        return analytic_score_fn(config.data.gaussian_data(), schedule)
    net = load_checkpoint(checkpoint)
    if net.d != config.data.d:
        raise ValueError(f"checkpoint has d={net.d}, config has data.d={config.data.d}")
    return net_score_fn(net, schedule)


def run_sample(config: ExperimentConfig, checkpoint: Optional[Path] = None) -> SampleOutcome:
    """Sample with a trained checkpoint, or with the analytic Gaussian score when none is given."""
    schedule = config.schedule.variance_schedule()
    grid = config.schedule.time_grid(config.sample.steps)
    score = _score_source(config, schedule, checkpoint)
    sampler_config = SamplerConfig(
        grid=grid,
        schedule=schedule,
        d=config.data.d,
        trajectories=config.sample.trajectories,
        seed=config.seed,
        chunk_size=config.sample.chunk_size,
        threads=config.threads,
    )
    samples = sample(sampler_config, score)

    columns = [f"x{k + 1}" for k in range(config.data.d)]
    moments = pd.DataFrame(columns=["coordinate", "mean", "mean_stderr", "variance", "variance_stderr"])
    if samples.shape[0] >= 2:
        stats = sample_moments(samples)
        moments = pd.DataFrame(
            {
                "coordinate": columns,
                "mean": stats.mean,
                "mean_stderr": stats.mean_stderr,
                "variance": stats.variance,
                "variance_stderr": stats.variance_stderr,
            }
        )
    if checkpoint is None and len(moments):
        law = iterate_law(config.data.gaussian_data(), grid, schedule)
        moments["m_N"] = law.means[-1]
        moments["Sigma_N"] = float(law.cov_scalars[-1])

    outcome = SampleOutcome(samples=samples, moments=moments)
    if config.sample.format == "bin":
        outcome.paths["samples"] = files.write_matrix_bin(samples, "samples.bin", config)
    else:
        outcome.paths["samples"] = files.write_csv(pd.DataFrame(samples, columns=columns), "samples.csv", config)
    outcome.paths["moments"] = files.write_csv(moments, "moments.csv", config)
    outcome.paths["meta"] = files.write_meta_json(
        config=config,
        command="sample",
        extra={"score": "analytic" if checkpoint is None else str(checkpoint)},
    )
    return outcome


def oracle_rows(config: ExperimentConfig) -> pd.DataFrame:
    data = config.data.gaussian_data()
    schedule = config.schedule.variance_schedule()
    rows = []
    for steps in config.oracle.n_values:
        grid = config.schedule.time_grid(steps)
        exact = exact_kl_report(data, grid, schedule)
        rows.append(
            OracleRow(
                N=grid.N,
                schedule=f"{schedule.kind.value}-{grid.kind.value}",
                rho=grid.rho,
                sigma_min=schedule.sigma_bar_min,
                sigma_max=schedule.sigma_bar_max,
                E_sigma=exact.e_sigma,
                exact_kl=exact.kl,
                kl_crosscheck=exact.crosscheck,
                E_I=error_analysis.compute_e_init(data.m2_sq, schedule.sigma_bar_max),
                E_D=error_analysis.compute_e_disc(grid, schedule, data.m2_sq, data.d).total,
            ).model_dump()
        )
    return pd.DataFrame(rows, columns=ORACLE_COLUMNS)


def run_oracle(config: ExperimentConfig) -> tuple[pd.DataFrame, dict[str, Path]]:
    frame = oracle_rows(config)
    paths = {
        "oracle": files.write_csv(frame, "oracle.csv", config),
        "meta": files.write_meta_json(config=config, command="oracle"),
    }
    return frame, paths


def _winner(poly: float, exp: float) -> str:
    return "exp" if exp <= poly else "poly"


def comparison_rows(config: ExperimentConfig) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Per-N comparison of the polynomial (EDM) and exponential (SONG) designs, plus a rho sweep."""
    data = config.data.gaussian_data()
    smin, smax = config.schedule.sigma_min, config.schedule.sigma_max
    rho = config.schedule.rho or 7.0
    edm = VarianceSchedule(kind=VarianceKind.EDM, sigma_bar_min=smin, sigma_bar_max=smax)
    song = VarianceSchedule(kind=VarianceKind.SONG, sigma_bar_min=smin, sigma_bar_max=smax)
    complexity_poly = error_analysis.iteration_complexity(GridKind.POLYNOMIAL, data.m2_sq, data.d, rho, smin, smax)
    complexity_exp = error_analysis.iteration_complexity(GridKind.EXPONENTIAL, data.m2_sq, data.d, None, smin, smax)

    rows = []
    for steps in config.compare.n_values:
        kl_poly = exact_kl_report(data, build_time_grid(edm, GridKind.POLYNOMIAL, steps, rho), edm).kl
        kl_exp = exact_kl_report(data, build_time_grid(song, GridKind.EXPONENTIAL, steps), song).kl
        factors = error_analysis.score_factor_table(steps, rho, smin, smax)
        degenerate = steps == 1
        rows.append(
            ComparisonRow(
                N=steps,
                exact_kl_poly=kl_poly,
                exact_kl_exp=kl_exp,
                score_factor_poly=factors.poly_factor,
                score_factor_exp=factors.exp_factor,
                complexity_poly=complexity_poly,
                complexity_exp=complexity_exp,
                sampling_dominant_winner=None if degenerate else _winner(kl_poly, kl_exp),
                score_dominant_winner=None if degenerate else _winner(factors.poly_factor, factors.exp_factor),
            ).model_dump()
        )
    comparison = pd.DataFrame(rows, columns=COMPARISON_COLUMNS)

    rho_star = error_analysis.optimal_rho(smin, smax)
    sweep = pd.DataFrame(
        {
            "rho": config.compare.rho_values,
            "complexity_poly": [
                error_analysis.iteration_complexity(GridKind.POLYNOMIAL, data.m2_sq, data.d, r, smin, smax)
                for r in config.compare.rho_values
            ],
        }
    )
    sweep["rho_star"] = rho_star
    sweep["is_min"] = sweep["complexity_poly"] == sweep["complexity_poly"].min()
    return comparison, sweep


def run_compare(config: ExperimentConfig) -> tuple[pd.DataFrame, pd.DataFrame, dict[str, Path]]:
    comparison, sweep = comparison_rows(config)
    paths = {
        "comparison": files.write_csv(comparison, "compare_schedules.csv", config),
        "rho_sweep": files.write_csv(sweep, "rho_sweep.csv", config),
        "meta": files.write_meta_json(config=config, command="compare-schedules"),
    }
    return comparison, sweep, paths


def probe_frame(config: ExperimentConfig, checkpoint: Optional[Path] = None) -> pd.DataFrame:
    """Residual norm over noise levels for one training sample, at init or from a checkpoint."""
    net: ScoreNet
    if checkpoint is not None:
        net = load_checkpoint(checkpoint)
    else:
        net = init_net(config.data.d, config.net.width, config.net.depth, config.seed)
    if net.d != config.data.d:
        raise ValueError(f"checkpoint has d={net.d}, config has data.d={config.data.d}")
    rng = np.random.default_rng(batch_seed(config))
    x = config.data.data_source().draw(config.probe.sample_index + 1, rng)[config.probe.sample_index]
    xi = rng.standard_normal(config.data.d)
    levels = np.geomspace(config.probe.sigma_min, config.probe.sigma_max, config.probe.points)
    rows = bell_shape_probe(net, x, xi, levels)
    return pd.DataFrame(rows, columns=["sigma_bar", "residual_norm"])


def run_probe(config: ExperimentConfig, checkpoint: Optional[Path] = None) -> tuple[pd.DataFrame, dict[str, Path]]:
    frame = probe_frame(config, checkpoint)
    paths = {
        "probe": files.write_csv(frame, "bell_probe.csv", config),
        "meta": files.write_meta_json(config=config, command="probe-bell"),
    }
    return frame, paths


def run_report(
    config: ExperimentConfig, checkpoint: Optional[Path] = None
) -> tuple[ErrorReport, str, dict[str, Path]]:
    schedule = config.schedule.variance_schedule()
    grid = config.schedule.time_grid()
    score = _score_source(config, schedule, checkpoint) if checkpoint is not None else None
    report = error_analysis.gaussian_error_report(
        config.data.gaussian_data(),
        grid,
        schedule,
        rho=config.schedule.rho if config.schedule.grid is GridKind.POLYNOMIAL else None,
        eps_train=config.oracle.eps_train,
        score=score,
        mc_samples=config.oracle.mc_samples,
        seed=config.seed,
        threads=config.threads,
        corollary=config.oracle.corollary,
    )
    text = error_analysis.render_report(report)
    paths = {
        "report_text": files.write_text(text + "\n", "report.txt", config),
        "report_csv": files.write_csv(error_analysis.report_frame(report), "report.csv", config),
        "meta": files.write_meta_json(config=config, command="report"),
    }
    return report, text, paths


__all__ = [
    "SampleOutcome",
    "TrainOutcome",
    "build_weighting",
    "comparison_rows",
    "oracle_rows",
    "probe_frame",
    "run_compare",
    "run_oracle",
    "run_probe",
    "run_report",
    "run_sample",
    "run_train",
]
