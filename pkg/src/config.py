from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from .gaussian_oracle import GaussianData
from .schedules import (
    FIRST_CLASS_PAIRINGS,
    GridKind,
    TimeGrid,
    VarianceKind,
    VarianceSchedule,
    build_time_grid,
)
from .training import DataSource, FileSource, GaussianMixtureSource, GaussianSource


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScheduleConfig(_Block):
    """Variance schedule and time grid shared by training and sampling."""

    variance: VarianceKind = VarianceKind.EDM
    grid: GridKind = GridKind.POLYNOMIAL
    rho: Optional[float] = Field(default=7.0, ge=1.0)
    sigma_min: float = Field(default=0.002, gt=0.0)
    sigma_max: float = Field(default=80.0, gt=0.0)
    steps: int = Field(default=10, ge=1)
    experimental: bool = False

    @model_validator(mode="after")
    def _check_schedule(self) -> ScheduleConfig:
        if not self.sigma_min < self.sigma_max:
            raise ValueError("schedule.sigma_min must be smaller than schedule.sigma_max")
        if (self.variance, self.grid) not in FIRST_CLASS_PAIRINGS and not self.experimental:
            raise ValueError(
                f"schedule pairing ({self.variance.value}, {self.grid.value}) needs SCHEDULE__EXPERIMENTAL=true"
            )
        if self.grid is GridKind.POLYNOMIAL and self.rho is None:
            raise ValueError("polynomial grid needs schedule.rho")
        return self

    def variance_schedule(self) -> VarianceSchedule:
        return VarianceSchedule(kind=self.variance, sigma_bar_min=self.sigma_min, sigma_bar_max=self.sigma_max)

    def time_grid(self, steps: Optional[int] = None) -> TimeGrid:
        return build_time_grid(
            self.variance_schedule(),
            self.grid,
            steps if steps is not None else self.steps,
            self.rho if self.grid is GridKind.POLYNOMIAL else None,
            experimental=self.experimental,
        )


class DataConfig(_Block):
    source: Literal["gaussian", "mixture", "file"] = "gaussian"
    d: int = Field(default=2, ge=1)
    n: int = Field(default=8, ge=1)
    mean: List[float] = Field(default_factory=list)
    sigma: float = Field(default=1.0, gt=0.0)
    separation: float = Field(default=1.0, ge=0.0)
    path: Optional[Path] = None

    @model_validator(mode="after")
    def _check_source(self) -> DataConfig:
        if self.mean and len(self.mean) != self.d:
            raise ValueError(f"data.mean has {len(self.mean)} entries but data.d = {self.d}")
        if self.source == "file" and self.path is None:
            raise ValueError("data.source=file needs data.path")
        return self

    def data_source(self) -> DataSource:
        if self.source == "gaussian":
            return GaussianSource(d=self.d, mean=tuple(self.mean), sigma=self.sigma)
        if self.source == "mixture":
            return GaussianMixtureSource(d=self.d, separation=self.separation, sigma=self.sigma)
        assert self.path is not None
        return FileSource(path=self.path, d=self.d)

    def gaussian_data(self) -> GaussianData:
        """Closed-form oracle for the configured data; only the Gaussian source has one."""
        if self.source != "gaussian":
            raise ValueError(f"data.source={self.source} has no closed-form oracle; use data.source=gaussian")
        mean = self.mean if self.mean else [0.0] * self.d
        return GaussianData(mean=mean, sigma_sq=self.sigma**2)


class NetConfig(_Block):
    width: int = Field(default=256, ge=1)
    depth: int = Field(default=2, ge=0)


class TrainConfig(_Block):
    lr: Optional[float] = Field(default=None, gt=0.0)
    lr_constant: float = Field(default=0.1, gt=0.0)
    max_steps: int = Field(default=2000, ge=1)
    eps_train: float = Field(default=1e-3, gt=0.0)
    weighting: Literal["edm", "uniform"] = "edm"
    max_halvings: int = Field(default=40, ge=0)
    abort_on_increase_after: Optional[int] = Field(default=None, ge=0)


class SampleConfig(_Block):
    trajectories: int = Field(default=10_000, ge=0)
    chunk_size: int = Field(default=4096, ge=1)
    steps: Optional[int] = Field(default=None, ge=1)
    format: Literal["csv", "bin"] = "csv"


class OracleConfig(_Block):
    n_values: List[int] = Field(default_factory=lambda: [25, 50, 100, 200])
    eps_train: float = Field(default=0.0, ge=0.0)
    mc_samples: int = Field(default=1000, ge=1)
    corollary: bool = False


class CompareConfig(_Block):
    n_values: List[int] = Field(default_factory=lambda: [1, 10, 50, 100, 200])
    rho_values: List[float] = Field(default_factory=lambda: [float(r) for r in range(2, 13)])


class ProbeConfig(_Block):
    sigma_min: float = Field(default=1e-4, gt=0.0)
    sigma_max: float = Field(default=80.0, gt=0.0)
    points: int = Field(default=50, ge=2)
    sample_index: int = Field(default=0, ge=0)


class ExperimentConfig(BaseSettings):
    """Experiment configuration read from a flat ``KEY=value`` file (``__`` separates blocks)."""

    model_config = SettingsConfigDict(
        env_file_encoding="utf-8",
        env_nested_delimiter="__",
        case_sensitive=False,
        extra="forbid",
    )

    run_name: str = Field(default="ve-run", min_length=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    threads: int = Field(default=1, ge=1)
    output_dir: Path = Field(default=Path("runs"))
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    net: NetConfig = Field(default_factory=NetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sample: SampleConfig = Field(default_factory=SampleConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    compare: CompareConfig = Field(default_factory=CompareConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        # only explicit overrides and the config file; process environment variables are not read
        return (init_settings, dotenv_settings)

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def run_path(self) -> Path:
        return self.output_dir / self.run_name


def load_config(path: Optional[Path] = None, **overrides: object) -> ExperimentConfig:
    """Read ``path`` (if given) and apply non-None keyword overrides on top."""
    if path is not None and not path.exists():
        raise FileNotFoundError(f"config file missing at {path}")
    values = {key: value for key, value in overrides.items() if value is not None}
    if path is None:
        return ExperimentConfig(**values)
    return ExperimentConfig(_env_file=str(path), **values)


__all__ = [
    "CompareConfig",
    "DataConfig",
    "ExperimentConfig",
    "NetConfig",
    "OracleConfig",
    "ProbeConfig",
    "SampleConfig",
    "ScheduleConfig",
    "TrainConfig",
    "load_config",
]
