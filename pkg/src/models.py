from __future__ import annotations

from typing import Dict, Optional

from pydantic import BaseModel, ConfigDict, Field


class _Report(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)


class EDiscTerms(_Report):
    """The three parts of the discretization error."""

    term1: float = Field(ge=0.0)
    term2: float = Field(ge=0.0)
    term3: float = Field(ge=0.0)
    quadrature_checked: bool = False

    @property
    def total(self) -> float:
        return self.term1 + self.term2 + self.term3


class ScoreFactorTable(_Report):
    N: int = Field(ge=1)
    rho: float = Field(ge=1.0)
    sigma_min: float = Field(gt=0.0)
    sigma_max: float = Field(gt=0.0)
    prefactor: float = Field(gt=0.0, description="1 / beta_EDM(sigma_max)")
    poly_bracket: float = Field(ge=0.0)
    exp_bracket: float = Field(ge=0.0)
    poly_factor: float = Field(ge=0.0)
    exp_factor: float = Field(ge=0.0)
    poly_brute_force: float = Field(ge=0.0)
    exp_brute_force: float = Field(ge=0.0)
    poly_argmax: int = Field(ge=1)
    exp_argmax: int = Field(ge=1)


class CorollaryTerms(_Report):
    """Term structure of the full error bound under the EDM design with exponent ``a``."""

    a: float = Field(gt=0.0)
    init: float = Field(ge=0.0)
    disc: float = Field(ge=0.0)
    score_sampling: float = Field(ge=0.0)
    training_prefactor: float = Field(ge=0.0)
    training_symbolic: str = "(c_1 + (1 - c_2 h m d^((a0-1)/2) / (n^3 N^2))^K) / N"

    @property
    def computable_total(self) -> float:
        return self.init + self.disc + self.score_sampling


def _default_symbolic() -> Dict[str, str]:
    return {"eps_n": "ε_n", "eps_est": "ε_est", "eps_approx": "ε_approx"}


class ErrorReport(_Report):
    e_init: float = Field(ge=0.0)
    e_init_sharp: float = Field(ge=0.0)
    e_disc: float = Field(ge=0.0)
    e_disc_terms: EDiscTerms
    e_score: Optional[float] = Field(default=None, ge=0.0)
    e_score_stderr: Optional[float] = Field(default=None, ge=0.0)
    kl_exact: Optional[float] = Field(default=None, ge=0.0)
    max_score_factor: float = Field(ge=0.0)
    eps_train: float = Field(ge=0.0)
    bound: float = Field(ge=0.0)
    kl_to_bound: Optional[float] = Field(default=None, ge=0.0)
    complexity_poly: float = Field(ge=0.0)
    complexity_exp: float = Field(ge=0.0)
    rho_star: float
    symbolic: Dict[str, str] = Field(default_factory=_default_symbolic)
    corollary: Optional[CorollaryTerms] = None


class OracleRow(_Report):
    N: int = Field(ge=0)
    schedule: str
    rho: Optional[float] = None
    sigma_min: float
    sigma_max: float
    E_sigma: float  # noqa: N815
    exact_kl: float = Field(ge=0.0)
    kl_crosscheck: float = Field(ge=0.0)
    E_I: float = Field(ge=0.0)  # noqa: N815
    E_D: float = Field(ge=0.0)  # noqa: N815


class ComparisonRow(_Report):
    N: int = Field(ge=1)
    exact_kl_poly: float = Field(ge=0.0)
    exact_kl_exp: float = Field(ge=0.0)
    score_factor_poly: float = Field(ge=0.0)
    score_factor_exp: float = Field(ge=0.0)
    complexity_poly: float = Field(ge=0.0)
    complexity_exp: float = Field(ge=0.0)
    sampling_dominant_winner: Optional[str] = None
    score_dominant_winner: Optional[str] = None


__all__ = [
    "ComparisonRow",
    "CorollaryTerms",
    "EDiscTerms",
    "ErrorReport",
    "OracleRow",
    "ScoreFactorTable",
]
