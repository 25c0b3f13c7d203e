"""Closed-form ground truth for isotropic Gaussian data ``N(m, sigma^2 I)``.

Under the zero-drift forward process the marginal at time t is
``N(m, (sigma^2 + sigma_bar_t^2) I)``, so the score is known exactly and the
exponential-integrator iterates stay Gaussian. Writing ``s_k`` for the
backward variance ``sigma_bar^2(T - t_back_k)`` and ``Delta_k = s_k - s_{k+1}``::

    m_j     = (s_0 - s_j) / (sigma^2 + s_0) * m
    Sigma_j = (sigma^2 + s_j)^2 [s_0 / (sigma^2 + s_0)^2 + sum_{l<j} Delta_l / (sigma^2 + s_{l+1})^2]
"""

from __future__ import annotations

from dataclasses import dataclass
import math
from typing import NamedTuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
import structlog

from .quadrature import compensated_cumsum, kahan_sum
from .sampler import ScoreFn
from .schedules import TimeGrid, VarianceSchedule, backward_variances


logger = structlog.get_logger(__name__)

FloatArray = NDArray[np.float64]


class OracleError(ArithmeticError):
    """Non-finite or invalid quantity in a closed-form computation."""


class OracleConsistencyError(OracleError):
    """Closed-form iterate law and one-step recursion disagree (indexing bug)."""


@dataclass(frozen=True)
class GaussianData:
    mean: FloatArray
    sigma_sq: float

    def __post_init__(self) -> None:
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        if mean.size < 1 or not np.all(np.isfinite(mean)):
            raise OracleError("mean must be a non-empty finite vector")
        if not (math.isfinite(self.sigma_sq) and self.sigma_sq > 0.0):
            raise OracleError(f"sigma_sq must be finite and positive, got {self.sigma_sq}")
        mean.setflags(write=False)
        object.__setattr__(self, "mean", mean)

    @property
    def d(self) -> int:
        return int(self.mean.size)

    @property
    def mean_norm_sq(self) -> float:
        return float(self.mean @ self.mean)

    @property
    def m2_sq(self) -> float:
        """Second moment ``||m||^2 + d sigma^2``."""
        return self.mean_norm_sq + self.d * self.sigma_sq


@dataclass(frozen=True)
class IterateLaw:
    """Law ``N(means[j], cov_scalars[j] I)`` of the sampler state after j steps."""

    means: FloatArray
    cov_scalars: FloatArray

    @property
    def N(self) -> int:  # noqa: N802
        return int(self.cov_scalars.size - 1)


class ExactKL(NamedTuple):
    kl: float
    e_sigma: float
    crosscheck: float
    law: IterateLaw


def marginal_variance(
    data: GaussianData, schedule: VarianceSchedule, t: Union[float, FloatArray]
) -> Union[float, FloatArray]:
    return data.sigma_sq + schedule.sigma_bar_sq(t)


def analytic_score(data: GaussianData, schedule: VarianceSchedule, t: float, y: ArrayLike) -> FloatArray:
    """``-(y - m) / (sigma^2 + sigma_bar_t^2)``; ``y`` may be a single vector or a stack of rows."""
    y = np.asarray(y, dtype=np.float64)
    return -(y - data.mean) / marginal_variance(data, schedule, t)


def analytic_score_fn(data: GaussianData, schedule: VarianceSchedule) -> ScoreFn:
    def score(t: float, y: FloatArray) -> FloatArray:
        return analytic_score(data, schedule, t, y)

    return score


def _relative_mismatch(a: FloatArray, b: FloatArray) -> float:
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def iterate_law_for_sigmas(
    data: GaussianData,
    variances: ArrayLike,
    *,
    consistency_rtol: float = 1e-12,
) -> IterateLaw:
    """Iterate law from the backward variance sequence ``s_0 > s_1 > ... > s_N``.

    Evaluates the closed forms and, independently, the one-step recursion
    ``m_{j+1} = c_j m_j + Delta_j m / (sigma^2 + s_j)``, ``Sigma_{j+1} = c_j^2 Sigma_j + Delta_j``
    with ``c_j = (sigma^2 + s_{j+1}) / (sigma^2 + s_j)``.

    Raises:
        OracleConsistencyError: when the two disagree beyond ``consistency_rtol``.
    """
    s = np.asarray(variances, dtype=np.float64)
    if s.ndim != 1 or s.size < 1 or not np.all(np.isfinite(s)) or np.any(s <= 0.0):
        raise OracleError("variance sequence must be finite and positive")
    sigma_sq = data.sigma_sq
    s0 = s[0]
    deltas = s[:-1] - s[1:]
    if np.any(deltas < 0.0):
        raise OracleError("variance sequence must be non-increasing along the backward grid")

    shrink = (s0 - s) / (sigma_sq + s0)
    means = shrink[:, np.newaxis] * data.mean[np.newaxis, :]
    increments = deltas / (sigma_sq + s[1:]) ** 2
    prefix = np.array([0.0, *compensated_cumsum(increments)])
    covs = (sigma_sq + s) ** 2 * (s0 / (sigma_sq + s0) ** 2 + prefix)

    rec_means = np.empty_like(means)
    rec_covs = np.empty_like(covs)
    rec_means[0] = 0.0
    rec_covs[0] = s0
    for j in range(s.size - 1):
        contraction = (sigma_sq + s[j + 1]) / (sigma_sq + s[j])
        rec_means[j + 1] = contraction * rec_means[j] + (deltas[j] / (sigma_sq + s[j])) * data.mean
        rec_covs[j + 1] = contraction**2 * rec_covs[j] + deltas[j]

    if not (np.all(np.isfinite(covs)) and np.all(np.isfinite(means))):
        raise OracleError("non-finite iterate law")
    mismatch = max(_relative_mismatch(means, rec_means), float(np.max(np.abs(covs - rec_covs) / covs)))
    if mismatch > consistency_rtol:
        logger.error("iterate_law_mismatch", mismatch=mismatch, N=s.size - 1)
        raise OracleConsistencyError(f"closed form and recursion differ by {mismatch:.3e} (relative)")

    means.setflags(write=False)
    covs.setflags(write=False)
    return IterateLaw(means=means, cov_scalars=covs)


def iterate_law(data: GaussianData, grid: TimeGrid, schedule: VarianceSchedule) -> IterateLaw:
    return iterate_law_for_sigmas(data, backward_variances(grid, schedule))


def _r_minus_one_minus_log(r: float) -> float:
    x = r - 1.0
    if abs(x) < 1e-3:
        # x - log1p(x) = sum_{k>=2} (-1)^k x^k / k
        return sum((-x) ** k / k for k in range(2, 10))
    return x - math.log1p(x)


def gaussian_kl(mean_a: ArrayLike, cov_a: float, mean_b: ArrayLike, cov_b: float, d: int) -> float:
    """``KL(N(mean_a, cov_a I) || N(mean_b, cov_b I))`` in dimension ``d``."""
    if cov_a <= 0.0 or cov_b <= 0.0:
        raise OracleError("covariance scalars must be positive")
    diff = np.asarray(mean_a, dtype=np.float64) - np.asarray(mean_b, dtype=np.float64)
    ratio = cov_a / cov_b
    return 0.5 * d * _r_minus_one_minus_log(ratio) + float(diff @ diff) / (2.0 * cov_b)


def exact_kl_report(data: GaussianData, grid: TimeGrid, schedule: VarianceSchedule) -> ExactKL:
    """Exact ``KL(p_delta || q_{T-delta})`` with ``E_sigma`` and the direct Gaussian-KL cross-check."""
    s = backward_variances(grid, schedule)
    sigma_sq = data.sigma_sq
    s0, s_last = float(s[0]), float(s[-1])
    target_var = sigma_sq + s_last

    deltas = s[:-1] - s[1:]
    terms = [target_var * s0 / (sigma_sq + s0) ** 2]
    terms.extend((target_var * deltas / (sigma_sq + s[1:]) ** 2).tolist())
    e_sigma_inv = kahan_sum(terms)
    if not (math.isfinite(e_sigma_inv) and e_sigma_inv > 0.0):
        raise OracleError(f"E_sigma reciprocal sum is {e_sigma_inv}")
    e_sigma = 1.0 / e_sigma_inv

    mean_term = data.mean_norm_sq * target_var * e_sigma / (2.0 * (sigma_sq + s0) ** 2)
    kl = 0.5 * data.d * _r_minus_one_minus_log(e_sigma) + mean_term

    law = iterate_law_for_sigmas(data, s)
    crosscheck = gaussian_kl(data.mean, target_var, law.means[-1], float(law.cov_scalars[-1]), data.d)
    logger.debug("exact_kl_computed", N=grid.N, e_sigma=e_sigma, kl=kl, crosscheck=crosscheck)
    return ExactKL(kl=kl, e_sigma=e_sigma, crosscheck=crosscheck, law=law)


def exact_kl(data: GaussianData, grid: TimeGrid, schedule: VarianceSchedule) -> float:
    return exact_kl_report(data, grid, schedule).kl


__all__ = [
    "ExactKL",
    "GaussianData",
    "IterateLaw",
    "OracleConsistencyError",
    "OracleError",
    "analytic_score",
    "analytic_score_fn",
    "exact_kl",
    "exact_kl_report",
    "gaussian_kl",
    "iterate_law",
    "iterate_law_for_sigmas",
    "marginal_variance",
]
