"""Error decomposition of the terminal KL and schedule-design quantities.

Order constants that the bounds suppress are set to 1. Index convention: the
backward step j covers forward times ``[t_{N-j-1}, t_{N-j}]`` and
``s_k = sigma_bar^2(t_{N-k})``.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
import math
from typing import Literal, NamedTuple, Optional

import numpy as np
from numpy.typing import NDArray
import pandas as pd
import structlog

from .gaussian_oracle import GaussianData, analytic_score, exact_kl_report
from .models import CorollaryTerms, EDiscTerms, ErrorReport, ScoreFactorTable
from .parallel import ordered_map
from .quadrature import QuadratureError, adaptive_simpson, kahan_sum
from .sampler import ScoreFn
from .schedules import (
    P_MEAN,
    P_STD,
    SIGMA_DATA,
    GridKind,
    TimeGrid,
    VarianceKind,
    VarianceSchedule,
    backward_variances,
    build_time_grid,
    diffusion_coeff_sq,
    edm_total_weighting,
    edm_weighting,
)


logger = structlog.get_logger(__name__)

FloatArray = NDArray[np.float64]

# negative log-curvature of the variance sequence below this is treated as rounding
CURVATURE_ROUNDING = 1e-12


class UnsupportedScoreError(NotImplementedError):
    """The score-estimation error needs the true score, available only for Gaussian data."""


class MissingComponentError(ValueError):
    pass


class EScore(NamedTuple):
    estimate: float
    stderr: float


class DominanceFit(NamedTuple):
    constant: float
    spread: float
    ratios: FloatArray


# --- E_I ----------------------------------------------------------------------


def compute_e_init(m2_sq: float, sigma_bar_T: float) -> float:  # noqa: N803
    """``m2^2 / sigma_bar_T^2``; the sharper constant is half of this."""
    if m2_sq < 0.0 or sigma_bar_T <= 0.0:
        raise ValueError("m2_sq must be non-negative and sigma_bar_T positive")
    return m2_sq / sigma_bar_T**2


# --- E_D ----------------------------------------------------------------------


def _diffusion_ratio_integral(schedule: VarianceSchedule, a: float, b: float) -> float:
    """Closed form of ``int_a^b sigma_s^4 / sigma_bar_s^4 ds``."""
    base = (b - a) / (a * b)
    if schedule.kind is VarianceKind.EDM:
        return base
    return 0.25 * base


def _diffusion_ratio_integrand(schedule: VarianceSchedule) -> Callable[[float], float]:
    # integrated in u = ln s, where the integrand is smooth over many decades
    def integrand(u: float) -> float:
        s = math.exp(u)
        return float(diffusion_coeff_sq(schedule, s)) ** 2 / float(schedule.sigma_bar_sq(s)) ** 2 * s

    return integrand


def _check_close(closed: float, numeric: float, rtol: float, what: str) -> None:
    scale = max(abs(closed), abs(numeric))
    if scale > 0.0 and abs(closed - numeric) > rtol * scale:
        raise QuadratureError(f"{what}: closed form {closed!r} vs quadrature {numeric!r}")


def compute_e_disc(
    grid: TimeGrid,
    schedule: VarianceSchedule,
    m2_sq: float,
    d: int,
    *,
    cross_check: bool = True,
    rtol: float = 1e-9,
) -> EDiscTerms:
    """Discretization error terms.

    ``term1 = d sum_j gamma_j int sigma^4 / sigma_bar^4``,
    ``term2 = m2^2 int sigma^2 / sigma_bar_T^4`` over the first backward step and
    ``term3 = (m2^2 + d) sum_{j=1}^{N-1} (1 - e^{-s_j}) (s_j^2 - s_{j+1} s_{j-1}) / (s_{j-1} s_j^2)``.

    With ``cross_check`` every integral is recomputed by adaptive Simpson and
    compared to the closed form.

    Raises:
        QuadratureError: on quadrature failure or a closed-form mismatch.
    """
    times = grid.times
    N = grid.N  # noqa: N806
    lower, upper = times[:-1], times[1:]
    closed = [_diffusion_ratio_integral(schedule, float(a), float(b)) for a, b in zip(lower, upper)]
    steps = upper - lower
    term1 = d * kahan_sum(steps * np.array(closed))

    sigma_T_sq = float(schedule.sigma_bar_sq(grid.T))  # noqa: N806
    drift_integral = 0.5 * (sigma_T_sq - float(schedule.sigma_bar_sq(float(times[N - 1]))))
    term2 = m2_sq * drift_integral / sigma_T_sq**2

    if cross_check:
        integrand = _diffusion_ratio_integrand(schedule)
        for a, b, value in zip(lower, upper, closed):
            numeric = adaptive_simpson(integrand, math.log(a), math.log(b)).value
            _check_close(value, numeric, rtol, f"int sigma^4/sigma_bar^4 on [{a}, {b}]")
        numeric_drift = adaptive_simpson(
            lambda s: float(diffusion_coeff_sq(schedule, s)), float(times[N - 1]), grid.T
        ).value
        _check_close(drift_integral, numeric_drift, rtol, "int sigma^2 over the first step")

    s = backward_variances(grid, schedule)
    log_s = np.log(s)
    terms3 = []
    clamped = []
    for j in range(1, N):
        curvature = -math.expm1(log_s[j + 1] + log_s[j - 1] - 2.0 * log_s[j])
        if curvature < -CURVATURE_ROUNDING:
            clamped.append((j, curvature))
        terms3.append(-math.expm1(-s[j]) * max(curvature, 0.0) / s[j - 1])
    if clamped:
        logger.warning(
            "e_disc_curvature_clamped",
            N=N,
            count=len(clamped),
            first_step=clamped[0][0],
            smallest=min(value for _, value in clamped),
        )
    term3 = (m2_sq + d) * kahan_sum(terms3)

    logger.debug("e_disc_computed", N=N, term1=term1, term2=term2, term3=term3, checked=cross_check)
    return EDiscTerms(term1=term1, term2=term2, term3=term3, quadrature_checked=cross_check)


# --- E_S ----------------------------------------------------------------------


def compute_e_score(
    grid: TimeGrid,
    schedule: VarianceSchedule,
    score: ScoreFn,
    oracle: Optional[GaussianData],
    mc_samples: int,
    seed: int,
    threads: int = 1,
) -> EScore:
    """Monte-Carlo estimate of ``sum_j gamma_j sigma^2 E ||score - grad log p||^2`` at ``T - t_back_j``.

    Samples are drawn exactly from the Gaussian marginal ``N(m, (sigma^2 + s_j) I)``;
    step j uses ``numpy.random.default_rng([seed, j])``.
    """
    if oracle is None:
        raise UnsupportedScoreError("score-estimation error needs the true score of a Gaussian oracle")
    if mc_samples < 1:
        raise ValueError(f"mc_samples must be >= 1, got {mc_samples}")
    N = grid.N  # noqa: N806
    times = grid.times

    def per_step(j: int) -> tuple[float, float, float]:
        t_eval = float(times[N - j])
        gamma = t_eval - float(times[N - j - 1])
        weight = gamma * float(diffusion_coeff_sq(schedule, t_eval))
        rng = np.random.default_rng([seed, j])
        std = math.sqrt(oracle.sigma_sq + float(schedule.sigma_bar_sq(t_eval)))
        y = oracle.mean + std * rng.standard_normal((mc_samples, oracle.d))
        diff = np.asarray(score(t_eval, y)) - analytic_score(oracle, schedule, t_eval, y)
        values = np.einsum("pd,pd->p", diff, diff)
        variance = float(values.var(ddof=1)) if mc_samples > 1 else 0.0
        return weight, float(values.mean()), variance

    results = ordered_map(per_step, list(range(N)), threads=threads)
    estimate = kahan_sum(w * mean for w, mean, _ in results)
    stderr = math.sqrt(sum(w * w * var for w, _, var in results) / mc_samples)
    logger.info("e_score_estimated", N=N, mc_samples=mc_samples, estimate=estimate, stderr=stderr)
    return EScore(estimate=max(estimate, 0.0), stderr=stderr)


# --- schedule design ----------------------------------------------------------


def score_factor_brute_force(
    grid: TimeGrid,
    schedule: VarianceSchedule,
    *,
    p_mean: float = P_MEAN,
    p_std: float = P_STD,
    sigma_data: float = SIGMA_DATA,
) -> tuple[float, int]:
    """``max_j sigma^2_{t_j} / w(t_j)`` under the EDM total weighting, with its (1-based) argmax."""
    weighting = edm_weighting(grid, schedule, p_mean=p_mean, p_std=p_std, sigma_data=sigma_data)
    ratios = diffusion_coeff_sq(schedule, grid.times[1:].copy()) / weighting.w
    index = int(np.argmax(ratios))
    return float(ratios[index]), index + 1


def score_factor_table(
    N: int,  # noqa: N803
    rho: float,
    sigma_min: float,
    sigma_max: float,
    p_mean: float = P_MEAN,
    p_std: float = P_STD,
    sigma_data: float = SIGMA_DATA,
) -> ScoreFactorTable:
    """Closed-form score factors for the polynomial (EDM) and exponential (SONG) designs.

    Both closed forms carry the common prefactor ``1 / beta_EDM(sigma_max)``;
    the brute-force grid maxima are computed from the actual weightings.
    """
    prefactor = 1.0 / edm_total_weighting(sigma_max, p_mean, p_std, sigma_data)
    hi_root = sigma_max ** (1.0 / rho)
    lo_root = sigma_min ** (1.0 / rho)
    poly_bracket = sigma_max - (hi_root - (hi_root - lo_root) / N) ** rho
    exp_bracket = 0.5 * sigma_max * -math.expm1(2.0 * math.log(sigma_min / sigma_max) / N)

    edm = VarianceSchedule(kind=VarianceKind.EDM, sigma_bar_min=sigma_min, sigma_bar_max=sigma_max)
    song = VarianceSchedule(kind=VarianceKind.SONG, sigma_bar_min=sigma_min, sigma_bar_max=sigma_max)
    poly_brute, poly_arg = score_factor_brute_force(
        build_time_grid(edm, GridKind.POLYNOMIAL, N, rho), edm, p_mean=p_mean, p_std=p_std, sigma_data=sigma_data
    )
    exp_brute, exp_arg = score_factor_brute_force(
        build_time_grid(song, GridKind.EXPONENTIAL, N), song, p_mean=p_mean, p_std=p_std, sigma_data=sigma_data
    )
    return ScoreFactorTable(
        N=N,
        rho=rho,
        sigma_min=sigma_min,
        sigma_max=sigma_max,
        prefactor=prefactor,
        poly_bracket=poly_bracket,
        exp_bracket=exp_bracket,
        poly_factor=prefactor * poly_bracket,
        exp_factor=prefactor * exp_bracket,
        poly_brute_force=poly_brute,
        exp_brute_force=exp_brute,
        poly_argmax=poly_arg,
        exp_argmax=exp_arg,
    )


def iteration_complexity(
    kind: GridKind,
    m2_sq: float,
    d: int,
    rho: Optional[float],
    sigma_min: float,
    sigma_max: float,
    variance: Literal["edm", "song"] = "edm",
) -> float:
    """Iteration-complexity prefactor when initialization and discretization dominate.

    Polynomial: ``(m2^2 v d)/d * rho^2 (sigma_max/sigma_min)^(1/rho) sigma_max^2``
    (exponent ``2/rho`` under SONG variance). Exponential:
    ``(m2^2 v d)/d * ln(sigma_max/sigma_min)^2 sigma_max^2``.
    """
    if d < 1 or not 0.0 < sigma_min < sigma_max:
        raise ValueError("need d >= 1 and 0 < sigma_min < sigma_max")
    prefactor = max(m2_sq, d) / d
    ratio = sigma_max / sigma_min
    if GridKind(kind) is GridKind.POLYNOMIAL:
        if rho is None or rho <= 0.0:
            raise ValueError("polynomial complexity needs rho > 0")
        exponent = (2.0 if variance == "song" else 1.0) / rho
        return prefactor * rho**2 * ratio**exponent * sigma_max**2
    return prefactor * math.log(ratio) ** 2 * sigma_max**2


def optimal_rho(sigma_min: float, sigma_max: float) -> float:
    """Minimiser of ``rho^2 r^(1/rho)``: ``rho* = ln(sigma_max / sigma_min) / 2``."""
    return 0.5 * math.log(sigma_max / sigma_min)


def edm_corollary_terms(
    m2_sq: float,
    d: int,
    T: float,  # noqa: N803
    delta: float,
    N: int,  # noqa: N803
    a: float = 7.0,
) -> CorollaryTerms:
    spread = (T / delta) ** (1.0 / a)
    return CorollaryTerms(
        a=a,
        init=m2_sq / T**2,
        disc=d * a**2 * spread / N,
        score_sampling=(m2_sq + d) * (a**2 * spread / N + a**3 * spread**2 / N**2),
        training_prefactor=1.0 / N,
    )


# --- assembly -----------------------------------------------------------------


def full_error_report(
    *,
    e_init: Optional[float] = None,
    e_disc_terms: Optional[EDiscTerms] = None,
    max_score_factor: Optional[float] = None,
    eps_train: Optional[float] = None,
    complexity_poly: Optional[float] = None,
    complexity_exp: Optional[float] = None,
    rho_star: Optional[float] = None,
    e_score: Optional[EScore] = None,
    kl_exact: Optional[float] = None,
    corollary: Optional[CorollaryTerms] = None,
) -> ErrorReport:
    """Bound ``E_I + E_D + score_factor * eps_train`` alongside the exact KL when known."""
    required = {
        "e_init": e_init,
        "e_disc_terms": e_disc_terms,
        "max_score_factor": max_score_factor,
        "eps_train": eps_train,
        "complexity_poly": complexity_poly,
        "complexity_exp": complexity_exp,
        "rho_star": rho_star,
    }
    missing = [name for name, value in required.items() if value is None]
    if missing:
        raise MissingComponentError(f"missing report components: {', '.join(missing)}")
    assert e_init is not None and e_disc_terms is not None and max_score_factor is not None
    assert eps_train is not None and complexity_poly is not None and complexity_exp is not None
    assert rho_star is not None

    e_disc = e_disc_terms.total
    bound = e_init + e_disc + max_score_factor * eps_train
    kl_to_bound = kl_exact / bound if kl_exact is not None and bound > 0.0 else None
    return ErrorReport(
        e_init=e_init,
        e_init_sharp=0.5 * e_init,
        e_disc=e_disc,
        e_disc_terms=e_disc_terms,
        e_score=e_score.estimate if e_score is not None else None,
        e_score_stderr=e_score.stderr if e_score is not None else None,
        kl_exact=kl_exact,
        max_score_factor=max_score_factor,
        eps_train=eps_train,
        bound=bound,
        kl_to_bound=kl_to_bound,
        complexity_poly=complexity_poly,
        complexity_exp=complexity_exp,
        rho_star=rho_star,
        corollary=corollary,
    )


def gaussian_error_report(
    data: GaussianData,
    grid: TimeGrid,
    schedule: VarianceSchedule,
    *,
    rho: Optional[float] = None,
    eps_train: float = 0.0,
    score: Optional[ScoreFn] = None,
    mc_samples: int = 1000,
    seed: int = 0,
    threads: int = 1,
    corollary: bool = False,
) -> ErrorReport:
    """Every report component for Gaussian data on one schedule."""
    smin, smax = schedule.sigma_bar_min, schedule.sigma_bar_max
    complexity_rho = rho if rho is not None else optimal_rho(smin, smax)
    e_score = (
        compute_e_score(grid, schedule, score, data, mc_samples, seed, threads) if score is not None else None
    )
    report = full_error_report(
        e_init=compute_e_init(data.m2_sq, smax),
        e_disc_terms=compute_e_disc(grid, schedule, data.m2_sq, data.d),
        max_score_factor=score_factor_brute_force(grid, schedule)[0],
        eps_train=eps_train,
        complexity_poly=iteration_complexity(
            GridKind.POLYNOMIAL, data.m2_sq, data.d, complexity_rho, smin, smax, variance=schedule.kind.value
        ),
        complexity_exp=iteration_complexity(GridKind.EXPONENTIAL, data.m2_sq, data.d, None, smin, smax),
        rho_star=optimal_rho(smin, smax),
        e_score=e_score,
        kl_exact=exact_kl_report(data, grid, schedule).kl,
        corollary=edm_corollary_terms(data.m2_sq, data.d, grid.T, grid.delta, grid.N) if corollary else None,
    )
    logger.info("error_report_built", N=grid.N, bound=report.bound, kl_exact=report.kl_exact)
    return report


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.6e}"


def render_report(report: ErrorReport) -> str:
    """Human-readable text block following the structure of the combined bound."""
    terms = report.e_disc_terms
    symbolic = " + ".join(report.symbolic.values())
    lines = [
        "KL(p_delta | q_{T-delta}) <~ E_I + E_D + max_j sigma^2/w * (eps_train + " + symbolic + ")",
        "",
        f"  E_I                    {_fmt(report.e_init)}   (sharp constant: {_fmt(report.e_init_sharp)})",
        f"  E_D                    {_fmt(report.e_disc)}",
        f"    diffusion term       {_fmt(terms.term1)}",
        f"    first-step term      {_fmt(terms.term2)}",
        f"    variance-curvature   {_fmt(terms.term3)}",
        f"  max_j sigma^2/w        {_fmt(report.max_score_factor)}",
        f"  eps_train              {_fmt(report.eps_train)}",
        f"  E_S (Monte Carlo)      {_fmt(report.e_score)} +- {_fmt(report.e_score_stderr)}",
        f"  bound                  {_fmt(report.bound)}",
        f"  exact KL               {_fmt(report.kl_exact)}",
        f"  exact KL / bound       {_fmt(report.kl_to_bound)}",
        "",
        f"  complexity (poly)      {_fmt(report.complexity_poly)}",
        f"  complexity (exp)       {_fmt(report.complexity_exp)}",
        f"  rho*                   {report.rho_star:.4f}",
    ]
    if report.corollary is not None:
        c = report.corollary
        lines += [
            "",
            f"EDM design (a = {c.a:g}):",
            f"  m2^2/T^2                                  {_fmt(c.init)}",
            f"  d a^2 (T/delta)^(1/a) / N                 {_fmt(c.disc)}",
            f"  (m2^2 + d)(a^2 (T/delta)^(1/a) / N + ...) {_fmt(c.score_sampling)}",
            f"  training: {c.training_symbolic}",
        ]
    return "\n".join(lines)


def report_frame(report: ErrorReport) -> pd.DataFrame:
    """Long-form ``quantity, value`` table of the numeric report entries."""
    rows = [
        ("e_init", report.e_init),
        ("e_init_sharp", report.e_init_sharp),
        ("e_disc", report.e_disc),
        ("e_disc_term1", report.e_disc_terms.term1),
        ("e_disc_term2", report.e_disc_terms.term2),
        ("e_disc_term3", report.e_disc_terms.term3),
        ("e_score", report.e_score),
        ("e_score_stderr", report.e_score_stderr),
        ("kl_exact", report.kl_exact),
        ("max_score_factor", report.max_score_factor),
        ("eps_train", report.eps_train),
        ("bound", report.bound),
        ("kl_to_bound", report.kl_to_bound),
        ("complexity_poly", report.complexity_poly),
        ("complexity_exp", report.complexity_exp),
        ("rho_star", report.rho_star),
    ]
    if report.corollary is not None:
        rows += [
            ("corollary_init", report.corollary.init),
            ("corollary_disc", report.corollary.disc),
            ("corollary_score_sampling", report.corollary.score_sampling),
            ("corollary_training_prefactor", report.corollary.training_prefactor),
        ]
    return pd.DataFrame(rows, columns=["quantity", "value"])


def fit_dominance_constant(bounds: Sequence[float], kls: Sequence[float]) -> DominanceFit:
    """Largest ``c`` with ``bound >= c * kl`` on every pair, and the max/min spread of the ratios."""
    b = np.asarray(bounds, dtype=np.float64)
    k = np.asarray(kls, dtype=np.float64)
    if b.shape != k.shape or b.size == 0:
        raise ValueError("bounds and kls must be non-empty and of equal length")
    if np.any(k <= 0.0) or np.any(b < 0.0):
        raise ValueError("kls must be positive and bounds non-negative")
    ratios = b / k
    constant = float(ratios.min())
    spread = float(ratios.max() / constant) if constant > 0.0 else math.inf
    return DominanceFit(constant=constant, spread=spread, ratios=ratios)


__all__ = [
    "DominanceFit",
    "EScore",
    "MissingComponentError",
    "UnsupportedScoreError",
    "compute_e_disc",
    "compute_e_init",
    "compute_e_score",
    "edm_corollary_terms",
    "fit_dominance_constant",
    "full_error_report",
    "gaussian_error_report",
    "iteration_complexity",
    "optimal_rho",
    "render_report",
    "report_frame",
    "score_factor_brute_force",
    "score_factor_table",
]
