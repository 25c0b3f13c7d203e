import math

import numpy as np
import pytest
from scipy import stats

from src.gaussian_oracle import (
    GaussianData,
    OracleError,
    analytic_score,
    exact_kl,
    exact_kl_report,
    gaussian_kl,
    iterate_law,
    iterate_law_for_sigmas,
)
from src.quadrature import adaptive_simpson
from src.schedules import GridKind, VarianceKind, VarianceSchedule, backward_variances, build_time_grid


EDM = VarianceSchedule(kind=VarianceKind.EDM, sigma_bar_min=0.002, sigma_bar_max=80.0)
SONG = VarianceSchedule(kind=VarianceKind.SONG, sigma_bar_min=0.002, sigma_bar_max=80.0)


def test_analytic_score_example() -> None:
    data = GaussianData(mean=[0.0], sigma_sq=1.0)
    assert analytic_score(data, EDM, 1.0, [2.0])[0] == pytest.approx(-1.0)


def test_analytic_score_matches_log_density_gradient() -> None:
    rng = np.random.default_rng(0)
    data = GaussianData(mean=rng.standard_normal(3), sigma_sq=0.7)
    t = 1.3
    x = rng.standard_normal(3)
    variance = data.sigma_sq + t**2

    def log_density(point: np.ndarray) -> float:
        return float(stats.multivariate_normal(mean=data.mean, cov=variance * np.eye(3)).logpdf(point))

    numeric = np.empty(3)
    for k in range(3):
        h = 1e-5 * max(1.0, abs(x[k]))
        offset = np.zeros(3)
        offset[k] = h
        numeric[k] = (log_density(x + offset) - log_density(x - offset)) / (2.0 * h)
    np.testing.assert_allclose(analytic_score(data, EDM, t, x), numeric, rtol=1e-7, atol=1e-9)


def test_gaussian_data_validation() -> None:
    assert GaussianData(mean=[1.0, 0.0], sigma_sq=1.0).m2_sq == pytest.approx(3.0)
    with pytest.raises(OracleError):
        GaussianData(mean=[1.0], sigma_sq=0.0)
    with pytest.raises(OracleError):
        GaussianData(mean=[], sigma_sq=1.0)


def test_gaussian_kl_example() -> None:
    assert gaussian_kl([0.0], 1.0, [1.0], 1.0, 1) == pytest.approx(0.5)
    assert gaussian_kl([0.3, 0.3], 2.0, [0.3, 0.3], 2.0, 2) == 0.0


def test_gaussian_kl_matches_quadrature() -> None:
    mean_a, var_a, mean_b, var_b = 0.4, 0.8, -0.3, 1.7
    p = stats.norm(mean_a, math.sqrt(var_a))
    q = stats.norm(mean_b, math.sqrt(var_b))
    span = 14.0 * math.sqrt(var_a)
    numeric = adaptive_simpson(
        lambda x: float(p.pdf(x) * (p.logpdf(x) - q.logpdf(x))), mean_a - span, mean_a + span
    ).value
    assert gaussian_kl([mean_a], var_a, [mean_b], var_b, 1) == pytest.approx(numeric, rel=1e-6)


def test_iterate_law_closed_form_matches_recursion() -> None:
    schedule = VarianceSchedule(kind=VarianceKind.SONG, sigma_bar_min=0.1, sigma_bar_max=2.0)
    grid = build_time_grid(schedule, GridKind.EXPONENTIAL, 4)
    data = GaussianData(mean=[0.0], sigma_sq=0.25)
    s = backward_variances(grid, schedule)
    cov = s[0]
    for j in range(4):
        contraction = (0.25 + s[j + 1]) / (0.25 + s[j])
        cov = contraction**2 * cov + (s[j] - s[j + 1])
    law = iterate_law(data, grid, schedule)
    assert law.N == 4
    assert law.cov_scalars[0] == pytest.approx(s[0], rel=1e-15)
    assert law.cov_scalars[-1] == pytest.approx(cov, rel=1e-13)


def test_iterate_law_without_steps_is_initialization() -> None:
    data = GaussianData(mean=[2.0, 1.0], sigma_sq=1.0)
    law = iterate_law_for_sigmas(data, [6400.0])
    assert law.N == 0
    np.testing.assert_array_equal(law.means[0], [0.0, 0.0])
    assert law.cov_scalars[0] == pytest.approx(6400.0, rel=1e-15)


def test_iterate_law_rejects_increasing_variances() -> None:
    data = GaussianData(mean=[0.0], sigma_sq=1.0)
    with pytest.raises(OracleError):
        iterate_law_for_sigmas(data, [1.0, 2.0])


def test_exact_kl_equals_direct_gaussian_kl_on_random_configurations() -> None:
    rng = np.random.default_rng(12345)
    for _ in range(100):
        d = int(rng.choice([1, 2, 4]))
        sigma = float(rng.uniform(0.2, 2.0))
        steps = int(rng.integers(2, 201))
        data = GaussianData(mean=rng.standard_normal(d), sigma_sq=sigma**2)
        if rng.random() < 0.5:
            schedule, grid = EDM, build_time_grid(EDM, GridKind.POLYNOMIAL, steps, 7.0)
        else:
            schedule, grid = SONG, build_time_grid(SONG, GridKind.EXPONENTIAL, steps)
        report = exact_kl_report(data, grid, schedule)
        assert report.kl >= 0.0
        assert report.kl == pytest.approx(report.crosscheck, rel=1e-10)


@pytest.mark.parametrize("steps", [50, 100, 200])
def test_exponential_grid_beats_polynomial_grid(steps: int) -> None:
    data = GaussianData(mean=[0.1, -0.1], sigma_sq=0.01)
    poly = exact_kl(data, build_time_grid(EDM, GridKind.POLYNOMIAL, steps, 7.0), EDM)
    exp = exact_kl(data, build_time_grid(SONG, GridKind.EXPONENTIAL, steps), SONG)
    assert exp <= poly


def test_exact_kl_shrinks_with_more_steps() -> None:
    data = GaussianData(mean=[1.0, 1.0], sigma_sq=1.0)
    coarse = exact_kl(data, build_time_grid(SONG, GridKind.EXPONENTIAL, 25), SONG)
    fine = exact_kl(data, build_time_grid(SONG, GridKind.EXPONENTIAL, 200), SONG)
    assert 0.0 < fine < coarse


@pytest.mark.parametrize(
    "schedule, kind, rho",
    [(EDM, GridKind.POLYNOMIAL, 7.0), (SONG, GridKind.EXPONENTIAL, None)],
)
def test_exact_kl_strictly_decreases_along_step_doublings(
    schedule: VarianceSchedule, kind: GridKind, rho: float
) -> None:
    data = GaussianData(mean=[1.0, 1.0], sigma_sq=1.0)
    kls = [exact_kl(data, build_time_grid(schedule, kind, steps, rho), schedule) for steps in (25, 50, 100, 200)]
    assert all(finer < coarser for coarser, finer in zip(kls, kls[1:]))
    assert kls[-1] > 0.0
