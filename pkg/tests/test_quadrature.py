import math

import pytest

from src.quadrature import QuadratureError, adaptive_simpson, compensated_cumsum, kahan_sum


def test_simpson_is_exact_for_cubics() -> None:
    result = adaptive_simpson(lambda x: x**3 - 2.0 * x, 0.0, 2.0)
    assert result.value == pytest.approx(0.0, abs=1e-12)
    assert result.intervals >= 1


def test_integral_in_log_variable() -> None:
    # int_a^b ds / s^2 with s = e^u
    a, b = 0.002, 80.0
    result = adaptive_simpson(lambda u: math.exp(-u), math.log(a), math.log(b))
    assert result.value == pytest.approx((b - a) / (a * b), rel=1e-10)


def test_reversed_limits_flip_sign() -> None:
    forward = adaptive_simpson(math.sin, 0.0, 1.0).value
    backward = adaptive_simpson(math.sin, 1.0, 0.0).value
    assert backward == pytest.approx(-forward)
    assert adaptive_simpson(math.sin, 1.0, 1.0).value == 0.0


def test_interval_budget_exhaustion_raises() -> None:
    with pytest.raises(QuadratureError):
        adaptive_simpson(lambda x: math.sin(1.0 / x), 1e-6, 1.0, max_intervals=8)


def test_kahan_sum_keeps_small_terms() -> None:
    values = [1.0] + [1e-16] * 10_000
    assert sum(values) == 1.0
    assert kahan_sum(values) == pytest.approx(1.0 + 1e-12, rel=1e-15)


def test_compensated_cumsum_prefixes() -> None:
    prefix = compensated_cumsum([0.1] * 10)
    assert len(prefix) == 10
    assert prefix[-1] == pytest.approx(math.fsum([0.1] * 10), rel=1e-16)
    assert compensated_cumsum([]) == []
