"""Numerical integration and summation helpers.

Adaptive Simpson quadrature with an interval budget, used to cross-check the
closed-form schedule integrals, and a compensated sum for series whose terms
span many orders of magnitude.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable
from typing import NamedTuple

import structlog


logger = structlog.get_logger(__name__)


class QuadratureError(ArithmeticError):
    """Raised when adaptive quadrature exhausts its interval budget."""


class QuadratureResult(NamedTuple):
    value: float
    error: float
    intervals: int


def _simpson(fa: float, fm: float, fb: float, h: float) -> float:
    return h / 3.0 * (fa + 4.0 * fm + fb)


def adaptive_simpson(
    f: Callable[[float], float],
    a: float,
    b: float,
    *,
    abs_tol: float = 1e-12,
    rel_tol: float = 1e-11,
    max_intervals: int = 10**6,
    max_depth: int = 60,
) -> QuadratureResult:
    """Integrate ``f`` over ``[a, b]`` with adaptive Simpson's rule.

    The acceptance test on a panel is ``|S_left + S_right - S_whole| / 15 <= tol``
    where ``tol`` starts at ``max(abs_tol, rel_tol * |S_whole|)`` and is halved at
    every bisection. Richardson extrapolation is applied to accepted panels.

    Raises:
        QuadratureError: when more than ``max_intervals`` panels would be needed
            or a panel hits ``max_depth`` without meeting its tolerance.
    """
    if a == b:
        return QuadratureResult(0.0, 0.0, 0)
    if a > b:
        value, error, intervals = adaptive_simpson(
            f, b, a, abs_tol=abs_tol, rel_tol=rel_tol, max_intervals=max_intervals, max_depth=max_depth
        )
        return QuadratureResult(-value, error, intervals)

    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = _simpson(fa, fm, fb, 0.5 * (b - a))
    tol = max(abs_tol, rel_tol * abs(whole))

    # explicit stack instead of recursion: (a, b, fa, fm, fb, whole, tol, depth)
    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    total = 0.0
    compensation = 0.0
    error = 0.0
    accepted = 0
    while stack:
        lo, hi, flo, fmid, fhi, s_whole, panel_tol, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        h = 0.5 * (hi - lo)
        lm = 0.5 * (lo + mid)
        rm = 0.5 * (mid + hi)
        flm = f(lm)
        frm = f(rm)
        s_left = _simpson(flo, flm, fmid, 0.5 * h)
        s_right = _simpson(fmid, frm, fhi, 0.5 * h)
        estimate = (s_left + s_right - s_whole) / 15.0
        if abs(estimate) <= panel_tol:
            contribution = s_left + s_right + estimate
            # Neumaier summation of accepted panels
            t = total + contribution
            if abs(total) >= abs(contribution):
                compensation += (total - t) + contribution
            else:
                compensation += (contribution - t) + total
            total = t
            error += abs(estimate)
            accepted += 1
            continue
        if depth >= max_depth:
            raise QuadratureError(f"panel [{lo!r}, {hi!r}] did not converge within depth {max_depth}")
        if accepted + len(stack) + 2 > max_intervals:
            raise QuadratureError(f"interval budget of {max_intervals} exhausted on [{a!r}, {b!r}]")
        stack.append((mid, hi, fmid, frm, fhi, s_right, 0.5 * panel_tol, depth + 1))
        stack.append((lo, mid, flo, flm, fmid, s_left, 0.5 * panel_tol, depth + 1))

    logger.debug("quadrature_done", a=a, b=b, intervals=accepted, error=error)
    return QuadratureResult(total + compensation, error, accepted)


def kahan_sum(values: Iterable[float]) -> float:
    """Compensated sum, accumulating terms in ascending order of magnitude."""
    ordered = sorted((float(v) for v in values), key=abs)
    total = 0.0
    compensation = 0.0
    for value in ordered:
        y = value - compensation
        t = total + y
        compensation = (t - total) - y
        total = t
    return total


def compensated_cumsum(values: Iterable[float]) -> list[float]:
    """Running Neumaier sum; entry ``k`` is the compensated sum of the first ``k + 1`` values."""
    prefix: list[float] = []
    total = 0.0
    compensation = 0.0
    for value in values:
        value = float(value)
        t = total + value
        if abs(total) >= abs(value):
            compensation += (total - t) + value
        else:
            compensation += (value - t) + total
        total = t
        prefix.append(total + compensation)
    return prefix


__all__ = ["QuadratureError", "QuadratureResult", "adaptive_simpson", "compensated_cumsum", "kahan_sum"]
