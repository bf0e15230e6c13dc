"""Regularized incomplete beta function and its inverse.

``beta_cdf`` evaluates I_x(a, b) with the modified Lentz algorithm on the
standard continued fraction, using the reflection I_x(a, b) = 1 - I_{1-x}(b, a)
whenever x > (a + 1) / (a + b + 2) so that the fraction converges quickly.
``beta_inv_cdf`` inverts it with safeguarded Newton iteration: every step is
checked against a maintained bracket and replaced by bisection when it would
leave it, so convergence is guaranteed for the strictly monotone CDF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

# Continued fraction: terms needed grow like sqrt(max(a, b)).
CF_MAX_ITER = 10_000
CF_EPS = 1e-16
_TINY = 1e-300

# Inversion.
INV_MAX_ITER = 200
INV_TOL = 1e-12


class BetaDomainError(ValueError):
    """Shape parameters or arguments outside the function's domain."""


class BetaConvergenceError(ArithmeticError):
    """Iteration cap reached without meeting the tolerance."""

    def __init__(self, message: str, **diagnostics):
        super().__init__(f"{message} ({', '.join(f'{k}={v!r}' for k, v in diagnostics.items())})")
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class BetaParams:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0) or math.isinf(self.a) or math.isinf(self.b):
            raise BetaDomainError(f"shape parameters must be finite and positive, got a={self.a}, b={self.b}")


def _params(p: BetaParams | tuple[float, float]) -> BetaParams:
    return p if isinstance(p, BetaParams) else BetaParams(*p)


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_STIRLING = (1.0 / 12, -1.0 / 360, 1.0 / 1260, -1.0 / 1680, 1.0 / 1188, -691.0 / 360360)


def _stirling_correction(z: float) -> float:
    """lgamma(z) - ((z - 1/2) log z - z + log(2 pi) / 2)."""
    if z < 10.0:
        return math.lgamma(z) - ((z - 0.5) * math.log(z) - z + _HALF_LOG_2PI)
    r = 1.0 / (z * z)
    acc = 0.0
    for c in reversed(_STIRLING):
        acc = acc * r + c
    return acc / z


def _log_beta(a: float, b: float) -> float:
    small, big = min(a, b), max(a, b)
    if big < 10.0:
        return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    n = small + big
    corr = _stirling_correction(big) - _stirling_correction(n)
    if small < 10.0:
        # lgamma(big) - lgamma(n) without cancelling two large values
        return (
            math.lgamma(small) - (big - 0.5) * math.log1p(small / big)
            - small * math.log(n) + small + corr
        )
    return (
        _HALF_LOG_2PI + (small - 0.5) * math.log(small / n) + (big - 0.5) * math.log(big / n)
        - 0.5 * math.log(n) + _stirling_correction(small) + corr
    )


def _log_front(a: float, b: float, x: float) -> float:
    # log of x^a (1-x)^b / B(a, b)
    if a < 10.0 or b < 10.0:
        return a * math.log(x) + b * math.log1p(-x) - _log_beta(a, b)
    # Expand around the mean so that no large terms cancel.
    n = a + b
    x0 = a / n
    d = x - x0
    corr = _stirling_correction(n) - _stirling_correction(a) - _stirling_correction(b)
    return (
        0.5 * math.log(a * b / n) - _HALF_LOG_2PI + corr
        + a * _log_ratio(x, x0, d) + b * _log_ratio(1.0 - x, 1.0 - x0, -d)
    )


def _log_ratio(y: float, y0: float, diff: float) -> float:
    # log(y / y0) with diff = y - y0; log1p only pays off near 1
    t = diff / y0
    return math.log1p(t) if abs(t) < 0.5 else math.log(y / y0)


def _contfrac(a: float, b: float, x: float) -> float:
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < CF_EPS:
            return h
    raise BetaConvergenceError("continued fraction did not converge", a=a, b=b, x=x, iterations=CF_MAX_ITER)


def beta_cdf(p: BetaParams | tuple[float, float], x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    p = _params(p)
    if not 0.0 <= x <= 1.0:
        raise BetaDomainError(f"x must lie in [0, 1], got {x}")
    a, b = p.a, p.b
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(_log_front(a, b, x)) * _contfrac(a, b, x) / a
    # reflection: evaluate the complement, where the fraction converges fast
    return 1.0 - math.exp(_log_front(b, a, 1.0 - x)) * _contfrac(b, a, 1.0 - x) / b


def beta_pdf(p: BetaParams | tuple[float, float], x: float) -> float:
    p = _params(p)
    if not 0.0 < x < 1.0:
        if x == 0.0:
            return math.inf if p.a < 1 else (p.b if p.a == 1 else 0.0)
        if x == 1.0:
            return math.inf if p.b < 1 else (p.a if p.b == 1 else 0.0)
        return 0.0
    return math.exp(_log_front(p.a, p.b, x)) / (x * (1.0 - x))


def _initial_guess(a: float, b: float, delta: float) -> float:
    # Normal approximation to the quantile; the bracket absorbs any error.
    mean = a / (a + b)
    sd = math.sqrt(a * b / ((a + b) ** 2 * (a + b + 1.0)))
    # Acklam-free rough probit: enough for a starting point
    t = math.sqrt(-2.0 * math.log(min(delta, 1.0 - delta)))
    z = t - (2.30753 + 0.27061 * t) / (1.0 + t * (0.99229 + 0.04481 * t))
    if delta < 0.5:
        z = -z
    x = mean + z * sd
    return min(max(x, 1e-12), 1.0 - 1e-12)


def beta_inv_cdf(p: BetaParams | tuple[float, float], delta: float) -> float:
    """Quantile of Beta(a, b) at level ``delta``.

    Returns x with ``|beta_cdf(p, x) - delta| <= INV_TOL`` or, when the CDF is
    resolved to the last floating-point step, the x at which the bracket
    collapsed. Raises BetaConvergenceError after INV_MAX_ITER iterations.
    """
    p = _params(p)
    if not 0.0 < delta < 1.0:
        raise BetaDomainError(f"delta must lie in (0, 1), got {delta}")
    a, b = p.a, p.b
    lo, hi = 0.0, 1.0
    x = _initial_guess(a, b, delta)
    for it in range(INV_MAX_ITER):
        f = beta_cdf(p, x) - delta
        if abs(f) <= INV_TOL:
            return x
        if f < 0.0:
            lo = x
        else:
            hi = x
        if hi - lo <= 4.0 * math.ulp(max(x, 1e-300)):
            return x
        dens = beta_pdf(p, x)
        step_ok = False
        if dens > 0.0 and math.isfinite(dens):
            x_new = x - f / dens
            step_ok = lo < x_new < hi
        if not step_ok:
            x_new = 0.5 * (lo + hi)
        x = x_new
    raise BetaConvergenceError(
        "beta_inv_cdf did not converge",
        a=a, b=b, delta=delta, x=x, bracket=(lo, hi), residual=beta_cdf(p, x) - delta,
        iterations=INV_MAX_ITER,
    )
