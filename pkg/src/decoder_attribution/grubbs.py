"""Student-t distribution functions and the one-sided Grubbs threshold.

Everything here is written from scratch on top of :mod:`math` so the
threshold can be audited end to end: log-gamma (Lanczos), the regularized
incomplete beta function (continued fraction), the t CDF expressed through
it, a bisection quantile, and finally the Grubbs critical bound on a set of
calibration losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import InvalidInputError

# Lanczos approximation, g = 7, n = 9.
_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)

_CF_MAX_ITER = 10_000
_CF_EPS = 1e-16
_CF_TINY = 1e-300


def log_gamma(x: float) -> float:
    """Natural log of the gamma function for ``x > 0``."""
    if not x > 0:
        raise InvalidInputError(f"log_gamma needs x > 0, got {x!r}")
    if x < 0.5:
        # Reflection keeps the series in its accurate region.
        return math.log(math.pi / math.sin(math.pi * x)) - log_gamma(1.0 - x)
    x -= 1.0
    acc = _LANCZOS_COEF[0]
    for i in range(1, len(_LANCZOS_COEF)):
        acc += _LANCZOS_COEF[i] / (x + i)
    t = x + _LANCZOS_G + 0.5
    return 0.5 * math.log(2.0 * math.pi) + (x + 0.5) * math.log(t) - t + math.log(acc)


def log_beta(a: float, b: float) -> float:
    return log_gamma(a) + log_gamma(b) - log_gamma(a + b)


def _check_nu(nu):
    try:
        ok = nu > 0 and math.isfinite(nu)
    except TypeError:
        ok = False
    if not ok:
        raise InvalidInputError(f"degrees of freedom must be a finite positive number, got {nu!r}")


def student_t_pdf(a, nu):
    """Density of the Student-t distribution with ``nu`` degrees of freedom.

    Accepts a scalar or an array for ``a``.
    """
    _check_nu(nu)
    log_norm = log_gamma((nu + 1) / 2) - log_gamma(nu / 2) - 0.5 * math.log(nu * math.pi)
    a = np.asarray(a, dtype=float)
    out = np.exp(log_norm - (nu + 1) / 2 * np.log1p(a * a / nu))
    return float(out) if out.ndim == 0 else out


def _beta_continued_fraction(x, a, b):
    # Modified Lentz evaluation of the incomplete beta continued fraction.
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (x={x}, a={a}, b={b})")


def _betainc(x, xc, a, b):
    """I_x(a, b) given both ``x`` and ``xc = 1 - x`` (avoids cancellation)."""
    if x <= 0.0:
        return 0.0
    if xc <= 0.0:
        return 1.0
    log_front = a * math.log(x) + b * math.log(xc) - log_beta(a, b)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _beta_continued_fraction(x, a, b) / a
    return 1.0 - math.exp(log_front) * _beta_continued_fraction(xc, b, a) / b


def regularized_incomplete_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not (0.0 <= x <= 1.0):
        raise InvalidInputError(f"x must lie in [0, 1], got {x!r}")
    if not (a > 0 and b > 0):
        raise InvalidInputError(f"shape parameters must be positive, got a={a!r}, b={b!r}")
    return _betainc(x, 1.0 - x, a, b)


def _upper_tail(t: float, nu: float) -> float:
    # P(T > |t|) = 1/2 * I_{nu/(t^2+nu)}(nu/2, 1/2)
    t2 = t * t
    return 0.5 * _betainc(nu / (t2 + nu), t2 / (t2 + nu), nu / 2.0, 0.5)


def student_t_cdf(t_prime: float, nu: float) -> float:
    """P(T < t_prime) for a Student-t variable with ``nu`` degrees of freedom."""
    _check_nu(nu)
    if math.isnan(t_prime):
        raise InvalidInputError("t_prime is NaN")
    if math.isinf(t_prime):
        return 1.0 if t_prime > 0 else 0.0
    tail = _upper_tail(t_prime, nu)
    return 1.0 - tail if t_prime >= 0 else tail


def critical_value(alpha_level: float, nu: float) -> float:
    """The t with ``P(T < t) = 1 - alpha_level``, by bracketing and bisection."""
    if not (0.0 < alpha_level < 1.0):
        raise InvalidInputError(f"alpha_level must lie in (0, 1), got {alpha_level!r}")
    _check_nu(nu)
    if alpha_level == 0.5:
        return 0.0
    if alpha_level > 0.5:
        return -critical_value(1.0 - alpha_level, nu)

    # Work on the upper tail directly: P(T > t) = alpha_level, t > 0.
    lo, hi = 0.0, 1.0
    while _upper_tail(hi, nu) > alpha_level:
        lo, hi = hi, hi * 2.0
        if hi > 1e300:
            raise ArithmeticError("could not bracket the critical value")
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _upper_tail(mid, nu) > alpha_level:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class CalibrationSummary:
    """Sample size, mean and spread of belonging losses, plus the test level."""

    n: int
    mu: float
    sigma: float
    alpha: float = 0.05

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 3:
            raise InvalidInputError(f"need at least 3 calibration samples, got n={self.n!r}")
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise InvalidInputError(f"sigma must be finite and >= 0, got {self.sigma!r}")
        if not math.isfinite(self.mu):
            raise InvalidInputError(f"mu must be finite, got {self.mu!r}")
        if not (0.0 < self.alpha < 1.0):
            raise InvalidInputError(f"alpha must lie in (0, 1), got {self.alpha!r}")

    @classmethod
    def from_losses(cls, losses: Iterable[float], alpha: float = 0.05) -> "CalibrationSummary":
        """Mean and sample (N-1) standard deviation of ``losses``."""
        arr = np.asarray(list(losses), dtype=float)
        if arr.ndim != 1 or arr.size < 3:
            raise InvalidInputError(f"need at least 3 calibration losses, got {arr.size}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("calibration losses must be finite")
        mu = float(np.mean(arr))
        sigma = float(np.std(arr, ddof=1))
        return cls(n=int(arr.size), mu=mu, sigma=sigma, alpha=float(alpha))


def grubbs_factor(n: int, alpha: float) -> float:
    """Multiplier on sigma in the one-sided Grubbs bound for ``n`` samples."""
    t = critical_value(alpha / n, n - 2)
    t2 = t * t
    return (n - 1) / math.sqrt(n) * math.sqrt(t2 / (n - 2 + t2))


def grubbs_threshold(summary: CalibrationSummary) -> float:
    """Largest loss not flagged as an outlier: ``mu + G_crit * sigma``."""
    if not isinstance(summary, CalibrationSummary):
        raise InvalidInputError("grubbs_threshold expects a CalibrationSummary")
    return grubbs_factor(summary.n, summary.alpha) * summary.sigma + summary.mu
