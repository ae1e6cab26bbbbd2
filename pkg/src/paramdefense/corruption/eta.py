"""Density and distribution of eta = |a.g| / (eps ||g||) for ``a`` uniform on a sphere in R^k.

    pdf(x) = 2 Gamma(k/2) / (sqrt(pi) Gamma((k-1)/2)) * (1 - x^2)^((k-3)/2)
    cdf(x) = 2 x 2F1(1/2, (3-k)/2; 3/2; x^2) / B((k-1)/2, 1/2)

The hypergeometric series terminates for odd ``k``.  When it does not, or when
its terms cancel too heavily to be trusted, the cdf falls back to adaptive
quadrature of the pdf.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate

from ..errors import RejectedInputError

_SERIES_MAX_TERMS = 10_000
# Allowed ratio of sum|terms| to |sum| before the series is considered unreliable.
_MAX_CANCELLATION = 1e4


def log_beta(a: float, b: float) -> float:
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def hyp2f1_series(a: float, b: float, c: float, z: float, tol: float = 1e-17) -> tuple[float, float]:
    """Partial sums of the Gauss series ``sum (a)_n (b)_n / (c)_n z^n / n!``.

    Returns ``(value, abs_sum)`` where ``abs_sum`` is the sum of term
    magnitudes, a measure of cancellation.  Requires ``|z| < 1`` unless the
    series terminates (``a`` or ``b`` a non-positive integer).

    Raises:
        RejectedInputError: the series neither terminates nor converges.
    """
    terminates = any(x <= 0 and float(x).is_integer() for x in (a, b))
    if abs(z) >= 1 and not terminates:
        raise RejectedInputError(f"series diverges or converges too slowly at z={z}")
    term = 1.0
    total = 1.0
    abs_total = 1.0
    for n in range(_SERIES_MAX_TERMS):
        term *= (a + n) * (b + n) / ((c + n) * (n + 1)) * z
        if term == 0.0:
            return total, abs_total
        total += term
        abs_total += abs(term)
        if abs(term) <= tol * abs(total) and not terminates:
            return total, abs_total
    if terminates:
        return total, abs_total
    raise RejectedInputError("hypergeometric series did not converge")


def _check(x, k):
    if k < 2 or int(k) != k:
        raise RejectedInputError(f"k must be an integer >= 2, got {k}")
    if not 0.0 <= x <= 1.0:
        raise RejectedInputError(f"x must lie in [0, 1], got {x}")


def _log_norm(k: int) -> float:
    return math.log(2.0) + math.lgamma(k / 2.0) - 0.5 * math.log(math.pi) - math.lgamma((k - 1) / 2.0)


def eta_pdf(x: float, k: int) -> float:
    """Density of eta in dimension ``k`` (infinite at ``x=1`` when ``k=2``)."""
    _check(x, k)
    e = (k - 3) / 2.0
    base = 1.0 - x * x
    if e == 0:
        return math.exp(_log_norm(k))
    if base == 0.0:
        return math.inf if e < 0 else 0.0
    return math.exp(_log_norm(k) + e * math.log(base)) if base > 0 else 0.0


def _pdf_smooth_part(k):
    # pdf(t) = const * (1 - t)^e * (1 + t)^e; quad's 'alg' weight absorbs (1 - t)^e.
    const = math.exp(_log_norm(k))
    e = (k - 3) / 2.0
    return const, e, (lambda t: const * (1.0 + t) ** e)


def _cdf_quadrature(x: float, k: int) -> float:
    const, e, smooth = _pdf_smooth_part(k)
    if x <= 0.5:
        val, _ = integrate.quad(lambda t: const * (1.0 - t * t) ** e, 0.0, x, epsabs=1e-14, epsrel=1e-13, limit=200)
        return val
    tail, _ = integrate.quad(smooth, x, 1.0, weight="alg", wvar=(0.0, e), epsabs=1e-14, epsrel=1e-13, limit=200)
    return 1.0 - tail


def eta_cdf(x: float, k: int) -> float:
    """``P(eta <= x)`` in dimension ``k``; exactly 0 at ``x=0`` and 1 at ``x=1``."""
    _check(x, k)
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    b = (3 - k) / 2.0
    z = x * x
    terminates = b <= 0 and b.is_integer()
    if terminates or z <= 0.5:
        value, abs_sum = hyp2f1_series(0.5, b, 1.5, z)
        if abs_sum <= _MAX_CANCELLATION * abs(value):
            cdf = 2.0 * x * value * math.exp(-log_beta((k - 1) / 2.0, 0.5))
            return min(1.0, max(0.0, cdf))
    return min(1.0, max(0.0, _cdf_quadrature(x, k)))


def eta_cdf_array(xs, k: int) -> np.ndarray:
    return np.array([eta_cdf(float(x), k) for x in np.asarray(xs).reshape(-1)])


def pdf_integral(k: int) -> float:
    """Total mass of :func:`eta_pdf` by adaptive quadrature (should be 1)."""
    const, e, smooth = _pdf_smooth_part(k)
    val, _ = integrate.quad(smooth, 0.0, 1.0, weight="alg", wvar=(0.0, e), epsabs=1e-14, epsrel=1e-13, limit=200)
    return val
