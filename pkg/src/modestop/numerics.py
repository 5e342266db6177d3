"""Special functions for the closed-form stopping rules.

Everything here works in log space where magnitudes can blow up. The Beta
function and the regularized incomplete beta are evaluated with
Stirling-difference forms for large arguments so that priors like
Beta(1e6, 1e6) keep full relative precision; a naive
``lgamma(a) + lgamma(b) - lgamma(a + b)`` loses about eight digits there.
"""

from __future__ import annotations

import math

__all__ = [
    "ConvergenceError",
    "log_beta",
    "log_beta_ratio",
    "reg_inc_beta",
    "binom_sf",
]

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# Below this the Stirling correction series is not accurate to double precision.
_STIRLING_MIN = 8.0

# Bernoulli-number coefficients B_2k / (2k (2k - 1)) of the Stirling series.
_STIRLING_COEFFS = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
    -3617.0 / 122400.0,
)

_CF_EPS = 1e-15
_CF_TINY = 1e-300


class ConvergenceError(ArithmeticError):
    """An iterative evaluation failed to converge."""


def _check_positive(**kwargs: float) -> None:
    for name, value in kwargs.items():
        if not value > 0 or math.isinf(value):
            raise ValueError(f"{name} must be a positive finite number, got {value!r}")


def _stirling_delta(z: float) -> float:
    """Remainder of ln Gamma(z) after the Stirling leading terms, z >= 8."""
    inv = 1.0 / z
    inv2 = inv * inv
    total = 0.0
    for coeff in reversed(_STIRLING_COEFFS):
        total = total * inv2 + coeff
    return total * inv


def _log_gamma_ratio(a: float, b: float) -> float:
    """ln Gamma(b) - ln Gamma(a + b) for b >= 8, without cancellation."""
    c = a + b
    return (
        -(b - 0.5) * math.log1p(a / b)
        - a * math.log(c)
        + a
        + _stirling_delta(b)
        - _stirling_delta(c)
    )


def log_beta(a: float, b: float) -> float:
    """Natural log of the Beta function B(a, b).

    Relative error stays near machine precision for arguments up to a few
    million, which is where the calibrated mixture prior lives.

    Raises:
        ValueError: if either argument is not positive.
    """
    _check_positive(a=a, b=b)
    if a > b:
        a, b = b, a
    if b < _STIRLING_MIN:
        return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    if a < _STIRLING_MIN:
        return math.lgamma(a) + _log_gamma_ratio(a, b)
    c = a + b
    # a <= b, so a / c <= 1/2 and log1p keeps ln(b / c) accurate.
    return (
        a * math.log(a / c)
        + b * math.log1p(-a / c)
        + 0.5 * math.log(c / (a * b))
        + _HALF_LOG_2PI
        + _stirling_delta(a)
        + _stirling_delta(b)
        - _stirling_delta(c)
    )


def log_beta_ratio(a: float, b: float, n: int, m: int) -> float:
    """ln[B(a + n, b + m) / B(a, b)] + (n + m) ln 2 for integer shifts n, m >= 0.

    This is the log of the Bernoulli mixture likelihood against p = 1/2 under
    an untruncated Beta(a, b) prior. Each factor is paired so that it is
    close to one and can go through log1p.
    """
    _check_positive(a=a, b=b)
    if n < 0 or m < 0:
        raise ValueError(f"shifts must be non-negative, got n={n}, m={m}")
    terms = []
    c = a + b
    # B(a+n, b) / B(a, b) = prod (a+i) / (c+i)
    for i in range(n):
        terms.append(math.log1p((a - b + i) / (c + i)))
    # B(a+n, b+m) / B(a+n, b) = prod (b+j) / (c+n+j)
    for j in range(m):
        terms.append(math.log1p((b - a - n + j) / (c + n + j)))
    return math.fsum(terms)


def _rlog1(t: float) -> float:
    """t - ln(1 + t), accurate for small |t|."""
    if abs(t) > 0.25:
        return t - math.log1p(t)
    # sum_{k>=2} (-1)^k t^k / k
    total = 0.0
    power = t * t
    k = 2
    while True:
        term = power / k
        total += term if k % 2 == 0 else -term
        if abs(term) <= 1e-17 * abs(total):
            return total
        power *= t
        k += 1


def _log_ibeta_front(x: float, a: float, b: float) -> float:
    """ln[x^a (1-x)^b / B(a, b)]."""
    y = 1.0 - x
    if a < _STIRLING_MIN or b < _STIRLING_MIN:
        return a * math.log(x) + b * math.log1p(-x) - log_beta(a, b)
    c = a + b
    x0 = a / c
    y0 = b / c
    d = (x * b - y * a) / c
    if d / x0 < -0.5 or -d / y0 < -0.5:
        # Far from the mean; the linear parts of the two rlog1 terms cancel.
        main = a * (math.log(x) - math.log(x0)) + b * (math.log(y) - math.log(y0))
    else:
        main = -a * _rlog1(d / x0) - b * _rlog1(-d / y0)
    return (
        main
        + 0.5 * math.log(a * y0)
        - _HALF_LOG_2PI
        - (_stirling_delta(a) + _stirling_delta(b) - _stirling_delta(c))
    )


def _ibeta_cf(x: float, a: float, b: float) -> float:
    """Continued fraction for I_x(a, b) by the modified Lentz method."""
    max_iter = 1000 + int(20.0 * math.sqrt(max(a, b)))
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
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
    raise ConvergenceError(
        f"incomplete beta continued fraction did not converge "
        f"(x={x!r}, a={a!r}, b={b!r}, {max_iter} iterations)"
    )


def reg_inc_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta function I_x(a, b).

    Uses the continued fraction on whichever side of the mean converges,
    switching to 1 - I_{1-x}(b, a) when x > (a + 1) / (a + b + 2).

    Raises:
        ValueError: if x is outside [0, 1] or a, b are not positive.
        ConvergenceError: if the continued fraction does not converge.
    """
    _check_positive(a=a, b=b)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x!r}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    if a == b and x == 0.5:
        return 0.5
    if x > (a + 1.0) / (a + b + 2.0):
        return 1.0 - _reg_inc_beta_lower(1.0 - x, b, a)
    return _reg_inc_beta_lower(x, a, b)


def _reg_inc_beta_lower(x: float, a: float, b: float) -> float:
    front = _log_ibeta_front(x, a, b)
    value = math.exp(front) * _ibeta_cf(x, a, b) / a
    return min(max(value, 0.0), 1.0)


def binom_sf(k: int, n: int, p: float) -> float:
    """P(X >= k) for X ~ Binomial(n, p).

    For p = 1/2 the tail is computed from exact integer binomial sums, so the
    result is the correctly rounded value of a rational with denominator 2**n.

    Raises:
        ValueError: if k > n, k or n negative, or p outside [0, 1].
    """
    if n < 0 or k < 0:
        raise ValueError(f"k and n must be non-negative, got k={k}, n={n}")
    if k > n:
        raise ValueError(f"k must not exceed n, got k={k}, n={n}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p!r}")
    if k == 0:
        return 1.0
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return 1.0
    if p == 0.5 and n <= 4096:
        return sum(math.comb(n, j) for j in range(k, n + 1)) / (1 << n)
    if n > 4096:
        # P(X >= k) = I_p(k, n - k + 1)
        return reg_inc_beta(p, k, n - k + 1)
    log_p = math.log(p)
    log_q = math.log1p(-p)
    log_nfact = math.lgamma(n + 1)
    terms = [
        math.exp(
            log_nfact
            - math.lgamma(j + 1)
            - math.lgamma(n - j + 1)
            + j * log_p
            + (n - j) * log_q
        )
        for j in range(k, n + 1)
    ]
    return min(math.fsum(terms), 1.0)
