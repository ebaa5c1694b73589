"""Special functions behind the likelihoods and F-test p-values."""
from __future__ import annotations

import math

import numpy as np
from scipy import special as _sp

_FPMIN = 1e-300
_BETACF_EPS = 1e-16
_BETACF_MAXITER = 20000

# Bernoulli-number coefficients of the asymptotic digamma / trigamma series
_PSI_COEF = (1 / 12, -1 / 120, 1 / 252, -1 / 240, 1 / 132, -691 / 32760, 1 / 12)
_PSI1_COEF = (1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66, -691 / 2730, 7 / 6)
_ASYMPTOTIC_FROM = 12.0


def _check_positive(x):
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~(arr > 0)):
        raise ValueError("argument must be strictly positive")
    return arr


def log_gamma(x):
    """ln Γ(x) for x > 0."""
    arr = _check_positive(x)
    out = _sp.gammaln(arr)
    return float(out) if out.ndim == 0 else out


def digamma(x):
    """ψ(x) = d/dx ln Γ(x) for x > 0, by upward recurrence and the asymptotic series."""
    x = _check_positive(x).copy()
    acc = np.zeros_like(x)
    small = x < _ASYMPTOTIC_FROM
    while np.any(small):
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < _ASYMPTOTIC_FROM
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    for c in reversed(_PSI_COEF):
        series = (series + c) * inv2
    out = acc + np.log(x) - 0.5 / x - series
    return float(out) if out.ndim == 0 else out


def trigamma(x):
    """ψ'(x) for x > 0."""
    x = _check_positive(x).copy()
    acc = np.zeros_like(x)
    small = x < _ASYMPTOTIC_FROM
    while np.any(small):
        acc[small] += 1.0 / (x[small] * x[small])
        x[small] += 1.0
        small = x < _ASYMPTOTIC_FROM
    inv = 1.0 / x
    inv2 = inv * inv
    series = np.zeros_like(x)
    for c in reversed(_PSI1_COEF):
        series = (series + c) * inv2
    out = acc + inv + 0.5 * inv2 + series * inv
    return float(out) if out.ndim == 0 else out


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _BETACF_MAXITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _FPMIN if abs(d) < _FPMIN else d
        c = 1.0 + aa / c
        c = _FPMIN if abs(c) < _FPMIN else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _FPMIN if abs(d) < _FPMIN else d
        c = 1.0 + aa / c
        c = _FPMIN if abs(c) < _FPMIN else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def f_sf(f: float, dfn: float, dfd: float) -> float:
    """Survival function P(F > f) of the F distribution."""
    if math.isnan(f):
        return math.nan
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    x = dfd / (dfd + dfn * f)
    return betainc(dfd / 2.0, dfn / 2.0, x)
