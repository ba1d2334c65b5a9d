"""Gamma/beta special functions and the Student-t tail.

Only what the beta screening threshold and the t-tests need; everything is
scalar float64 and pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "BetaParams",
    "ConvergenceError",
    "log_gamma",
    "log_beta",
    "beta_pdf",
    "reg_inc_beta",
    "inv_reg_inc_beta",
    "student_t_sf",
    "student_t_pvalue",
]


class ConvergenceError(ArithmeticError):
    """An iterative evaluation did not converge within its iteration budget."""


@dataclass(frozen=True)
class BetaParams:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0) or not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError(f"beta shape parameters must be positive and finite, got {self.a}, {self.b}")


# Lanczos approximation, g = 607/128, 15 terms (Godfrey's coefficient set).
_LANCZOS_G = 607.0 / 128.0
_LANCZOS_COEF = (
    0.99999999999999709182,
    57.156235665862923517,
    -59.597960355475491248,
    14.136097974741747174,
    -0.49191381609762019978,
    0.33994649984811888699e-4,
    0.46523628927048575665e-4,
    -0.98374475304879564677e-4,
    0.15808870322491248884e-3,
    -0.21026444172410488319e-3,
    0.21743961811521264320e-3,
    -0.16431810653676389022e-3,
    0.84418223983852743293e-4,
    -0.26190838401581408670e-4,
    0.36899182659531622704e-5,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def log_gamma(x: float) -> float:
    """Natural log of the gamma function for ``x > 0``."""
    x = float(x)
    if not x > 0 or not math.isfinite(x):
        raise ValueError(f"log_gamma requires a finite x > 0, got {x}")
    if x < 0.5:
        # reflection keeps the series in its accurate range
        return math.log(math.pi / math.sin(math.pi * x)) - log_gamma(1.0 - x)
    # Γ(1) = Γ(2) = 1; return exact zeros there
    if x == 1.0 or x == 2.0:
        return 0.0
    z = x - 1.0
    s = _LANCZOS_COEF[0]
    for i in range(1, len(_LANCZOS_COEF)):
        s += _LANCZOS_COEF[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * math.log(t) - t + math.log(s)


def log_beta(a: float, b: float) -> float:
    return log_gamma(a) + log_gamma(b) - log_gamma(a + b)


def beta_pdf(x: float, p: BetaParams) -> float:
    if x <= 0.0 or x >= 1.0:
        return 0.0
    return math.exp((p.a - 1.0) * math.log(x) + (p.b - 1.0) * math.log1p(-x) - log_beta(p.a, p.b))


_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAX_ITER = 10_000


def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b) by the modified Lentz method."""
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
    raise ConvergenceError(f"incomplete beta continued fraction failed for a={a}, b={b}, x={x}")


def reg_inc_beta(x: float, p: BetaParams) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"reg_inc_beta requires 0 <= x <= 1, got {x}")
    a, b = p.a, p.b
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = a * math.log(x) + b * math.log1p(-x) - log_beta(a, b)
    if x < (a + 1.0) / (a + b + 2.0):
        val = math.exp(log_front) * _beta_cf(a, b, x) / a
    else:
        val = 1.0 - math.exp(log_front) * _beta_cf(b, a, 1.0 - x) / b
    return min(1.0, max(0.0, val))


def _initial_guess(q: float, a: float, b: float) -> float:
    # Tail approximations from the leading terms of the series at each end.
    lbeta = log_beta(a, b)
    if a >= 1.0 and b >= 1.0:
        pp = q if q < 0.5 else 1.0 - q
        t = math.sqrt(-2.0 * math.log(pp))
        z = (2.30753 + t * 0.27061) / (1.0 + t * (0.99229 + t * 0.04481)) - t
        if q < 0.5:
            z = -z
        al = (z * z - 3.0) / 6.0
        h = 2.0 / (1.0 / (2.0 * a - 1.0) + 1.0 / (2.0 * b - 1.0))
        w = z * math.sqrt(al + h) / h - (1.0 / (2.0 * b - 1.0) - 1.0 / (2.0 * a - 1.0)) * (
            al + 5.0 / 6.0 - 2.0 / (3.0 * h))
        return a / (a + b * math.exp(2.0 * w))
    lna = math.log(a / (a + b))
    lnb = math.log(b / (a + b))
    t = math.exp(a * lna) / a
    u = math.exp(b * lnb) / b
    w = t + u
    if q < t / w:
        return math.exp((math.log(a * w * q)) / a)
    return 1.0 - math.exp(math.log(b * w * (1.0 - q)) / b)


def inv_reg_inc_beta(q: float, p: BetaParams, tol: float = 1e-14, max_iter: int = 2000) -> float:
    """Quantile of the beta law: the ``x`` with ``I_x(a, b) = q``.

    Newton iteration kept inside a shrinking bracket; any step leaving the
    bracket is replaced by a bisection step.
    """
    q = float(q)
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"inv_reg_inc_beta requires 0 <= q <= 1, got {q}")
    if q == 0.0:
        return 0.0
    if q == 1.0:
        return 1.0
    a, b = p.a, p.b
    lbeta = log_beta(a, b)
    lo, hi = 0.0, 1.0
    x = _initial_guess(q, a, b)
    if not 0.0 < x < 1.0 or not math.isfinite(x):
        x = 0.5
    for _ in range(max_iter):
        f = reg_inc_beta(x, p) - q
        if abs(f) <= tol * max(q, 1e-300) or abs(f) < 1e-300:
            return x
        if f < 0.0:
            lo = x
        else:
            hi = x
        if hi - lo <= 4.0 * math.ulp(x):
            # where I is steep, adjacent floats differ visibly; take the closest one
            grid = [lo]
            while grid[-1] < hi:
                grid.append(math.nextafter(grid[-1], 1.0))
            return min((c for c in grid if 0.0 < c < 1.0), key=lambda c: abs(reg_inc_beta(c, p) - q), default=x)
        dens = math.exp((a - 1.0) * math.log(x) + (b - 1.0) * math.log1p(-x) - lbeta)
        nxt = x - f / dens if dens > 0.0 and math.isfinite(dens) else math.nan
        if not (lo < nxt < hi):
            # geometric midpoint when the bracket spans orders of magnitude
            nxt = math.sqrt(lo * hi) if lo > 0.0 and hi / lo > 1e3 else 0.5 * (lo + hi)
            if lo == 0.0 and hi < 1e-3:
                nxt = hi * 1e-3
        x = nxt
    raise ConvergenceError(f"inv_reg_inc_beta did not converge for q={q}, a={a}, b={b}")


def student_t_sf(t: float, df: float) -> float:
    """Upper-tail probability P(T > t) for Student's t with ``df`` degrees of freedom."""
    if not df >= 1:
        raise ValueError(f"student_t_sf requires df >= 1, got {df}")
    t = float(t)
    if t == 0.0:
        return 0.5
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    t2 = t * t
    if t2 > 1e100 * df:
        # t² may overflow; I_x(a, 1/2) ~ x^a / (a B(a, 1/2)) with relative error O(x) < 1e-100
        a = 0.5 * df
        log_x = math.log(df) - 2.0 * math.log(abs(t))
        tail = 0.5 * math.exp(a * log_x - math.log(a) - log_beta(a, 0.5))
    elif t2 < df:
        # near zero the central mass is the accurate quantity
        tail = 0.5 - 0.5 * reg_inc_beta(t2 / (df + t2), BetaParams(0.5, 0.5 * df))
    else:
        tail = 0.5 * reg_inc_beta(df / (df + t2), BetaParams(0.5 * df, 0.5))
    return tail if t > 0 else 1.0 - tail


def student_t_pvalue(t: float, df: float, sided: str = "two") -> float:
    """p-value for an observed t; ``sided`` is ``"two"``, ``"greater"`` or ``"less"``."""
    if sided == "two":
        return min(1.0, 2.0 * student_t_sf(abs(t), df))
    if sided == "greater":
        return student_t_sf(t, df)
    if sided == "less":
        return student_t_sf(-t, df)
    raise ValueError(f"unknown sidedness {sided!r}")
