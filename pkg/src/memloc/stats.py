"""Summary statistics and paired t-tests with an in-repo Student-t tail."""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence


class DegenerateSampleError(ValueError):
    pass


class MeanStderr(NamedTuple):
    mean: float
    stderr: float


class TTest(NamedTuple):
    t: float
    df: int
    p: float


def mean_stderr(xs: Sequence[float]) -> MeanStderr:
    n = len(xs)
    if n < 2:
        raise ValueError("mean_stderr needs at least two values")
    m = math.fsum(xs) / n
    var = math.fsum((x - m) ** 2 for x in xs) / (n - 1)
    return MeanStderr(m, math.sqrt(var / n))


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-15) -> float:
    # Lentz's continued fraction for the incomplete beta function
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with ``df`` degrees of freedom."""
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0 else 1.0 - tail


def _paired_t(a: Sequence[float], b: Sequence[float]) -> tuple[float, int]:
    if len(a) != len(b):
        raise ValueError("paired samples must have equal length")
    if len(a) < 2:
        raise ValueError("paired samples need at least two items")
    d = [x - y for x, y in zip(a, b)]
    m, se = mean_stderr(d)
    if se == 0.0:
        raise DegenerateSampleError("differences have zero variance")
    return m / se, len(d) - 1


def paired_t_one_tailed(a: Sequence[float], b: Sequence[float], direction: str = "greater") -> TTest:
    """One-tailed paired t-test on d = a - b; ``direction`` is the alternative ('greater' or 'less')."""
    t, df = _paired_t(a, b)
    if direction == "greater":
        p = t_sf(t, df)
    elif direction == "less":
        p = t_sf(-t, df)
    else:
        raise ValueError("direction must be 'greater' or 'less'")
    return TTest(t, df, p)


def paired_t_two_tailed(a: Sequence[float], b: Sequence[float]) -> TTest:
    t, df = _paired_t(a, b)
    return TTest(t, df, min(1.0, 2.0 * t_sf(abs(t), df)))


def bonferroni_alpha(alpha: float, n_tests: int) -> float:
    if n_tests < 1:
        raise ValueError("n_tests must be >= 1")
    return alpha / n_tests
