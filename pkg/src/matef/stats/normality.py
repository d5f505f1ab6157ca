"""Normality checks: Lilliefors-corrected Kolmogorov-Smirnov and Shapiro-Wilk."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from ..errors import AnalysisError, DegenerateSampleError


@dataclass(frozen=True)
class NormalityResult:
    method: str
    statistic: float
    p: float
    n: int


def _prepare(sample: Sequence[float], min_n: int, max_n: int | None = None) -> np.ndarray:
    x = np.asarray(sample, dtype=float)
    if x.ndim != 1:
        x = x.ravel()
    if len(x) < min_n or (max_n is not None and len(x) > max_n):
        upper = f"..{max_n}" if max_n else "+"
        raise AnalysisError(f"sample size {len(x)} outside supported range {min_n}{upper}")
    if np.ptp(x) == 0:
        raise DegenerateSampleError("degenerate sample: zero variance")
    return np.sort(x)


def lilliefors_d(x: np.ndarray) -> float:
    n = len(x)
    z = (x - x.mean()) / x.std(ddof=1)
    cdf = ndtr(z)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))


def lilliefors_p(d: float, n: int) -> float:
    """Dallal-Wilkinson approximation in the upper tail, Stephens' modified statistic above p = 0.1."""
    if n > 100:
        kd, nd = d * (n / 100.0) ** 0.49, 100
    else:
        kd, nd = d, n
    p = math.exp(
        -7.01256 * kd**2 * (nd + 2.78019)
        + 2.99587 * kd * math.sqrt(nd + 2.78019)
        - 0.122119
        + 0.974598 / math.sqrt(nd)
        + 1.67997 / nd
    )
    if p > 0.1:
        kk = (math.sqrt(n) - 0.01 + 0.85 / math.sqrt(n)) * d
        if kk <= 0.302:
            p = 1.0
        elif kk <= 0.5:
            p = 2.76773 - 19.828315 * kk + 80.709644 * kk**2 - 138.55152 * kk**3 + 81.218052 * kk**4
        elif kk <= 0.9:
            p = -4.901232 + 40.662806 * kk - 97.490286 * kk**2 + 94.029866 * kk**3 - 32.355711 * kk**4
        elif kk <= 1.31:
            p = 6.198765 - 19.558097 * kk + 23.186922 * kk**2 - 12.234627 * kk**3 + 2.423045 * kk**4
        else:
            p = 0.0
    return min(1.0, max(0.0, p))


def ks_normality(sample: Sequence[float]) -> NormalityResult:
    x = _prepare(sample, 4)
    d = lilliefors_d(x)
    return NormalityResult("kolmogorov_smirnov", d, lilliefors_p(d, len(x)), len(x))


def _poly(coefs: Sequence[float], x: float) -> float:
    return sum(c * x**i for i, c in enumerate(coefs))


# Royston (1992/1995) approximations.
_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_SMALL_GAMMA = (-2.273, 0.459)
_SMALL_MU = (0.5440, -0.39978, 0.025054, -6.714e-4)
_SMALL_SIGMA = (1.3822, -0.77857, 0.062767, -0.0020322)
_LARGE_MU = (-1.5861, -0.31082, -0.083751, 0.0038915)
_LARGE_SIGMA = (-0.4803, -0.082676, 0.0030302)


@lru_cache(maxsize=64)
def shapiro_coefficients(n: int) -> np.ndarray:
    """Antisymmetric weights a_1..a_n for ordered observations."""
    if n == 3:
        return np.array([-math.sqrt(0.5), 0.0, math.sqrt(0.5)])
    i = np.arange(1, n + 1)
    m = ndtri((i - 0.375) / (n + 0.25))
    mm = float(m @ m)
    u = 1.0 / math.sqrt(n)
    a = m / math.sqrt(mm)
    an = _poly(_C1, u) + m[-1] / math.sqrt(mm)
    if n > 5:
        an1 = _poly(_C2, u) + m[-2] / math.sqrt(mm)
        phi = (mm - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * an**2 - 2 * an1**2)
        a = m / math.sqrt(phi)
        a[-1], a[-2], a[0], a[1] = an, an1, -an, -an1
    else:
        phi = (mm - 2 * m[-1] ** 2) / (1 - 2 * an**2)
        a = m / math.sqrt(phi)
        a[-1], a[0] = an, -an
    return a


def shapiro_p(w: float, n: int) -> float:
    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return min(1.0, max(0.0, p))
    w1 = math.log(1.0 - w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly(_SMALL_GAMMA, n)
        if w1 == -math.inf:
            return 1.0
        if w1 >= gamma:
            return 0.0
        y = -math.log(gamma - w1)
        mu, sigma = _poly(_SMALL_MU, n), math.exp(_poly(_SMALL_SIGMA, n))
    else:
        if w1 == -math.inf:
            return 1.0
        ln = math.log(n)
        y = w1
        mu, sigma = _poly(_LARGE_MU, ln), math.exp(_poly(_LARGE_SIGMA, ln))
    return float(min(1.0, max(0.0, 1.0 - ndtr((y - mu) / sigma))))


def shapiro_wilk(sample: Sequence[float]) -> NormalityResult:
    x = _prepare(sample, 3, 5000)
    n = len(x)
    a = shapiro_coefficients(n)
    ss = float(((x - x.mean()) ** 2).sum())
    w = min(1.0, float(a @ x) ** 2 / ss)
    return NormalityResult("shapiro_wilk", w, shapiro_p(w, n), n)
