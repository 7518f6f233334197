"""Welch's unequal-variance t-test."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import betainc


class InsufficientSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float
    mean_a: float
    mean_b: float
    n_a: int
    n_b: int


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isnan(t):
        return math.nan
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return float(min(1.0, max(0.0, betainc(df / 2.0, 0.5, x))))


def welch(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise InsufficientSamplesError(f"need >= 2 samples per group, got {len(a)} and {len(b)}")
    ma, mb = float(a.mean()), float(b.mean())
    va, vb = float(a.var(ddof=1)), float(b.var(ddof=1))
    sa, sb = va / len(a), vb / len(b)
    se2 = sa + sb
    if se2 == 0.0:
        # both groups constant: identical means are indistinguishable, different ones perfectly separated
        if ma == mb:
            return WelchResult(0.0, float(len(a) + len(b) - 2), 1.0, ma, mb, len(a), len(b))
        t = math.copysign(math.inf, ma - mb)
        return WelchResult(t, float(len(a) + len(b) - 2), 0.0, ma, mb, len(a), len(b))
    t = (ma - mb) / math.sqrt(se2)
    df = se2 * se2 / (sa * sa / (len(a) - 1) + sb * sb / (len(b) - 1))
    return WelchResult(t, df, student_t_sf2(t, df), ma, mb, len(a), len(b))
