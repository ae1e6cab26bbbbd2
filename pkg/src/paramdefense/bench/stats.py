"""Two-sample t statistic for comparing seed-averaged results."""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy import stats

from ..errors import RejectedInputError

# one-sided 95% critical value at df = 4
T_CRIT_DF4 = 2.132


@dataclass(frozen=True)
class TTest:
    t: float
    df: int
    critical: float

    @property
    def significant(self) -> bool:
        return self.t > self.critical


def critical_value(df: int, level: float = 0.05) -> float:
    if df == 4 and level == 0.05:
        return T_CRIT_DF4
    return float(stats.t.ppf(1.0 - level, df))


def two_sample_t(mean1: float, std1: float, mean2: float, std2: float, n: int, level: float = 0.05) -> TTest:
    """``t = (m1 - m2) / sqrt((s1^2 + s2^2) / n)`` with ``df = 2(n - 1)``.

    Tests the one-sided hypothesis that the first mean exceeds the second.
    """
    if int(n) != n or n < 2:
        raise RejectedInputError(f"n must be an integer >= 2, got {n}")
    if std1 < 0 or std2 < 0:
        raise RejectedInputError("standard deviations must be >= 0")
    if std1 == 0 and std2 == 0:
        raise RejectedInputError("both standard deviations are zero; the t statistic is undefined")
    t = (mean1 - mean2) / math.sqrt((std1 * std1 + std2 * std2) / n)
    df = 2 * (int(n) - 1)
    return TTest(t, df, critical_value(df, level))
