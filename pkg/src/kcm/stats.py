"""Binomial confidence intervals and bound verdicts."""

from __future__ import annotations

import math

from scipy import stats as _st

__all__ = ["wilson", "mean_ci", "verdict", "Verdict"]


class Verdict:
    SATISFIED = "satisfied"
    VIOLATED = "violated"
    VACUOUS = "vacuous"
    INCONCLUSIVE = "inconclusive"
    NO_BOUND = "no-bound"

    PASSING = frozenset({SATISFIED, VACUOUS, NO_BOUND})


def wilson(successes: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        return 0.0, 1.0
    ci = _st.binomtest(int(successes), int(trials)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def mean_ci(total: float, total_sq: float, n: int, level: float = 0.95) -> tuple[float, float]:
    """Normal-approximation interval for a mean from its running sums."""
    if n <= 1:
        return -math.inf, math.inf
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0) * n / (n - 1)
    half = _st.norm.ppf(0.5 + level / 2) * math.sqrt(var / n)
    return mean - half, mean + half


def verdict(ci_low: float, ci_high: float, bound: float | None) -> str:
    """Compare an upper bound on a probability with a confidence interval."""
    if bound is None:
        return Verdict.NO_BOUND
    if bound >= 1:
        return Verdict.VACUOUS
    if ci_high <= bound:
        return Verdict.SATISFIED
    if ci_low > bound:
        return Verdict.VIOLATED
    return Verdict.INCONCLUSIVE
