"""AUROC, confidence intervals over repeats, and Student t-tests.

The t distribution is evaluated through the regularized incomplete beta
function, computed with the modified Lentz continued fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAX_ITER = 10_000


class DegenerateTestError(ValueError):
    """The test statistic is undefined because the relevant variance is zero."""


@dataclass(frozen=True)
class SummaryStat:
    mean: float
    ci_low: float
    ci_high: float
    n: int
    level: float = 0.95


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: float
    kind: str  # "paired" or "welch"


# ---------------------------------------------------------------------------
# AUROC


def _validate_scored(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("AUROC needs at least one positive and one negative")
    return scores, labels


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ordered = values[order]
    n = values.size
    # start index of each run of equal values
    starts = np.flatnonzero(np.r_[True, ordered[1:] != ordered[:-1]])
    ends = np.r_[starts[1:], n]
    run_rank = (starts + ends + 1) / 2.0  # mean of (start+1 .. end)
    ranks = np.empty(n, dtype=np.float64)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank sum.

    Equals the fraction of (positive, negative) pairs ranked correctly, with
    tied pairs counted as one half.
    """
    scores, labels = _validate_scored(scores, labels)
    ranks = average_ranks(scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# t distribution


def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b), modified Lentz."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
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
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def _betainc(a: float, b: float, x: float, y: float) -> float:
    # y = 1 - x, passed separately so callers can supply it without cancellation
    if x <= 0.0:
        return 0.0
    if y <= 0.0:
        return 1.0
    log_front = a * math.log(x) + b * math.log(y) + math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, y) / b


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    return _betainc(a, b, x, 1.0 - x)


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if not df > 0:
        raise ValueError("df must be positive")
    t2 = t * t
    return _betainc(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * t_two_sided_p(t, df)
    return 1.0 - tail if t > 0 else tail


def t_ppf(q: float, df: float) -> float:
    """Quantile of Student's t, by bisection on ``t_cdf``."""
    if not 0.0 < q < 1.0:
        raise ValueError("quantile level must be in (0, 1)")
    if q == 0.5:
        return 0.0
    if q < 0.5:
        return -t_ppf(1.0 - q, df)
    lo, hi = 0.0, 1.0
    while t_cdf(hi, df) < q:
        lo, hi = hi, hi * 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if t_cdf(mid, df) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# intervals and tests


def mean_ci(values: Sequence[float], level: float = 0.95) -> SummaryStat:
    """Student-t interval ``mean +- t_{(1+level)/2, n-1} * s / sqrt(n)``."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    n = values.size
    if n < 2:
        raise ValueError("mean_ci needs at least two values")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    mean = float(values.mean())
    s = float(values.std(ddof=1))
    half = t_ppf((1.0 + level) / 2.0, n - 1) * s / math.sqrt(n)
    return SummaryStat(mean, min(mean - half, mean), max(mean + half, mean), n, level)


def _rounding_floor(*samples) -> float:
    # spread this small is float rounding noise (e.g. x + 0.02 - x), not variance
    scale = max(float(np.max(np.abs(s))) for s in samples)
    return 64 * np.finfo(np.float64).eps * scale


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Paired t-test on ``a - b``; two-tailed p."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"paired samples differ in length ({a.size} vs {b.size})")
    if a.size < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    n = d.size
    sd = float(d.std(ddof=1))
    if sd <= _rounding_floor(a, b):
        raise DegenerateTestError("paired differences have zero variance")
    t = float(d.mean()) / (sd / math.sqrt(n))
    return TTestResult(t, t_two_sided_p(t, n - 1), float(n - 1), "paired")


def unpaired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Welch's unequal-variance t-test; two-tailed p."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va = float(a.var(ddof=1)) / a.size
    vb = float(b.var(ddof=1)) / b.size
    se2 = va + vb
    if math.sqrt(va) <= _rounding_floor(a) and math.sqrt(vb) <= _rounding_floor(b):
        raise DegenerateTestError("both samples have zero variance")
    t = (float(a.mean()) - float(b.mean())) / math.sqrt(se2)
    df = se2 * se2 / (va * va / (a.size - 1) + vb * vb / (b.size - 1))
    return TTestResult(t, t_two_sided_p(t, df), df, "welch")


welch_t_test = unpaired_t_test
