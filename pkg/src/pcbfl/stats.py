"""Cluster characterization statistics: one-way ANOVA, chi-squared test of
independence, Bonferroni correction, and the incomplete beta/gamma functions
behind their p-values."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

_EPS = 1e-15
_TINY = 1e-300
_MAX_ITER = 10_000


class UndefinedStatisticError(ValueError):
    pass


class DegenerateTableError(ValueError):
    pass


def _gamma_series(a: float, x: float) -> float:
    # P(a, x) = x^a e^-x / Gamma(a+1) * sum_n x^n / ((a+1)...(a+n))
    term = total = 1.0 / a
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a: float, x: float) -> float:
    # Q(a, x) by the Legendre continued fraction, modified Lentz
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = _TINY if abs(d) < _TINY else d
        c = b + an / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammainc_lower(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0 or x < 0:
        raise ValueError("need a > 0 and x >= 0")
    if x == 0:
        return 0.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cf(a, x)


def gammainc_upper(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x)."""
    if a <= 0 or x < 0:
        raise ValueError("need a > 0 and x >= 0")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


def _beta_cf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = _TINY if abs(d) < _TINY else d
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0 or not 0.0 <= x <= 1.0:
        raise ValueError("need a, b > 0 and 0 <= x <= 1")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _beta_cf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _beta_cf(b, a, 1.0 - x) / b


def f_sf(f: float, d1: float, d2: float) -> float:
    """Survival function of the F distribution."""
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))


def chi2_sf(x: float, df: float) -> float:
    if x <= 0:
        return 1.0
    return gammainc_upper(df / 2.0, x / 2.0)


def anova_oneway(groups: Sequence[Sequence[float]]) -> tuple[float, float]:
    """Between/within mean-square ratio and its F-distribution p-value."""
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(groups) < 2 or any(len(g) < 2 for g in groups):
        raise UndefinedStatisticError("ANOVA needs at least two groups of at least two values")
    n_total = sum(len(g) for g in groups)
    grand = sum(g.sum() for g in groups) / n_total
    ss_between = sum(len(g) * (g.mean() - grand) ** 2 for g in groups)
    ss_within = sum(float(np.sum((g - g.mean()) ** 2)) for g in groups)
    df_between = len(groups) - 1
    df_within = n_total - len(groups)
    if ss_within == 0.0:
        if ss_between == 0.0:
            raise UndefinedStatisticError("all values are identical; F is undefined")
        return math.inf, 0.0
    f = (ss_between / df_between) / (ss_within / df_within)
    return float(f), f_sf(f, df_between, df_within)


def chi2_independence(table) -> tuple[float, float, np.ndarray]:
    """Pearson chi-squared test; returns statistic, p-value and expected counts."""
    obs = np.asarray(table, dtype=np.float64)
    if obs.ndim != 2 or min(obs.shape) < 2:
        raise DegenerateTableError("need at least a 2x2 table")
    rows, cols = obs.sum(axis=1), obs.sum(axis=0)
    if np.any(rows == 0) or np.any(cols == 0):
        raise DegenerateTableError("a row or column of the table sums to zero")
    expected = np.outer(rows, cols) / obs.sum()
    stat = float(np.sum((obs - expected) ** 2 / expected))
    df = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    return stat, chi2_sf(stat, df), expected


def bonferroni(p_values, alpha: float = 0.05) -> np.ndarray:
    p = np.asarray(p_values, dtype=np.float64)
    if p.size < 1:
        raise ValueError("need at least one test")
    return p < alpha / p.size


@dataclass
class ClusterStats:
    features: list
    cluster_means: np.ndarray  # features x clusters
    f_stats: np.ndarray
    f_pvalues: np.ndarray
    significant: np.ndarray
    chi2_stat: float | None = None
    chi2_pvalue: float | None = None
    region_table: np.ndarray | None = field(default=None, repr=False)
    alpha: float = 0.05

    @property
    def threshold(self) -> float:
        return self.alpha / max(len(self.f_pvalues), 1)


def characterize_clusters(values: np.ndarray, labels, feature_names: Sequence[str], regions=None,
                          region_names: Sequence[str] = (), alpha: float = 0.05) -> ClusterStats:
    """ANOVA per continuous feature across clusters, plus region x cluster chi-squared."""
    labels = np.asarray(labels)
    ids = np.unique(labels)
    means = np.array([[values[labels == c, j].mean() for c in ids] for j in range(values.shape[1])])
    fs, ps = [], []
    for j in range(values.shape[1]):
        try:
            f, p = anova_oneway([values[labels == c, j] for c in ids])
        except UndefinedStatisticError:
            f, p = math.nan, 1.0
        fs.append(f)
        ps.append(p)
    stats = ClusterStats(list(feature_names), means, np.array(fs), np.array(ps), bonferroni(ps, alpha), alpha=alpha)
    if regions is not None and len(ids) > 1:
        regions = np.asarray(regions)
        names = [r for r in region_names if np.any(regions == r)] or sorted(set(regions))
        table = np.array([[np.sum((regions == r) & (labels == c)) for c in ids] for r in names])
        try:
            stats.chi2_stat, stats.chi2_pvalue, _ = chi2_independence(table)
        except DegenerateTableError:
            pass
        stats.region_table = table
    return stats
