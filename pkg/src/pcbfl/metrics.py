"""AUC, AUPRC, bootstrap intervals and globally weighted scores."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


class BootstrapError(RuntimeError):
    pass


def _labels(y_true) -> np.ndarray:
    y = np.asarray(y_true)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0/1")
    return y.astype(np.int64)


def auc(y_true, y_prob) -> float:
    """ROC AUC via the Mann-Whitney statistic with midranks for ties."""
    y = _labels(y_true)
    s = np.asarray(y_prob, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(y_true, y_prob) -> float:
    """Average precision: sum of recall increments times precision, one step
    per distinct score (tied scores enter together)."""
    y = _labels(y_true)
    s = np.asarray(y_prob, dtype=np.float64)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_tie = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last_of_tie]
    seen = last_of_tie + 1
    d_tp = np.diff(np.r_[0, tp])
    terms = (d_tp / n_pos) * (tp / seen)
    return math.fsum(terms.tolist())


METRICS: dict[str, Callable] = {"auc": auc, "auprc": auprc}


def bootstrap_ci(y_true, y_prob, metric: Callable | str = auc, n_resamples: int = 1000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile interval over resamples drawn with replacement.

    Resamples on which the metric is undefined are redrawn, up to ten times
    the resample budget in total.
    """
    metric = METRICS[metric] if isinstance(metric, str) else metric
    y = np.asarray(y_true)
    s = np.asarray(y_prob, dtype=np.float64)
    rng = np.random.default_rng(seed)
    values, draws, undefined = [], 0, 0
    while len(values) < n_resamples and draws < 10 * n_resamples:
        idx = rng.integers(0, len(y), size=len(y))
        draws += 1
        try:
            values.append(metric(y[idx], s[idx]))
        except UndefinedMetricError:
            undefined += 1
    if len(values) < n_resamples or undefined > 0.9 * draws:
        raise BootstrapError(f"metric undefined on {undefined} of {draws} resamples")
    tail = (1.0 - level) / 2.0 * 100.0
    low, high = np.percentile(values, [tail, 100.0 - tail])
    return float(low), float(high)


def bootstrap_mean_ci(values, n_resamples: int = 1000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile interval of the mean of ``values``."""
    v = np.asarray(values, dtype=np.float64)
    rng = np.random.default_rng(seed)
    means = v[rng.integers(0, len(v), size=(n_resamples, len(v)))].mean(axis=1)
    tail = (1.0 - level) / 2.0 * 100.0
    low, high = np.percentile(means, [tail, 100.0 - tail])
    return float(low), float(high)


def global_weighted(values: Sequence[float], sizes: Sequence[float]) -> float:
    """sum_i R_i n_i / N over the cells where R_i is defined (not nan).

    Cells with an undefined metric drop out and their weight is spread
    proportionally over the rest.
    """
    r = np.asarray(values, dtype=np.float64)
    n = np.asarray(sizes, dtype=np.float64)
    if r.shape != n.shape:
        raise ValueError("one size per metric value is required")
    if np.any(n < 0):
        raise ValueError("sample sizes must be non-negative")
    keep = ~np.isnan(r) & (n > 0)
    total = n[keep].sum()
    if total == 0:
        raise ValueError("total sample size is zero")
    weights = n[keep] / total
    assert abs(weights.sum() - 1.0) < 1e-12
    return float(np.dot(weights, r[keep]))


@dataclass
class MetricReport:
    scope: str
    auc: float
    auprc: float
    n_samples: int
    n_positives: int
    auc_ci: tuple | None = None
    auprc_ci: tuple | None = None

    def __post_init__(self):
        if self.n_positives > self.n_samples:
            raise ValueError("more positives than samples")


def report(scope: str, y_true, y_prob, bootstrap: int = 0, seed: int = 0) -> MetricReport:
    """Both metrics for one scope; undefined metrics are reported as nan."""
    y = _labels(y_true)
    values = {}
    for name, fn in METRICS.items():
        try:
            values[name] = fn(y, y_prob)
        except UndefinedMetricError:
            values[name] = math.nan
    rep = MetricReport(scope, values["auc"], values["auprc"], len(y), int(y.sum()))
    if bootstrap and not math.isnan(values["auc"]):
        rep.auc_ci = bootstrap_ci(y, y_prob, auc, bootstrap, seed=seed)
        rep.auprc_ci = bootstrap_ci(y, y_prob, auprc, bootstrap, seed=seed)
    return rep
