"""Repetition harness: per-repetition splits and training, prediction dumps,
per-site / per-cell / global metric tables and the regime comparison."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .cohort import DOMAINS, SiteDataset, split_positions
from .fedsim import Bus, RoundPlan
from .metrics import auc, auprc, bootstrap_mean_ci, global_weighted, UndefinedMetricError
from .predict import (CLUSTERED, REGIMES, MultiHeadNet, TrainSet, predict_clustered, train_centralized,
                      train_clustered, train_fedavg, train_single_site)
from .seeding import derive_seed

PREDICTION_COLUMNS = ("patient_id", "site_id", "cluster", "y_true", "y_prob", "regime", "seed")


@dataclass
class SiteArrays:
    """One normalized site ready for supervised training."""

    site_id: int
    patient_ids: list
    inputs: tuple
    y: np.ndarray  # (n,) 0/1

    @classmethod
    def from_dataset(cls, site: SiteDataset, order: Sequence[str] = DOMAINS) -> "SiteArrays":
        return cls(site.site_id, list(site.patient_ids), tuple(site.domain(d) for d in order),
                   np.asarray(site.mortality, dtype=np.float64))

    def train_set(self, idx) -> TrainSet:
        return TrainSet(tuple(x[idx] for x in self.inputs), self.y[idx, None])


@dataclass
class HarnessConfig:
    plan: RoundPlan = field(default_factory=RoundPlan)
    regimes: tuple = REGIMES
    split_ratio: float = 0.7
    central_epochs: int = 200
    lr: float = 1e-3
    head_hidden: int = 32
    classifier_hidden: int = 16


def _rows(regime, rep_seed, site, idx, labels, probs):
    return [{"patient_id": site.patient_ids[i], "site_id": site.site_id, "cluster": int(c), "y_true": int(site.y[i]),
             "y_prob": float(p), "regime": regime, "seed": rep_seed}
            for i, c, p in zip(idx, labels, probs)]


def run_repetition(sites: Sequence[SiteArrays], assignments: Mapping[str, Mapping[int, np.ndarray]],
                   config: HarnessConfig, root_seed: int, rep: int, bus: Bus | None = None,
                   workers: int = 1) -> list[dict]:
    """Split, train every configured regime and predict the test patients.

    ``assignments[regime][site_id]`` holds the cluster of every patient of the
    site (row-aligned) for the clustered regimes. Unclustered rows carry
    cluster -1.
    """
    rep_seed = derive_seed(root_seed, "rep", rep)
    train_seed = derive_seed(rep_seed, "train")
    splits = {s.site_id: split_site(s, config.split_ratio, derive_seed(rep_seed, "split", s.site_id)) for s in sites}
    model = MultiHeadNet([x.shape[1] for x in sites[0].inputs], config.head_hidden,
                         classifier_hidden=config.classifier_hidden)
    train_sets = {s.site_id: s.train_set(splits[s.site_id][0]) for s in sites}
    rows: list[dict] = []

    def test_inputs(s):
        return tuple(x[splits[s.site_id][1]] for x in s.inputs)

    for regime in config.regimes:
        if regime in CLUSTERED:
            labels = assignments[regime]
            k = int(max(lab.max() for lab in labels.values())) + 1
            train_labels = {s.site_id: labels[s.site_id][splits[s.site_id][0]] for s in sites}
            models = train_clustered(model, train_sets, train_labels, k, config.plan, seed=train_seed,
                                     lr=config.lr, bus=bus, workers=workers)
            for s in sites:
                idx = splits[s.site_id][1]
                lab = labels[s.site_id][idx]
                rows += _rows(regime, rep_seed, s, idx, lab, predict_clustered(model, models, test_inputs(s), lab))
        elif regime == "fedavg":
            params = train_fedavg(model, train_sets, config.plan, seed=train_seed, lr=config.lr, bus=bus,
                                  workers=workers)
            for s in sites:
                idx = splits[s.site_id][1]
                rows += _rows(regime, rep_seed, s, idx, [-1] * len(idx), model.predict(params, test_inputs(s)))
        elif regime == "single_site":
            per_site = train_single_site(model, train_sets, config.plan, seed=train_seed, lr=config.lr)
            for s in sites:
                idx = splits[s.site_id][1]
                rows += _rows(regime, rep_seed, s, idx, [-1] * len(idx),
                              model.predict(per_site[s.site_id], test_inputs(s)))
        elif regime == "centralized":
            params = train_centralized(model, train_sets, config.plan, seed=train_seed, lr=config.lr,
                                       epochs=config.central_epochs)
            for s in sites:
                idx = splits[s.site_id][1]
                rows += _rows(regime, rep_seed, s, idx, [-1] * len(idx), model.predict(params, test_inputs(s)))
        else:
            raise ValueError(f"unknown regime {regime!r}")
    return rows


def split_site(site: SiteArrays, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    idx = split_positions(len(site.y), ratio, seed, site.site_id)
    return idx.train, idx.test


# -- metric tables -------------------------------------------------------------

def _metric(fn, y, p) -> float:
    try:
        return fn(y, p)
    except UndefinedMetricError:
        return math.nan


def cell_table(rows: Sequence[dict]) -> list[dict]:
    """Metrics per (regime, seed, site, cluster) cell."""
    cells: dict[tuple, list] = {}
    for r in rows:
        cells.setdefault((r["regime"], r["seed"], r["site_id"], r["cluster"]), []).append(r)
    out = []
    for (regime, seed, sid, c), members in sorted(cells.items(), key=lambda kv: tuple(map(str, kv[0]))):
        y = np.array([m["y_true"] for m in members])
        p = np.array([m["y_prob"] for m in members])
        out.append({"regime": regime, "seed": seed, "site_id": sid, "cluster": c, "n": len(y),
                    "n_positive": int(y.sum()), "auc": _metric(auc, y, p), "auprc": _metric(auprc, y, p)})
    return out


def site_table(cells: Sequence[dict]) -> list[dict]:
    """Per-site metrics: the size-weighted mean of the site's defined cells."""
    groups: dict[tuple, list] = {}
    for c in cells:
        groups.setdefault((c["regime"], c["seed"], c["site_id"]), []).append(c)
    out = []
    for (regime, seed, sid), members in groups.items():
        row = {"regime": regime, "seed": seed, "site_id": sid, "n": sum(m["n"] for m in members)}
        for name in ("auc", "auprc"):
            vals = [m[name] for m in members]
            row[name] = (math.nan if all(math.isnan(v) for v in vals)
                         else global_weighted(vals, [m["n"] for m in members]))
        out.append(row)
    return out


def global_table(cells: Sequence[dict]) -> list[dict]:
    """One global score per (regime, seed): cells weighted by n_ck / N.

    For unclustered regimes every site is one cell, which gives the per-site
    weighting n_c / N.
    """
    groups: dict[tuple, list] = {}
    for c in cells:
        groups.setdefault((c["regime"], c["seed"]), []).append(c)
    out = []
    for (regime, seed), members in groups.items():
        sizes = [m["n"] for m in members]
        out.append({"regime": regime, "seed": seed, "n": sum(sizes),
                    "auc": global_weighted([m["auc"] for m in members], sizes),
                    "auprc": global_weighted([m["auprc"] for m in members], sizes)})
    return out


@dataclass
class RepetitionSummary:
    regime: str
    values: dict  # metric -> per-repetition globals
    mean: dict
    ci: dict

    @property
    def n_repetitions(self) -> int:
        return len(next(iter(self.values.values())))


def summarize(globals_: Sequence[dict], n_resamples: int = 1000, seed: int = 0) -> dict:
    by_regime: dict[str, list] = {}
    for g in globals_:
        by_regime.setdefault(g["regime"], []).append(g)
    out = {}
    for regime, rows in by_regime.items():
        rows = sorted(rows, key=lambda r: r["seed"])
        values = {m: np.array([r[m] for r in rows]) for m in ("auc", "auprc")}
        out[regime] = RepetitionSummary(
            regime, values, {m: float(v.mean()) for m, v in values.items()},
            {m: bootstrap_mean_ci(v, n_resamples, seed=derive_seed(seed, "summary", regime, m))
             for m, v in values.items()})
    return out


def comparison_table(summaries: Mapping[str, RepetitionSummary], reference: str = "pcbfl") -> list[dict]:
    """Mean and CI per regime plus the reference regime's improvement over
    it, both in absolute points and relative to the other regime's mean."""
    ref = summaries[reference]
    out = []
    for regime in [r for r in REGIMES if r in summaries]:
        s = summaries[regime]
        row = {"regime": regime, "repetitions": s.n_repetitions}
        for m in ("auc", "auprc"):
            row[f"{m}_mean"] = s.mean[m]
            row[f"{m}_ci_low"], row[f"{m}_ci_high"] = s.ci[m]
            gain = ref.mean[m] - s.mean[m]
            row[f"{m}_gain_abs"] = gain
            row[f"{m}_gain_rel"] = gain / s.mean[m] if s.mean[m] else math.nan
        out.append(row)
    return out


def wins(globals_: Sequence[dict], regime: str, other: str, metric: str = "auc") -> tuple[int, int]:
    """Repetitions where ``regime`` beats ``other`` strictly, out of shared ones."""
    a = {g["seed"]: g[metric] for g in globals_ if g["regime"] == regime}
    b = {g["seed"]: g[metric] for g in globals_ if g["regime"] == other}
    shared = sorted(set(a) & set(b))
    return sum(a[s] > b[s] for s in shared), len(shared)


def best_regime_counts(sites: Sequence[dict], metric: str = "auc") -> dict:
    """How many sites each regime wins on mean per-site score across repetitions."""
    means: dict[tuple, list] = {}
    for r in sites:
        if not math.isnan(r[metric]):
            means.setdefault((r["site_id"], r["regime"]), []).append(r[metric])
    regimes = sorted({reg for _, reg in means}, key=lambda x: REGIMES.index(x) if x in REGIMES else len(REGIMES))
    counts = {reg: 0 for reg in regimes}
    for sid in sorted({s for s, _ in means}):
        scored = [(float(np.mean(means[(sid, reg)])), -i, reg) for i, reg in enumerate(regimes)
                  if (sid, reg) in means]
        counts[max(scored)[2]] += 1
    return counts


def run_repetitions(sites: Sequence[SiteArrays], assignments, config: HarnessConfig, root_seed: int,
                    repetitions: int, workers: int = 1) -> list[dict]:
    """All prediction rows of ``repetitions`` independent repetitions.

    Repetitions run concurrently; each owns seeds derived from its index so the
    rows do not depend on the worker count.
    """
    def one(rep):
        return run_repetition(sites, assignments, config, root_seed, rep)

    if workers > 1 and repetitions > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(one, range(repetitions)))
    else:
        chunks = [one(r) for r in range(repetitions)]
    return [row for chunk in chunks for row in chunk]


def write_rows_csv(path, rows: Sequence[dict], columns: Sequence[str] | None = None):
    columns = list(columns or (rows[0].keys() if rows else PREDICTION_COLUMNS))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items() if k in columns})
