"""Multi-head mortality network and the five training regimes:
single-site, centralized, FedAvg, site-mean clustered (CBFL) and
patient-clustered (PCBFL)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .cluster import kmeans
from .fedsim import (COORDINATOR, AggregationWeights, Bus, MessageKind, RoundPlan, SiteNode,
                     centralized_train, run_federated, site_name)
from .nn import DenseNet, NetLayout, backprop, forward, loss_value, output_delta
from .seeding import derive_seed, rng_for

REGIMES = ("single_site", "centralized", "fedavg", "cbfl", "pcbfl")
CLUSTERED = frozenset({"cbfl", "pcbfl"})


class EmptyClusterError(ValueError):
    pass


class InfeasibleKError(ValueError):
    pass


class AssignmentError(KeyError):
    pass


class MultiHeadNet:
    """One head per feature domain (width -> hidden -> 5), the head outputs
    concatenated and passed through a classifier (15 -> hidden -> 1)."""

    def __init__(self, domain_widths: Sequence[int], head_hidden: int = 32, head_out: int = 5,
                 classifier_hidden: int = 16):
        self.heads = [NetLayout.chain([w, head_hidden, head_out], ["relu", "relu"]) for w in domain_widths]
        self.head_out = head_out
        self.classifier = NetLayout.chain([head_out * len(self.heads), classifier_hidden, 1], ["relu", "sigmoid"])
        self._parts = self.heads + [self.classifier]
        bounds = np.cumsum([0] + [p.n_params for p in self._parts])
        self._slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]

    @property
    def n_params(self) -> int:
        return self._slices[-1].stop

    @property
    def layouts(self) -> list:
        """Sub-network layouts in parameter order: heads, then the classifier."""
        return list(self._parts)

    def init(self, rng: np.random.Generator) -> np.ndarray:
        return np.concatenate([p.init(rng) for p in self._parts])

    def _nets(self, params):
        return [DenseNet(layout, params[sl]) for layout, sl in zip(self._parts, self._slices)]

    def _forward(self, nets, inputs):
        head_acts = [forward(net, x) for net, x in zip(nets[:-1], inputs)]
        z = np.hstack([acts[-1] for acts in head_acts])
        return head_acts, forward(nets[-1], z)

    def predict(self, params, inputs) -> np.ndarray:
        _, clf_acts = self._forward(self._nets(params), inputs)
        return clf_acts[-1][:, 0]

    def loss_and_grad(self, params, inputs, targets):
        nets = self._nets(params)
        head_acts, clf_acts = self._forward(nets, inputs)
        loss = loss_value(clf_acts[-1], targets, "bce")
        delta, pre = output_delta(clf_acts[-1], targets, "bce", "sigmoid")
        grad = np.empty(self.n_params)
        g_clf, g_z = backprop(nets[-1], clf_acts, delta, delta_is_preactivation=pre)
        grad[self._slices[-1]] = g_clf
        for i, (net, acts) in enumerate(zip(nets[:-1], head_acts)):
            g_head, _ = backprop(net, acts, g_z[:, i * self.head_out:(i + 1) * self.head_out])
            grad[self._slices[i]] = g_head
        return loss, grad


@dataclass
class TrainSet:
    """One site's training arrays: domain inputs and a (n, 1) label column."""

    inputs: tuple
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, mask) -> "TrainSet":
        return TrainSet(tuple(x[mask] for x in self.inputs), self.y[mask])


@dataclass
class ClusterModelSet:
    params: list
    traces: list = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return len(self.params)


def _federated(model, train_sets: Mapping[int, TrainSet], plan: RoundPlan, seed: int, stream: int,
               lr: float, bus: Bus | None, workers: int):
    init = model.init(rng_for(seed, "predict", "init", stream))
    sites = [SiteNode(sid, model, ts.inputs, ts.y, derive_seed(seed, "predict", "site", sid, stream),
                      batch_size=plan.batch_size, lr=lr)
             for sid, ts in sorted(train_sets.items()) if len(ts)]
    weights = AggregationWeights({s.site_id: s.n_samples for s in sites})
    return run_federated(sites, init, plan, weights, bus=bus, workers=workers)


def train_fedavg(model, train_sets: Mapping[int, TrainSet], plan: RoundPlan, seed: int = 0, lr: float = 1e-3,
                 bus: Bus | None = None, workers: int = 1) -> np.ndarray:
    params, _ = _federated(model, train_sets, plan, seed, 0, lr, bus, workers)
    return params


def train_single_site(model, train_sets: Mapping[int, TrainSet], plan: RoundPlan, seed: int = 0,
                      lr: float = 1e-3) -> dict:
    """One independent model per site, trained for rounds x epochs epochs."""
    return {sid: _federated(model, {sid: ts}, plan, seed, 0, lr, None, 1)[0]
            for sid, ts in sorted(train_sets.items())}


def train_centralized(model, train_sets: Mapping[int, TrainSet], plan: RoundPlan, seed: int = 0,
                      lr: float = 1e-3, epochs: int | None = None) -> np.ndarray:
    ordered = [train_sets[sid] for sid in sorted(train_sets)]
    inputs = tuple(np.vstack([ts.inputs[i] for ts in ordered]) for i in range(len(ordered[0].inputs)))
    y = np.vstack([ts.y for ts in ordered])
    init = model.init(rng_for(seed, "predict", "init", 0))
    params, _ = centralized_train(model, inputs, y, init, epochs=plan.total_epochs if epochs is None else epochs,
                                  batch_size=plan.batch_size, lr=lr, seed=derive_seed(seed, "predict", "central"))
    return params


def cluster_weights(train_labels: Mapping[int, np.ndarray], cluster: int) -> dict:
    """n^{ck} / N^k for every site with patients in ``cluster``."""
    counts = {sid: int(np.sum(lab == cluster)) for sid, lab in sorted(train_labels.items())}
    return AggregationWeights({s: n for s, n in counts.items() if n}).fractions()


def train_clustered(model, train_sets: Mapping[int, TrainSet], train_labels: Mapping[int, np.ndarray], k: int,
                    plan: RoundPlan, seed: int = 0, lr: float = 1e-3, bus: Bus | None = None,
                    workers: int = 1) -> ClusterModelSet:
    """One federated model per cluster; a site trains cluster c only on its
    patients in c and is weighted by its share of that cluster."""
    totals = [sum(int(np.sum(train_labels[sid] == c)) for sid in train_sets) for c in range(k)]
    empty = [c for c, n in enumerate(totals) if n == 0]
    if empty:
        raise EmptyClusterError(f"clusters without training patients: {empty}")
    out = ClusterModelSet([])
    for c in range(k):
        subsets = {sid: ts.subset(train_labels[sid] == c) for sid, ts in sorted(train_sets.items())}
        params, trace = _federated(model, subsets, plan, seed, c, lr, bus, workers)
        out.params.append(params)
        out.traces.append(trace)
    return out


train_pcbfl = train_clustered


def cbfl_assign(site_embeddings: Mapping[int, np.ndarray], k: int, seed: int = 0, bus: Bus | None = None,
                mode: str = "nearest") -> dict:
    """Site-mean clustering: sites reveal only their mean embedding, the
    coordinator clusters the means and broadcasts the centroids.

    ``mode="nearest"`` labels each patient by its nearest centroid;
    ``mode="site"`` gives every patient its site's cluster.
    """
    sids = sorted(site_embeddings)
    if k > len(sids):
        raise InfeasibleKError(f"k={k} exceeds the number of sites ({len(sids)})")
    means = []
    for sid in sids:
        mean = site_embeddings[sid].mean(axis=0)
        if bus is not None:
            mean = bus.send(site_name(sid), COORDINATOR, MessageKind.EMBEDDING_MEAN, mean, "site_mean")
        means.append(mean)
    site_labels, centroids, _ = kmeans(np.array(means), k, seed=seed)
    labels = {}
    for i, sid in enumerate(sids):
        c = centroids
        if bus is not None:
            c = bus.send(COORDINATOR, site_name(sid), MessageKind.CENTROIDS, centroids, "centroids")
        if mode == "site":
            labels[sid] = np.full(len(site_embeddings[sid]), site_labels[i], dtype=np.int64)
        elif mode == "nearest":
            d = ((site_embeddings[sid][:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
            labels[sid] = np.argmin(d, axis=1)
        else:
            raise ValueError(f"unknown assignment mode {mode!r}")
    return labels


def predict(model, params: np.ndarray, inputs) -> np.ndarray:
    return model.predict(params, inputs)


def predict_clustered(model, models: ClusterModelSet, inputs, labels) -> np.ndarray:
    """Route every patient through its cluster's model."""
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= models.k):
        bad = int(np.flatnonzero((labels < 0) | (labels >= models.k))[0])
        raise AssignmentError(f"patient at row {bad} has no valid cluster assignment")
    out = np.empty(len(labels))
    for c in np.unique(labels):
        rows = labels == c
        out[rows] = model.predict(models.params[c], tuple(x[rows] for x in inputs))
    return out
