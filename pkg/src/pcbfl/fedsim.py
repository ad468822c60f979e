"""In-process federation: message bus, site nodes and the FedAvg round loop."""

from __future__ import annotations

import csv
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .nn import AdamState, adam_step

COORDINATOR = "coordinator"


class ProtocolError(RuntimeError):
    pass


class AggregationError(ProtocolError):
    pass


class MessageKind(str, Enum):
    PARAMETERS = "parameters"
    FEATURE_EXTREMES = "feature_extremes"
    SMPC_MASK = "smpc_mask"
    SMPC_SHARE = "smpc_share"
    METRICS = "metrics"
    CLUSTER_LABELS = "cluster_labels"
    EMBEDDING_MEAN = "embedding_mean"
    CENTROIDS = "centroids"


# What a site may ever put on the bus. EMBEDDING_MEAN is only used by the
# site-mean clustering baseline. There is deliberately no kind for records.
SITE_KINDS = frozenset({
    MessageKind.PARAMETERS,
    MessageKind.FEATURE_EXTREMES,
    MessageKind.SMPC_SHARE,
    MessageKind.METRICS,
    MessageKind.EMBEDDING_MEAN,
})


def site_name(site_id) -> str:
    return f"site{site_id}"


@dataclass(frozen=True)
class Message:
    sender: str
    receiver: str
    kind: MessageKind
    tag: str
    shape: tuple


class Bus:
    """Delivers payloads between parties and keeps a metadata-only audit log."""

    def __init__(self):
        self.log: list[Message] = []
        self._lock = threading.Lock()

    def send(self, sender: str, receiver: str, kind: MessageKind, payload, tag: str = ""):
        kind = MessageKind(kind)
        if sender != COORDINATOR and kind not in SITE_KINDS:
            raise ProtocolError(f"{sender} may not send {kind.value} messages")
        shape = tuple(np.shape(payload)) if isinstance(payload, np.ndarray) else ()
        with self._lock:
            self.log.append(Message(sender, receiver, kind, tag, shape))
        if isinstance(payload, np.ndarray):
            return payload.copy()
        return payload

    def kinds_from_sites(self) -> set[MessageKind]:
        return {m.kind for m in self.log if m.sender != COORDINATOR}

    def tags(self) -> Counter:
        return Counter(m.tag for m in self.log)

    def clear(self):
        with self._lock:
            self.log.clear()


@dataclass
class RoundPlan:
    rounds: int = 20
    local_epochs: int = 10
    batch_size: int = 32

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError(f"invalid round plan {self}")

    @property
    def total_epochs(self) -> int:
        return self.rounds * self.local_epochs


@dataclass
class AggregationWeights:
    counts: dict

    def __post_init__(self):
        if any(n < 0 for n in self.counts.values()):
            raise AggregationError("sample counts must be non-negative")

    @property
    def total(self) -> int:
        return int(sum(self.counts.values()))

    def fractions(self) -> dict:
        total = self.total
        if total == 0:
            raise AggregationError("all aggregation weights are zero")
        return {sid: self.counts[sid] / total for sid in sorted(self.counts)}


def train_local(model, params: np.ndarray, inputs: Sequence[np.ndarray], targets: np.ndarray,
                epochs: int, batch_size: int, rng: np.random.Generator, optimizer: AdamState,
                augment: Callable | None = None) -> float:
    """Mini-batch Adam on one party's data; updates ``params`` in place.

    Batch order is reshuffled every epoch from ``rng``. Returns the mean batch
    loss of the last epoch (nan when no epoch ran).
    """
    n = len(targets)
    last = float("nan")
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb = [x[idx] for x in inputs]
            if augment is not None:
                xb = augment(xb, rng)
            loss, grad = model.loss_and_grad(params, xb, targets[idx])
            adam_step(optimizer, params, grad)
            losses.append(loss)
        last = float(np.mean(losses)) if losses else float("nan")
    return last


@dataclass
class SiteNode:
    """One federation participant. Owns its data, RNG stream and optimizer."""

    site_id: int
    model: object
    inputs: tuple
    targets: np.ndarray
    seed: int
    batch_size: int = 32
    lr: float = 1e-3
    augment: Callable | None = None
    rng: np.random.Generator = field(init=False, repr=False)
    optimizer: AdamState | None = field(init=False, default=None, repr=False)

    def __post_init__(self):
        self.inputs = tuple(self.inputs)
        self.rng = np.random.default_rng(self.seed)

    @property
    def n_samples(self) -> int:
        return len(self.targets)

    def fit(self, params: np.ndarray, epochs: int) -> tuple[np.ndarray, float]:
        if self.optimizer is None:
            self.optimizer = AdamState(len(params), lr=self.lr)
        local = np.array(params, dtype=np.float64, copy=True)
        loss = train_local(self.model, local, self.inputs, self.targets, epochs,
                           self.batch_size, self.rng, self.optimizer, self.augment)
        return local, loss


def aggregate(vectors: Mapping, weights: AggregationWeights) -> np.ndarray:
    """Sample-size weighted mean, accumulated in site-id order."""
    fractions = weights.fractions()
    acc = None
    for sid in sorted(vectors):
        frac = fractions.get(sid, 0.0)
        if frac == 0.0:
            continue
        if acc is None:
            acc = np.zeros_like(vectors[sid], dtype=np.float64)
        elif vectors[sid].shape != acc.shape:
            raise ProtocolError(f"site {sid} returned a parameter vector of the wrong layout")
        acc += frac * vectors[sid]
    if acc is None:
        raise AggregationError("no site contributed to the aggregate")
    return acc


def _map(fn, items, workers: int):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def fedavg_round(sites: Iterable[SiteNode], global_params: np.ndarray, plan: RoundPlan,
                 weights: AggregationWeights, bus: Bus | None = None,
                 workers: int = 1) -> tuple[np.ndarray, dict]:
    """One round: broadcast, local training, weighted aggregation.

    Returns the new global vector and ``{site_id: (loss, n_samples)}``.
    """
    fractions = weights.fractions()
    active = sorted((s for s in sites if fractions.get(s.site_id, 0.0) > 0.0), key=lambda s: s.site_id)
    if not active:
        raise AggregationError("all aggregation weights are zero")

    def work(site):
        params = global_params
        if bus is not None:
            params = bus.send(COORDINATOR, site_name(site.site_id), MessageKind.PARAMETERS, global_params, "global")
        trained, loss = site.fit(params, plan.local_epochs)
        if trained.shape != global_params.shape:
            raise ProtocolError(f"site {site.site_id} changed the parameter layout")
        if bus is not None:
            trained = bus.send(site_name(site.site_id), COORDINATOR, MessageKind.PARAMETERS, trained, "local")
            bus.send(site_name(site.site_id), COORDINATOR, MessageKind.METRICS, loss, "train_loss")
        return site.site_id, trained, loss, site.n_samples

    results = _map(work, active, workers)
    vectors = {sid: vec for sid, vec, _, _ in results}
    losses = {sid: (loss, n) for sid, _, loss, n in results}
    return aggregate(vectors, weights), losses


def run_federated(sites: Sequence[SiteNode], init_params: np.ndarray, plan: RoundPlan,
                  weights: AggregationWeights, bus: Bus | None = None,
                  workers: int = 1) -> tuple[np.ndarray, list[dict]]:
    """Run ``plan.rounds`` FedAvg rounds.

    The trace holds one row per (round, site) with the site's last-epoch loss.
    """
    params = np.array(init_params, dtype=np.float64, copy=True)
    trace = []
    for r in range(plan.rounds):
        params, losses = fedavg_round(sites, params, plan, weights, bus=bus, workers=workers)
        for sid in sorted(losses):
            loss, n = losses[sid]
            trace.append({"round": r + 1, "site": sid, "loss": loss, "n_samples": n})
    return params, trace


def round_mean_loss(trace: list[dict]) -> list[float]:
    """Sample-weighted mean training loss per round."""
    by_round: dict[int, list] = {}
    for row in trace:
        by_round.setdefault(row["round"], []).append((row["loss"], row["n_samples"]))
    return [float(np.average([l for l, _ in rows], weights=[n for _, n in rows]))
            for _, rows in sorted(by_round.items())]


def centralized_train(model, inputs: Sequence[np.ndarray], targets: np.ndarray, init_params: np.ndarray,
                      epochs: int = 200, batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
                      augment: Callable | None = None) -> tuple[np.ndarray, float]:
    """Plain local training on pooled data."""
    node = SiteNode(0, model, tuple(inputs), targets, seed, batch_size=batch_size, lr=lr, augment=augment)
    if epochs == 0:
        return np.array(init_params, dtype=np.float64, copy=True), float("nan")
    return node.fit(init_params, epochs)


def write_trace_csv(path, trace: list[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["round", "site", "loss", "n_samples"])
        writer.writeheader()
        for row in trace:
            writer.writerow({**row, "loss": repr(float(row["loss"]))})
