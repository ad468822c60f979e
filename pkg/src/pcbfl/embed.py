"""Federated denoising autoencoders and concatenated patient embeddings."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from functools import partial
from typing import Mapping, Sequence

import numpy as np

from .cohort import DOMAINS
from .fedsim import AggregationWeights, Bus, RoundPlan, SiteNode, run_federated
from .nn import DenseNet, NetLayout, Sequential, forward
from .seeding import derive_seed, rng_for


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class AutoencoderSpec:
    domain: str
    input_width: int
    hidden: tuple = (128, 64)
    latent: int = 16
    corruption: float = 0.3

    def __post_init__(self):
        if len(self.hidden) != 2:
            raise ValueError("the encoder has exactly three layers: two hidden widths plus the latent")
        if not 0.0 <= self.corruption < 1.0:
            raise ValueError(f"corruption rate must lie in [0, 1), got {self.corruption}")

    @property
    def layout(self) -> NetLayout:
        h1, h2 = self.hidden
        widths = [self.input_width, h1, h2, self.latent, h2, h1, self.input_width]
        return NetLayout.chain(widths, ["relu", "relu", "identity", "relu", "relu", "sigmoid"])


@dataclass
class Autoencoder:
    spec: AutoencoderSpec
    params: np.ndarray | None = None
    trace: list = field(default_factory=list, repr=False)

    def encode(self, x: np.ndarray) -> np.ndarray:
        if self.params is None:
            raise StateError(f"the {self.spec.domain} autoencoder has not been trained")
        return forward(DenseNet(self.spec.layout, self.params), x, n_layers=3)[-1]

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        if self.params is None:
            raise StateError(f"the {self.spec.domain} autoencoder has not been trained")
        return forward(DenseNet(self.spec.layout, self.params), x)[-1]


@dataclass
class EmbeddingMatrix:
    site_id: int
    patient_ids: list
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape[0] != len(self.patient_ids):
            raise ValueError("one embedding row per patient is required")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"site {self.site_id} produced non-finite embeddings")

    @property
    def dim(self) -> int:
        return self.values.shape[1]


def corrupt(batch: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Zero each entry independently with probability ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"corruption rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return batch
    return batch * (rng.random(batch.shape) >= rate)


def _corrupt_inputs(inputs, rng, rate):
    return [corrupt(x, rate, rng) for x in inputs]


def reconstruction_mse(params: np.ndarray, spec: AutoencoderSpec, x: np.ndarray) -> float:
    out = forward(DenseNet(spec.layout, params), x)[-1]
    return float(np.mean((out - x) ** 2))


def train_domain_autoencoder(site_data: Mapping[int, np.ndarray], spec: AutoencoderSpec, plan: RoundPlan,
                             seed: int = 0, lr: float = 1e-3, bus: Bus | None = None,
                             workers: int = 1) -> Autoencoder:
    """FedAvg over sites, MSE between the reconstruction of a corrupted input
    and the clean input."""
    model = Sequential(spec.layout, "mse")
    init = model.init(rng_for(seed, "embed", spec.domain, "init"))
    augment = partial(_corrupt_inputs, rate=spec.corruption) if spec.corruption > 0 else None
    sites = [SiteNode(sid, model, (x,), x, derive_seed(seed, "embed", spec.domain, "site", sid),
                      batch_size=plan.batch_size, lr=lr, augment=augment)
             for sid, x in sorted(site_data.items())]
    weights = AggregationWeights({s.site_id: s.n_samples for s in sites})
    params, trace = run_federated(sites, init, plan, weights, bus=bus, workers=workers)
    return Autoencoder(spec, params, trace)


def train_autoencoders(site_domains: Mapping[int, Mapping[str, np.ndarray]], specs: Mapping[str, AutoencoderSpec],
                       plan: RoundPlan, seed: int = 0, lr: float = 1e-3, bus: Bus | None = None,
                       workers: int = 1) -> dict[str, Autoencoder]:
    return {d: train_domain_autoencoder({sid: doms[d] for sid, doms in site_domains.items()}, specs[d], plan,
                                        seed=seed, lr=lr, bus=bus, workers=workers)
            for d in specs}


def embed_patients(site_id: int, patient_ids: Sequence, domains: Mapping[str, np.ndarray],
                   autoencoders: Mapping[str, Autoencoder], order: Sequence[str] = DOMAINS) -> EmbeddingMatrix:
    """Encoder-half forward pass per domain, latents concatenated in ``order``."""
    blocks = [autoencoders[d].encode(domains[d]) for d in order]
    return EmbeddingMatrix(site_id, list(patient_ids), np.hstack(blocks))


def param_hash(params: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(params, dtype="<f8").tobytes()).hexdigest()


def write_embeddings_csv(path, embeddings: Sequence[EmbeddingMatrix]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        dim = embeddings[0].dim if embeddings else 0
        writer.writerow(["patient_id", "site_id"] + [f"e_{i + 1}" for i in range(dim)])
        for emb in embeddings:
            for pid, row in zip(emb.patient_ids, emb.values):
                writer.writerow([pid, emb.site_id] + [repr(float(v)) for v in row])


def read_embeddings_csv(path) -> list[EmbeddingMatrix]:
    rows: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            rows.setdefault(int(row[1]), []).append((row[0], [float(v) for v in row[2:]]))
    return [EmbeddingMatrix(sid, [pid for pid, _ in items], np.array([v for _, v in items]))
            for sid, items in sorted(rows.items())]
