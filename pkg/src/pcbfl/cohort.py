"""Patient feature schema, synthetic multi-site cohorts, CSV ingestion,
global 0-1 normalization and train/test splits."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

from .fedsim import COORDINATOR, Bus, MessageKind, site_name
from .seeding import rng_for

REGIONS = ("Midwest", "Northeast", "South", "West")
DOMAINS = ("diagnosis", "drug", "physio")

PHYSIO_NAMES = ("gcs_motor", "gcs_verbal", "gcs_eyes", "heart_rate", "systolic_bp",
                "respiratory_rate", "o2_saturation", "age", "admission_weight", "admission_height")
# (center, scale) used to express synthetic z-scores in clinical units
# shared drug codes whose mortality effect differs in sign between groups
MODIFIER_CODES = 12
MODIFIER_RATE = 0.15

PHYSIO_UNITS = ((5.0, 1.0), (3.8, 1.2), (3.2, 0.8), (90.0, 15.0), (122.0, 20.0),
                (20.0, 5.0), (96.5, 2.0), (63.0, 15.0), (82.0, 20.0), (170.0, 10.0))


class ValidationError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, path, row, column, message):
        self.path, self.row, self.column = path, row, column
        super().__init__(f"{path}: row {row}, column {column!r}: {message}")


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSchema:
    n_diagnosis: int = 483
    n_drugs: int = 1056
    n_physio: int = 10

    def __post_init__(self):
        for name in ("n_diagnosis", "n_drugs", "n_physio"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1")

    @property
    def widths(self) -> dict:
        return {"diagnosis": self.n_diagnosis, "drug": self.n_drugs, "physio": self.n_physio}

    @property
    def width(self) -> int:
        return self.n_diagnosis + self.n_drugs + self.n_physio

    def columns(self, domain: str) -> list[str]:
        if domain == "diagnosis":
            return [f"dx_{i:03d}" for i in range(self.n_diagnosis)]
        if domain == "drug":
            return [f"drug_{i:04d}" for i in range(self.n_drugs)]
        if domain == "physio":
            return [PHYSIO_NAMES[i] if i < len(PHYSIO_NAMES) else f"physio_{i:02d}" for i in range(self.n_physio)]
        raise KeyError(domain)

    @property
    def feature_columns(self) -> list[str]:
        return [c for d in DOMAINS for c in self.columns(d)]


@dataclass
class PatientRecord:
    patient_id: str
    site_id: int
    region: str
    diagnosis: np.ndarray
    drugs: np.ndarray
    physio: np.ndarray
    mortality: int
    planted_group: int | None = None


@dataclass
class SiteDataset:
    """All patients of one site, stored column-wise (one matrix per domain)."""

    site_id: int | None
    region: str | None
    patient_ids: list
    diagnosis: np.ndarray
    drugs: np.ndarray
    physio: np.ndarray
    mortality: np.ndarray
    planted_group: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.patient_ids)
        for name in ("diagnosis", "drugs", "physio"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise ValidationError(f"{name} matrix has shape {arr.shape}, expected {n} rows")
        self.mortality = np.asarray(self.mortality, dtype=np.int64)
        if self.mortality.shape != (n,) or np.any((self.mortality != 0) & (self.mortality != 1)):
            raise ValidationError("mortality must be a 0/1 vector with one entry per patient")
        if self.region is not None and self.region not in REGIONS:
            raise ValidationError(f"unknown region {self.region!r}")

    def __len__(self) -> int:
        return len(self.patient_ids)

    def domain(self, name: str) -> np.ndarray:
        return {"diagnosis": self.diagnosis, "drug": self.drugs, "physio": self.physio}[name]

    @property
    def features(self) -> np.ndarray:
        return np.hstack([self.diagnosis, self.drugs, self.physio])

    @property
    def records(self) -> list[PatientRecord]:
        groups = self.planted_group if self.planted_group is not None else [None] * len(self)
        return [PatientRecord(pid, self.site_id, self.region, self.diagnosis[i], self.drugs[i], self.physio[i],
                              int(self.mortality[i]), None if g is None else int(g))
                for i, (pid, g) in enumerate(zip(self.patient_ids, groups))]

    def subset(self, idx) -> "SiteDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, patient_ids=[self.patient_ids[i] for i in idx], diagnosis=self.diagnosis[idx],
                       drugs=self.drugs[idx], physio=self.physio[idx], mortality=self.mortality[idx],
                       planted_group=None if self.planted_group is None else self.planted_group[idx])

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord], schema: FeatureSchema) -> "SiteDataset":
        if not records:
            return cls.empty(schema)
        groups = [r.planted_group for r in records]
        return cls(records[0].site_id, records[0].region, [r.patient_id for r in records],
                   np.array([r.diagnosis for r in records], dtype=np.float64),
                   np.array([r.drugs for r in records], dtype=np.float64),
                   np.array([r.physio for r in records], dtype=np.float64),
                   np.array([r.mortality for r in records]),
                   None if any(g is None for g in groups) else np.array(groups))

    @classmethod
    def empty(cls, schema: FeatureSchema, site_id=None, region=None) -> "SiteDataset":
        return cls(site_id, region, [], np.zeros((0, schema.n_diagnosis)), np.zeros((0, schema.n_drugs)),
                   np.zeros((0, schema.n_physio)), np.zeros(0, dtype=np.int64))


@dataclass
class CohortConfig:
    n_sites: int = 20
    patients_per_site: int = 250
    n_planted_groups: int = 3
    site_group_mixing: float = 0.5
    mortality_base_rates: tuple | None = None
    risk_slope: float = 2.5
    physio_separation: float = 3.0
    modifier_effect: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n_sites < 1 or self.patients_per_site < 1:
            raise ValidationError("need at least one site and one patient per site")
        if self.n_planted_groups < 1:
            raise ValidationError("n_planted_groups must be at least 1")
        if not self.site_group_mixing > 0:
            raise ValidationError("site_group_mixing must be positive")
        if self.mortality_base_rates is None:
            g = self.n_planted_groups
            self.mortality_base_rates = tuple([0.2] if g == 1 else np.linspace(0.15, 0.25, g).round(6).tolist())
        self.mortality_base_rates = tuple(float(r) for r in self.mortality_base_rates)
        if len(self.mortality_base_rates) != self.n_planted_groups:
            raise ValidationError("need one mortality base rate per planted group")
        if not all(0.0 < r < 1.0 for r in self.mortality_base_rates):
            raise ValidationError("mortality base rates must lie in (0, 1)")


@dataclass
class SplitIndex:
    train: np.ndarray
    test: np.ndarray
    ratio: float
    seed: int


# -- synthetic generation ---------------------------------------------------

def _logit_offset(rate: float, slope: float, shifts=(0.0,), shift_probs=(1.0,)) -> float:
    """Intercept a with E[sigmoid(a + slope * Z + D)] = rate, Z ~ N(0, 1) and
    D a discrete shift taking ``shifts`` with probabilities ``shift_probs``."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    weights = weights / weights.sum()
    shifts = np.asarray(shifts, dtype=np.float64)[:, None]
    probs = np.asarray(shift_probs, dtype=np.float64)[:, None]

    def mean_rate(a):
        return float(np.sum(probs * weights / (1.0 + np.exp(-(a + slope * nodes + shifts))))) - rate

    return brentq(mean_rate, -50.0, 50.0, xtol=1e-12)


def _group_prototypes(config: CohortConfig, n_physio: int) -> np.ndarray:
    """Per-group physio means in z units, pairwise >= 2 sd apart somewhere."""
    g = config.n_planted_groups
    rng = rng_for(config.seed, "cohort", "prototypes")
    if g == 1:
        return np.zeros((1, n_physio))
    for _ in range(1000):
        mu = config.physio_separation * rng.choice([-0.5, 0.0, 0.5], size=(g, n_physio))
        gaps = [np.max(np.abs(mu[a] - mu[b])) for a in range(g) for b in range(a + 1, g)]
        if min(gaps) >= min(2.0, config.physio_separation):
            return mu
    raise ValidationError("could not separate the planted groups; increase physio_separation")


def _risk_directions(g: int, n_physio: int) -> np.ndarray:
    # unit directions at evenly spaced angles in a plane spanned by two sign
    # patterns over all physio features: the group effects cancel in a pooled
    # linear model, and every feature carries part of each direction
    u = np.where(np.arange(n_physio) < (n_physio + 1) // 2, 1.0, -1.0)
    v = np.where(np.arange(n_physio) % 2 == 0, 1.0, -1.0)
    u /= np.linalg.norm(u)
    v -= (v @ u) * u
    v = v / np.linalg.norm(v) if np.linalg.norm(v) > 1e-12 else np.zeros(n_physio)
    angles = 2.0 * np.pi * np.arange(g) / g
    dirs = np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * v
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _code_sets(rng, n_features: int, g: int, size: int, n_shared: int) -> tuple[list[np.ndarray], np.ndarray]:
    # disjoint hallmark sets per group whenever the schema is wide enough,
    # plus shared codes drawn from what is left
    perm = rng.permutation(n_features)
    size = max(1, min(size, n_features // g if n_features >= g else 1))
    hallmark = [np.sort(perm[(k * size) % n_features:(k * size) % n_features + size]) for k in range(g)]
    rest = perm[g * size:]
    return hallmark, np.sort(rest[:min(n_shared, len(rest))])


def _modifier_effects(g: int, n_codes: int, strength: float) -> np.ndarray:
    # log-odds effect of each shared code per group; the effects of a code sum
    # to zero over the groups, so they cancel in a pooled model
    if g == 1 or n_codes == 0:
        return np.zeros((g, n_codes))
    phase = 2.0 * np.pi * (np.arange(g)[:, None] / g + np.arange(n_codes)[None, :] / max(n_codes, 1))
    return strength * np.cos(phase)


def _sparse_counts(rng, n_features: int, codes: np.ndarray, p_carry: float) -> np.ndarray:
    # a group's hallmark codes, each carried by nearly every member; only the
    # counts vary between patients. 1 + NB(4, 0.7) has variance above its mean.
    row = np.zeros(n_features)
    carried = codes[rng.random(len(codes)) < p_carry]
    row[carried] = 1 + rng.negative_binomial(4, 0.7, size=len(carried))
    return row


def generate_synthetic(config: CohortConfig | None = None, schema: FeatureSchema | None = None) -> list[SiteDataset]:
    """Non-IID multi-site cohort with planted severity groups.

    Every site draws its group mixture from a symmetric Dirichlet; each
    patient then draws a group, group-specific physio values, sparse
    overdispersed diagnosis/drug counts concentrated on the group's
    signature codes, and a mortality label whose log-odds depend on the
    group's base rate plus a group-specific physio risk direction.
    """
    config = config or CohortConfig()
    schema = schema or FeatureSchema()
    g = config.n_planted_groups
    mu = _group_prototypes(config, schema.n_physio)
    risk = _risk_directions(g, schema.n_physio)
    pool_rng = rng_for(config.seed, "cohort", "pools")
    dx_codes, _ = _code_sets(pool_rng, schema.n_diagnosis, g, 12, 0)
    drug_codes, modifiers = _code_sets(pool_rng, schema.n_drugs, g, 16, MODIFIER_CODES)
    effects = _modifier_effects(g, len(modifiers), config.modifier_effect)
    combos = np.array(list(itertools.product([0, 1], repeat=len(modifiers))), dtype=np.float64).reshape(-1, len(modifiers))
    combo_probs = np.prod(np.where(combos == 1, MODIFIER_RATE, 1.0 - MODIFIER_RATE), axis=1)
    offsets = [_logit_offset(rate, config.risk_slope, combos @ effects[k], combo_probs)
               for k, rate in enumerate(config.mortality_base_rates)]
    units = np.array([PHYSIO_UNITS[i] if i < len(PHYSIO_UNITS) else (0.0, 1.0) for i in range(schema.n_physio)])
    region_rng = rng_for(config.seed, "cohort", "regions")
    regions = [REGIONS[i] for i in region_rng.integers(len(REGIONS), size=config.n_sites)]

    sites = []
    for s in range(config.n_sites):
        rng = rng_for(config.seed, "cohort", "site", s)
        mix = rng.dirichlet(np.full(g, config.site_group_mixing))
        n = config.patients_per_site
        groups = rng.choice(g, size=n, p=mix)
        z = mu[groups] + rng.standard_normal((n, schema.n_physio))
        physio = units[:, 0] + units[:, 1] * z
        severity = np.einsum("ij,ij->i", z - mu[groups], risk[groups])
        carry = rng.random((n, len(modifiers))) < MODIFIER_RATE
        logits = (np.array(offsets)[groups] + config.risk_slope * severity
                  + np.einsum("ij,ij->i", carry, effects[groups]))
        mortality = (rng.random(n) < 1.0 / (1.0 + np.exp(-logits))).astype(np.int64)
        dx = np.zeros((n, schema.n_diagnosis))
        drugs = np.zeros((n, schema.n_drugs))
        for i in range(n):
            k = groups[i]
            dx[i] = _sparse_counts(rng, schema.n_diagnosis, dx_codes[k], 0.97)
            drugs[i] = _sparse_counts(rng, schema.n_drugs, drug_codes[k], 0.97)
            drugs[i, modifiers[carry[i]]] = 1.0
        ids = [f"S{s:02d}-P{i:04d}" for i in range(n)]
        sites.append(SiteDataset(s, regions[s], ids, dx, drugs, physio, mortality, groups.astype(np.int64)))
    return sites


# -- CSV -------------------------------------------------------------------

META_COLUMNS = ("patient_id", "site_id", "region", "mortality")


def write_csv(site: SiteDataset, path, schema: FeatureSchema, include_groups: bool = True):
    header = list(META_COLUMNS)
    with_groups = include_groups and site.planted_group is not None
    if with_groups:
        header.append("planted_group")
    header += schema.feature_columns
    feats = site.features
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, pid in enumerate(site.patient_ids):
            row = [pid, site.site_id, site.region, int(site.mortality[i])]
            if with_groups:
                row.append(int(site.planted_group[i]))
            row += [repr(float(v)) if v != int(v) else str(int(v)) for v in feats[i]]
            writer.writerow(row)


def _parse_number(path, row, col, text, count: bool) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(path, row, col, f"non-numeric value {text!r}") from None
    if not np.isfinite(value):
        raise ParseError(path, row, col, f"non-finite value {text!r}")
    if count and (value < 0 or value != int(value)):
        raise ParseError(path, row, col, f"count must be a non-negative integer, got {text!r}")
    return value


def _ingest_one(path: Path, schema: FeatureSchema) -> SiteDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 0, None, "missing header row") from None
        position = {name: i for i, name in enumerate(header)}
        for name in ("site_id", "region", "mortality", *schema.feature_columns):
            if name not in position:
                raise ParseError(path, 1, name, "missing column")
        count_cols = set(schema.columns("diagnosis")) | set(schema.columns("drug"))
        feature_cols = schema.feature_columns
        records = []
        site_id = region = None
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(path, rownum, None, f"expected {len(header)} cells, found {len(row)}")
            try:
                sid = int(row[position["site_id"]])
            except ValueError:
                raise ParseError(path, rownum, "site_id", f"non-integer site id {row[position['site_id']]!r}") from None
            reg = row[position["region"]]
            if reg not in REGIONS:
                raise ParseError(path, rownum, "region", f"unknown region {reg!r}")
            if site_id is None:
                site_id, region = sid, reg
            elif sid != site_id or reg != region:
                raise ParseError(path, rownum, "site_id", "all rows of a site file must share site_id and region")
            mort = row[position["mortality"]]
            if mort not in ("0", "1"):
                raise ParseError(path, rownum, "mortality", f"mortality must be 0 or 1, got {mort!r}")
            values = np.array([_parse_number(path, rownum, c, row[position[c]], c in count_cols) for c in feature_cols])
            pid = row[position["patient_id"]] if "patient_id" in position else f"{sid}-{rownum - 2}"
            group = None
            if "planted_group" in position and row[position["planted_group"]] != "":
                group = int(_parse_number(path, rownum, "planted_group", row[position["planted_group"]], True))
            nd, nr = schema.n_diagnosis, schema.n_drugs
            records.append(PatientRecord(pid, sid, reg, values[:nd], values[nd:nd + nr], values[nd + nr:],
                                         int(mort), group))
    return SiteDataset.from_records(records, schema)


def ingest_csv(paths: Iterable, schema: FeatureSchema | None = None) -> list[SiteDataset]:
    """One CSV per site; row order is preserved."""
    schema = schema or FeatureSchema()
    return [_ingest_one(Path(p), schema) for p in paths]


# -- normalization -----------------------------------------------------------

@dataclass
class MinMaxTable:
    columns: list
    minimum: np.ndarray
    maximum: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        span = self.maximum - self.minimum
        out = np.zeros_like(x, dtype=np.float64)
        nz = span > 0
        out[:, nz] = (x[:, nz] - self.minimum[nz]) / span[nz]
        return out

    def to_json(self) -> str:
        return json.dumps({"columns": self.columns, "min": [float(v) for v in self.minimum],
                           "max": [float(v) for v in self.maximum]})

    @classmethod
    def from_json(cls, text: str) -> "MinMaxTable":
        d = json.loads(text)
        return cls(d["columns"], np.array(d["min"], dtype=np.float64), np.array(d["max"], dtype=np.float64))


def _with_features(site: SiteDataset, feats: np.ndarray, schema_widths: Sequence[int]) -> SiteDataset:
    nd, nr, _ = schema_widths
    return replace(site, diagnosis=feats[:, :nd], drugs=feats[:, nd:nd + nr], physio=feats[:, nd + nr:])


def normalize_01(sites: Sequence[SiteDataset], bus: Bus | None = None,
                 schema: FeatureSchema | None = None) -> tuple[list[SiteDataset], MinMaxTable]:
    """Global 0-1 scaling from a min/max-only exchange.

    Each site reveals just its per-feature extremes; the coordinator combines
    them and the sites rescale locally. Constant features map to 0.
    """
    if sum(len(s) for s in sites) == 0:
        raise ValidationError("normalization needs at least one record")
    ref = next(s for s in sites if len(s))
    widths = (ref.diagnosis.shape[1], ref.drugs.shape[1], ref.physio.shape[1])
    lows, highs = [], []
    for site in sites:
        if not len(site):
            continue
        feats = site.features
        extremes = np.vstack([feats.min(axis=0), feats.max(axis=0)])
        if bus is not None:
            extremes = bus.send(site_name(site.site_id), COORDINATOR, MessageKind.FEATURE_EXTREMES, extremes, "minmax")
        lows.append(extremes[0])
        highs.append(extremes[1])
    columns = (schema or FeatureSchema(*widths)).feature_columns
    table = MinMaxTable(columns, np.min(lows, axis=0), np.max(highs, axis=0))
    out = []
    for site in sites:
        if bus is not None and len(site):
            bus.send(COORDINATOR, site_name(site.site_id), MessageKind.FEATURE_EXTREMES,
                     np.vstack([table.minimum, table.maximum]), "global_minmax")
        out.append(_with_features(site, table.apply(site.features), widths) if len(site) else site)
    return out, table


# -- splitting ---------------------------------------------------------------

def split_positions(n: int, ratio: float = 0.7, seed: int = 0, site_id=None) -> SplitIndex:
    """Uniformly random train/test partition of ``n`` row positions."""
    if not 0.0 < ratio < 1.0:
        raise SplitError(f"ratio must lie in (0, 1), got {ratio}")
    if n < 2:
        raise SplitError(f"site {site_id} has {n} patients; at least 2 are needed to split")
    n_train = min(max(int(round(ratio * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return SplitIndex(np.sort(perm[:n_train]), np.sort(perm[n_train:]), ratio, seed)


def split(site: SiteDataset, ratio: float = 0.7, seed: int = 0) -> SplitIndex:
    """Uniformly random train/test partition of one site's patients (positions)."""
    return split_positions(len(site), ratio, seed, site.site_id)
