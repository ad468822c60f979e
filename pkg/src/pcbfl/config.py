"""Experiment configuration: nested dataclasses loaded from YAML.

Unknown keys are rejected with their full key path, and every run writes the
resolved configuration next to its outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .predict import REGIMES


class ConfigError(ValueError):
    pass


@dataclass
class CohortSection:
    source: str = "synthetic"  # or "csv"
    csv_paths: list = field(default_factory=list)
    n_sites: int = 20
    patients_per_site: int = 250
    n_planted_groups: int = 3
    site_group_mixing: float = 0.5
    mortality_base_rates: list | None = None
    risk_slope: float = 2.5
    physio_separation: float = 3.0
    modifier_effect: float = 3.0
    seed: int | None = None  # None: the root seed


@dataclass
class SchemaSection:
    n_diagnosis: int = 483
    n_drugs: int = 1056
    n_physio: int = 10


@dataclass
class PlanSection:
    rounds: int = 20
    local_epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3


@dataclass
class EmbedSection(PlanSection):
    hidden: list = field(default_factory=lambda: [128, 64])
    latent: int = 16
    corruption: float = 0.3


@dataclass
class ClusteringSection:
    k_max: int = 10
    fixed_k: int | None = None


@dataclass
class TrainSection(PlanSection):
    split_ratio: float = 0.7
    central_epochs: int = 200
    head_hidden: int = 32
    classifier_hidden: int = 16
    cbfl_assignment: str = "nearest"  # or "site"


@dataclass
class EvaluationSection:
    regimes: list = field(default_factory=lambda: list(REGIMES))
    repetitions: int = 100
    bootstrap: int = 1000


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    workers: int = 1
    cohort: CohortSection = field(default_factory=CohortSection)
    schema: SchemaSection = field(default_factory=SchemaSection)
    embed: EmbedSection = field(default_factory=EmbedSection)
    clustering: ClusteringSection = field(default_factory=ClusteringSection)
    train: TrainSection = field(default_factory=TrainSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self, *sections: str) -> str:
        """Hash of the given sections (all when none), used to decide whether
        a stage's outputs are still valid under --resume."""
        d = self.to_dict()
        picked = {k: d[k] for k in sections} if sections else d
        return hashlib.sha256(yaml.safe_dump(picked, sort_keys=True).encode()).hexdigest()


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key {'.'.join(filter(None, [path, unknown[0]]))}")
    kwargs = {}
    for name, value in data.items():
        key = ".".join(filter(None, [path, name]))
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key)
        else:
            kwargs[name] = _coerce(default, value, key)
    return cls(**kwargs)


def _coerce(default, value, key):
    if value is None:
        return None
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"{key}: booleans are not accepted here")
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{key}: expected a list, got {value!r}")
    return value


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    checks = [
        (cfg.workers >= 1, "workers", "must be at least 1"),
        (cfg.cohort.source in ("synthetic", "csv"), "cohort.source", "must be 'synthetic' or 'csv'"),
        (cfg.cohort.source != "csv" or cfg.cohort.csv_paths, "cohort.csv_paths", "needs at least one file"),
        (cfg.clustering.k_max >= 3, "clustering.k_max", "the elbow needs at least 3 points"),
        (cfg.clustering.fixed_k is None or cfg.clustering.fixed_k >= 1, "clustering.fixed_k", "must be positive"),
        (0.0 < cfg.train.split_ratio < 1.0, "train.split_ratio", "must lie in (0, 1)"),
        (cfg.train.cbfl_assignment in ("nearest", "site"), "train.cbfl_assignment", "must be 'nearest' or 'site'"),
        (cfg.evaluation.repetitions >= 1, "evaluation.repetitions", "must be at least 1"),
        (cfg.evaluation.bootstrap >= 0, "evaluation.bootstrap", "must be non-negative"),
        (len(cfg.embed.hidden) == 2, "embed.hidden", "needs exactly two widths"),
        (cfg.embed.latent >= 1, "embed.latent", "must be positive"),
    ]
    for ok, key, msg in checks:
        if not ok:
            raise ConfigError(f"{key}: {msg}")
    bad = [r for r in cfg.evaluation.regimes if r not in REGIMES]
    if bad:
        raise ConfigError(f"evaluation.regimes: unknown regime {bad[0]!r}")
    for section in ("embed", "train"):
        plan = getattr(cfg, section)
        if plan.rounds < 0 or plan.local_epochs < 1 or plan.batch_size < 1 or plan.lr <= 0:
            raise ConfigError(f"{section}: invalid round plan")
    return cfg


def from_dict(data: dict) -> ExperimentConfig:
    return validate(_build(ExperimentConfig, data or {}, ""))


# Built-in configurations. "default" is the full-budget run; "desk" is the
# reduced-round comparison; "quick" is a small smoke configuration.
BUILTIN = {
    "default": {},
    "desk": {
        "output_dir": "runs/desk",
        "train": {"rounds": 5, "local_epochs": 5},
        "evaluation": {"regimes": ["single_site", "fedavg", "cbfl", "pcbfl"]},
    },
    "quick": {
        "output_dir": "runs/quick",
        "cohort": {"n_sites": 4, "patients_per_site": 60},
        "schema": {"n_diagnosis": 40, "n_drugs": 60, "n_physio": 10},
        "embed": {"rounds": 2, "local_epochs": 2, "hidden": [16, 8], "latent": 4},
        "clustering": {"k_max": 6},
        "train": {"rounds": 2, "local_epochs": 2, "central_epochs": 4},
        "evaluation": {"repetitions": 2, "bootstrap": 50},
    },
}


def load(name_or_path: str) -> ExperimentConfig:
    """A built-in name or a YAML file path."""
    if name_or_path in BUILTIN:
        return from_dict(BUILTIN[name_or_path])
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"no built-in config or file named {name_or_path!r}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)
