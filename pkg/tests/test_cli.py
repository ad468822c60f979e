import csv
import json

import numpy as np
import pytest
import yaml

from pcbfl.cli import EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_OK, main
from pcbfl.config import BUILTIN, ConfigError, from_dict, load
from pcbfl.smpc import SimilarityMatrix


def test_builtin_configs_validate():
    for name in BUILTIN:
        load(name)
    assert load("desk").train.rounds == 5 and load("default").evaluation.repetitions == 100


def test_unknown_keys_report_full_path():
    with pytest.raises(ConfigError, match="unknown key train.epochz"):
        from_dict({"train": {"epochz": 3}})
    with pytest.raises(ConfigError, match="train.rounds"):
        from_dict({"train": {"rounds": "many"}})
    with pytest.raises(ConfigError, match="evaluation.regimes"):
        from_dict({"evaluation": {"regimes": ["magic"]}})


def test_yaml_round_trip(tmp_path):
    cfg = load("quick")
    path = tmp_path / "c.yaml"
    path.write_text(cfg.to_yaml())
    assert load(str(path)) == cfg
    assert cfg.digest("cohort") == load(str(path)).digest("cohort")


@pytest.fixture(scope="module")
def quick_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("quick")
    assert main(["pipeline", "--config", "quick", "--output-dir", str(out)]) == EXIT_OK
    return out


def test_pipeline_outputs(quick_run):
    for rel in ("data/site_000.csv", "embed/embeddings.csv", "embed/ae_drug.pcbm", "similarity/S.bin",
                "cluster/assignment.csv", "cluster/wcss_curve.csv", "train/predictions.csv",
                "evaluate/globals.csv", "evaluate/summary.json", "config.resolved.yaml", "bus_audit.json"):
        assert (quick_run / rel).exists(), rel
    with open(quick_run / "train" / "predictions.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert set(rows[0]) == {"patient_id", "site_id", "cluster", "y_true", "y_prob", "regime", "seed"}
    assert {r["regime"] for r in rows} == set(load("quick").evaluation.regimes)
    resolved = yaml.safe_load((quick_run / "config.resolved.yaml").read_text())
    assert resolved["cohort"]["n_sites"] == 4


def test_resume_skips_current_stages(quick_run, caplog):
    before = (quick_run / "evaluate" / "globals.csv").stat().st_mtime_ns
    assert main(["pipeline", "--config", "quick", "--output-dir", str(quick_run), "--resume"]) == EXIT_OK
    assert (quick_run / "evaluate" / "globals.csv").stat().st_mtime_ns == before


def test_plaintext_oracle_and_fixed_k(quick_run):
    assert main(["similarity", "--config", "quick", "--output-dir", str(quick_run), "--plaintext-oracle"]) == 0
    summary = json.loads((quick_run / "similarity" / "similarity.json").read_text())
    assert summary["rmse"] < 1e-9
    secure = SimilarityMatrix.load(quick_run / "similarity" / "S.bin", quick_run / "similarity" / "registry.json")
    assert np.allclose(secure.S, secure.S.T)
    assert main(["cluster", "--config", "quick", "--output-dir", str(quick_run), "--k", "2"]) == 0
    assert json.loads((quick_run / "cluster" / "cluster.json").read_text())["k"] == 2


def test_exit_codes(tmp_path):
    assert main(["cluster", "--config", "quick", "--output-dir", str(tmp_path / "empty")]) == EXIT_DEPENDENCY
    assert main(["embed", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("cohort:\n  n_sitez: 3\n")
    assert main(["gen-data", "--config", str(bad)]) == EXIT_CONFIG
