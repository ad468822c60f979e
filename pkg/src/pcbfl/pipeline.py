"""Pipeline stages over an output directory.

gen-data -> embed -> similarity -> cluster -> train -> evaluate. Each stage
reads its inputs from files written by earlier stages, records the hashes of
its outputs in ``manifest.json`` and can be skipped on resume when the
relevant configuration and its outputs are unchanged.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from . import cluster as cl
from .cohort import (DOMAINS, PHYSIO_NAMES, REGIONS, CohortConfig, FeatureSchema, MinMaxTable, generate_synthetic,
                     ingest_csv, normalize_01, write_csv)
from .config import ExperimentConfig
from .embed import AutoencoderSpec, embed_patients, read_embeddings_csv, train_autoencoders, write_embeddings_csv
from .experiment import (HarnessConfig, SiteArrays, best_regime_counts, cell_table, comparison_table,
                         global_table, run_repetitions, site_table, summarize, wins, write_rows_csv)
from .fedsim import COORDINATOR, Bus, MessageKind, RoundPlan, site_name, write_trace_csv
from .nn import Snapshot
from .predict import cbfl_assign
from .smpc import SimilarityMatrix, assemble_similarity, audit_bus, plaintext_similarity
from .stats import characterize_clusters

log = logging.getLogger("pcbfl")

STAGES = ("gen-data", "embed", "similarity", "cluster", "train", "evaluate")

# config sections each stage depends on, cumulatively
_DEPENDS = {
    "gen-data": ("seed", "cohort", "schema"),
    "embed": ("embed",),
    "similarity": (),
    "cluster": ("clustering",),
    "train": ("train", "evaluation"),
    "evaluate": (),
}


class StageDependencyError(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_digest(cfg: ExperimentConfig, stage: str) -> str:
    sections = []
    for s in STAGES[:STAGES.index(stage) + 1]:
        sections += _DEPENDS[s]
    d = cfg.to_dict()
    return hashlib.sha256(json.dumps({k: d[k] for k in sections}, sort_keys=True).encode()).hexdigest()


class Run:
    """One output directory plus its manifest and message bus."""

    def __init__(self, cfg: ExperimentConfig, out_dir=None, workers: int | None = None):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.output_dir)
        self.workers = workers or cfg.workers
        self.bus = Bus()
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.resolved.yaml").write_text(cfg.to_yaml())

    # -- manifest ---------------------------------------------------------------

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {}

    def record(self, stage: str, files):
        m = self.manifest()
        m[stage] = {"config_digest": stage_digest(self.cfg, stage),
                    "outputs": {str(Path(f).relative_to(self.out)): sha256_file(f) for f in sorted(map(str, files))}}
        self.manifest_path.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")

    def is_current(self, stage: str) -> bool:
        entry = self.manifest().get(stage)
        if not entry or entry["config_digest"] != stage_digest(self.cfg, stage):
            return False
        return all((self.out / rel).exists() and sha256_file(self.out / rel) == h
                   for rel, h in entry["outputs"].items())

    def need(self, *rel) -> Path:
        path = self.out.joinpath(*rel)
        if not path.exists():
            raise StageDependencyError(f"missing upstream artifact {path}")
        return path

    def dir(self, name: str) -> Path:
        d = self.out / name
        d.mkdir(exist_ok=True)
        return d

    # -- shared loaders -----------------------------------------------------------

    @property
    def schema(self) -> FeatureSchema:
        s = self.cfg.schema
        return FeatureSchema(s.n_diagnosis, s.n_drugs, s.n_physio)

    def raw_sites(self):
        files = sorted(self.need("data").glob("site_*.csv"))
        if not files:
            raise StageDependencyError(f"no site CSV files under {self.out / 'data'}")
        return ingest_csv(files, self.schema)

    def normalized_sites(self):
        sites = self.raw_sites()
        table = MinMaxTable.from_json(self.need("embed", "minmax.json").read_text())
        out, check = normalize_01(sites, schema=self.schema)
        if not (np.array_equal(check.minimum, table.minimum) and np.array_equal(check.maximum, table.maximum)):
            raise StageDependencyError("data/ no longer matches embed/minmax.json; re-run the embed stage")
        return out

    def site_embeddings(self) -> dict:
        return {e.site_id: e for e in read_embeddings_csv(self.need("embed", "embeddings.csv"))}


# -- stages ---------------------------------------------------------------------

def stage_gen_data(run: Run) -> list:
    c = run.cfg.cohort
    out = run.dir("data")
    for old in out.glob("site_*.csv"):
        old.unlink()
    if c.source == "synthetic":
        fields = {k: v for k, v in vars(c).items() if k not in ("source", "csv_paths", "seed")}
        if fields["mortality_base_rates"] is not None:
            fields["mortality_base_rates"] = tuple(fields["mortality_base_rates"])
        cohort = CohortConfig(**fields, seed=run.cfg.seed if c.seed is None else c.seed)
        sites = generate_synthetic(cohort, run.schema)
    else:
        sites = ingest_csv(c.csv_paths, run.schema)
    files = []
    for site in sites:
        path = out / f"site_{site.site_id:03d}.csv"
        write_csv(site, path, run.schema)
        files.append(path)
    log.info("gen-data: %d sites, %d patients", len(sites), sum(len(s) for s in sites))
    return files


def stage_embed(run: Run) -> list:
    e = run.cfg.embed
    sites = run.raw_sites()
    norm, table = normalize_01(sites, bus=run.bus, schema=run.schema)
    out = run.dir("embed")
    (out / "minmax.json").write_text(table.to_json())
    specs = {d: AutoencoderSpec(d, run.schema.widths[d], tuple(e.hidden), e.latent, e.corruption) for d in DOMAINS}
    plan = RoundPlan(e.rounds, e.local_epochs, e.batch_size)
    aes = train_autoencoders({s.site_id: {d: s.domain(d) for d in DOMAINS} for s in norm}, specs, plan,
                             seed=run.cfg.seed, lr=e.lr, bus=run.bus, workers=run.workers)
    files = [out / "minmax.json"]
    for d, ae in aes.items():
        Snapshot([ae.spec.layout], ae.params, {"domain": d, "kind": "autoencoder"}).save(out / f"ae_{d}.pcbm")
        write_trace_csv(out / f"trace_{d}.csv", ae.trace)
        files += [out / f"ae_{d}.pcbm", out / f"trace_{d}.csv"]
    embs = [embed_patients(s.site_id, s.patient_ids, {d: s.domain(d) for d in DOMAINS}, aes) for s in norm]
    write_embeddings_csv(out / "embeddings.csv", embs)
    files.append(out / "embeddings.csv")
    log.info("embed: %d-dim embeddings for %d patients", embs[0].dim, sum(len(x.patient_ids) for x in embs))
    return files


def stage_similarity(run: Run, plaintext_oracle: bool = False) -> list:
    embs = list(run.site_embeddings().values())
    sim, n_masks = assemble_similarity(embs, seed=run.cfg.seed, bus=run.bus, workers=run.workers)
    audit_bus(run.bus)
    out = run.dir("similarity")
    sim.save(out / "S.bin", out / "registry.json")
    files = [out / "S.bin", out / "registry.json"]
    info = {"patients": sim.size, "masks": n_masks}
    if plaintext_oracle:
        oracle = plaintext_similarity(embs)
        oracle.save(out / "S_oracle.bin", out / "registry_oracle.json")
        iu = np.triu_indices(sim.size, 1)
        diff = sim.S[iu] - oracle.S[iu]
        info["rmse"] = float(np.sqrt(np.mean(diff ** 2))) if diff.size else 0.0
        info["max_abs_error"] = float(np.max(np.abs(diff))) if diff.size else 0.0
        pick = np.random.default_rng(run.cfg.seed).choice(diff.size, size=min(2000, diff.size), replace=False)
        with open(out / "similarity_sample.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "secure", "plaintext"])
            for p in np.sort(pick):
                i, j = int(iu[0][p]), int(iu[1][p])
                w.writerow([i, j, repr(float(sim.S[i, j])), repr(float(oracle.S[i, j]))])
        files += [out / "S_oracle.bin", out / "registry_oracle.json", out / "similarity_sample.csv"]
        log.info("similarity: secure vs plaintext RMSE %.3e", info["rmse"])
    (out / "similarity.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    files.append(out / "similarity.json")
    return files


def _load_similarity(run: Run) -> SimilarityMatrix:
    try:
        return SimilarityMatrix.load(run.need("similarity", "S.bin"), run.need("similarity", "registry.json"))
    except ValueError as exc:
        raise StageDependencyError(str(exc)) from exc


def stage_cluster(run: Run, fixed_k: int | None = None) -> list:
    c = run.cfg.clustering
    sim = _load_similarity(run)
    curve, assignments = cl.wcss_curve(sim.S, c.k_max, seed=run.cfg.seed, workers=run.workers)
    k_elbow = cl.elbow(curve)
    k = fixed_k or c.fixed_k or k_elbow
    assignment = assignments[k] if k in assignments else cl.spectral_cluster(sim.S, k, seed=run.cfg.seed)[0]
    out = run.dir("cluster")
    cl.write_curve_csv(out / "wcss_curve.csv", curve)
    cl.write_assignment_csv(out / "assignment.csv", sim.registry, assignment)
    # cluster labels go back to the sites over the bus
    for sid, sl in sim.site_slices().items():
        run.bus.send(COORDINATOR, site_name(sid), MessageKind.CLUSTER_LABELS, assignment.labels[sl], "labels")
    summary = {"k": int(k), "k_elbow": int(k_elbow), "sizes": assignment.sizes().tolist()}

    sites = {s.site_id: s for s in run.raw_sites()}
    order = [(sid, row) for sid, row, _ in sim.registry]
    physio = np.array([sites[sid].physio[row] for sid, row in order])
    regions = [sites[sid].region for sid, _ in order]
    planted = [sites[sid].planted_group[row] for sid, row in order if sites[sid].planted_group is not None]
    if len(planted) == len(order):
        summary["ari_vs_planted"] = cl.adjusted_rand_index(planted, assignment.labels)
    with open(out / "cluster_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["test", "feature"] + [f"mean_c{j}" for j in range(k)] + ["statistic", "p_value", "significant"])
        if k > 1:
            names = list(PHYSIO_NAMES) if physio.shape[1] == len(PHYSIO_NAMES) else [
                f"physio_{j}" for j in range(physio.shape[1])]
            st = characterize_clusters(physio, assignment.labels, names, regions, REGIONS)
            for j, name in enumerate(st.features):
                w.writerow(["anova", name] + [repr(float(v)) for v in st.cluster_means[j]]
                           + [repr(float(st.f_stats[j])), repr(float(st.f_pvalues[j])), bool(st.significant[j])])
            if st.chi2_stat is not None:
                w.writerow(["chi2", "region"] + [""] * k + [repr(st.chi2_stat), repr(st.chi2_pvalue),
                                                             bool(st.chi2_pvalue < st.alpha)])
    (out / "cluster.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("cluster: elbow k=%d, using k=%d, sizes %s", k_elbow, k, summary["sizes"])
    return [out / "wcss_curve.csv", out / "assignment.csv", out / "cluster_stats.csv", out / "cluster.json"]


def _aligned(labels_by_pid: dict, site) -> np.ndarray:
    try:
        return np.array([labels_by_pid[pid] for pid in site.patient_ids], dtype=np.int64)
    except KeyError as exc:
        raise StageDependencyError(f"patient {exc.args[0]} of site {site.site_id} has no cluster assignment") from exc


def harness_config(cfg: ExperimentConfig) -> HarnessConfig:
    t = cfg.train
    return HarnessConfig(RoundPlan(t.rounds, t.local_epochs, t.batch_size), tuple(cfg.evaluation.regimes),
                         t.split_ratio, t.central_epochs, t.lr, t.head_hidden, t.classifier_hidden)


def stage_train(run: Run) -> list:
    cfg = run.cfg
    sites = run.normalized_sites()
    arrays = [SiteArrays.from_dataset(s) for s in sites]
    assignments = {}
    if "pcbfl" in cfg.evaluation.regimes:
        labels = cl.read_assignment_csv(run.need("cluster", "assignment.csv"))
        assignments["pcbfl"] = {s.site_id: _aligned(labels, s) for s in sites}
    if "cbfl" in cfg.evaluation.regimes:
        k = json.loads(run.need("cluster", "cluster.json").read_text())["k"]
        embs = run.site_embeddings()
        by_site = {}
        for s in sites:
            e = embs[s.site_id]
            rows = {pid: i for i, pid in enumerate(e.patient_ids)}
            by_site[s.site_id] = e.values[[rows[pid] for pid in s.patient_ids]]
        assignments["cbfl"] = cbfl_assign(by_site, k, seed=cfg.seed, bus=run.bus, mode=cfg.train.cbfl_assignment)
    out = run.dir("train")
    if "cbfl" in assignments:
        with open(out / "cbfl_assignment.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "site_id", "cluster"])
            for s in sites:
                for pid, c in zip(s.patient_ids, assignments["cbfl"][s.site_id]):
                    w.writerow([pid, s.site_id, int(c)])
    rows = run_repetitions(arrays, assignments, harness_config(cfg), cfg.seed, cfg.evaluation.repetitions,
                           workers=run.workers)
    write_rows_csv(out / "predictions.csv", rows)
    files = [out / "predictions.csv"] + ([out / "cbfl_assignment.csv"] if "cbfl" in assignments else [])
    log.info("train: %d repetitions, %d prediction rows", cfg.evaluation.repetitions, len(rows))
    return files


def read_predictions(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({"patient_id": r["patient_id"], "site_id": int(r["site_id"]), "cluster": int(r["cluster"]),
                         "y_true": int(r["y_true"]), "y_prob": float(r["y_prob"]), "regime": r["regime"],
                         "seed": int(r["seed"])})
    return rows


def stage_evaluate(run: Run) -> list:
    rows = read_predictions(run.need("train", "predictions.csv"))
    cells = cell_table(rows)
    sites = site_table(cells)
    globals_ = global_table(cells)
    out = run.dir("evaluate")
    write_rows_csv(out / "cells.csv", cells)
    write_rows_csv(out / "sites.csv", sites)
    write_rows_csv(out / "globals.csv", globals_)
    summaries = summarize(globals_, run.cfg.evaluation.bootstrap or 1, seed=run.cfg.seed)
    reference = "pcbfl" if "pcbfl" in summaries else next(iter(summaries))
    table = comparison_table(summaries, reference)
    write_rows_csv(out / "comparison.csv", table)
    counts = {m: best_regime_counts(sites, m) for m in ("auc", "auprc")}
    with open(out / "best_regime.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "regime", "sites"])
        for m, cnt in counts.items():
            for regime, n in cnt.items():
                w.writerow([m, regime, n])
    summary = {"reference": reference,
               "wins": {other: dict(zip(("count", "of"), wins(globals_, reference, other)))
                        for other in summaries if other != reference}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for r in table:
        log.info("%-12s AUC %.4f  AUPRC %.4f", r["regime"], r["auc_mean"], r["auprc_mean"])
    return [out / n for n in ("cells.csv", "sites.csv", "globals.csv", "comparison.csv", "best_regime.csv",
                              "summary.json")]


def run_stage(run: Run, stage: str, resume: bool = False, **options) -> bool:
    """Run one stage; returns False when it was skipped on resume. Stage
    options (oracle, fixed k) always force a re-run."""
    options = {k: v for k, v in options.items() if v is not None and v is not False}
    if resume and not options and run.is_current(stage):
        log.info("%s: up to date, skipped", stage)
        return False
    fn = {"gen-data": stage_gen_data, "embed": stage_embed, "similarity": stage_similarity,
          "cluster": stage_cluster, "train": stage_train, "evaluate": stage_evaluate}[stage]
    run.record(stage, fn(run, **options))
    return True


def run_pipeline(run: Run, resume: bool = False):
    for stage in STAGES:
        run_stage(run, stage, resume=resume)
    bus_summary = {"messages": len(run.bus.log),
                   "tags": dict(sorted(run.bus.tags().items())),
                   "kinds_from_sites": sorted(k.value for k in run.bus.kinds_from_sites())}
    (run.out / "bus_audit.json").write_text(json.dumps(bus_summary, indent=2, sort_keys=True) + "\n")
    audit_bus(run.bus)
    return bus_summary
