"""End-to-end experiment stages and their on-disk artifacts.

Layout under the output directory::

    traces/{train,grid}/*.jsonl.gz     simulate
    features/                          extract (npz datasets, averaged CSVs, file counts)
    models/                            train
    results/                           evaluate, similarity, search
    report/                            report (copies + manifest of hashes)
    manifests/<stage>.json             one per stage: config hash, seeds, input/output hashes

A stage refuses to run until the stages it reads from have written their
manifest, and names the missing one in the error.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .analysis import (
    candidate_similarity_table,
    recall_bars_svg,
    recall_sweep,
    sample_similarity_table,
    similarity_heatmap_svg,
    write_recall_csv,
    write_sample_similarity_csv,
    write_similarity_csv,
)
from .candidates import CandidateConfig
from .config import ExperimentConfig
from .detector import load_model, save_model, train_ensemble
from .features import (
    FeatureMatrix,
    average_features,
    extract,
    load_dataset,
    read_feature_csv,
    save_dataset,
    write_feature_csv,
)
from .runs import derive_seed, parallel_map
from .search import CandidateRuns, score_candidates, select_optimal, selection_record, write_results_csv, write_selection_json
from .simulator import WorkloadSpec, candidate_grid, files_encrypted, simulate
from .trace import read_trace, write_trace

logger = logging.getLogger(__name__)

STAGES = ("simulate", "extract", "train", "evaluate", "similarity", "search", "report")
REQUIRES = {
    "simulate": (),
    "extract": ("simulate",),
    "train": ("extract",),
    "evaluate": ("train",),
    "similarity": ("extract",),
    "search": ("train",),
    "report": ("evaluate", "similarity", "search"),
}


class MissingArtifactError(RuntimeError):
    def __init__(self, stage: str, required: str, path: Path):
        self.stage = stage
        self.required = required
        self.path = path
        super().__init__(f"'{stage}' needs the output of '{required}' ({path} not found); run '{required}' first")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


@dataclass
class Context:
    cfg: ExperimentConfig

    @property
    def out(self) -> Path:
        return self.cfg.output_dir

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def manifest_path(self, stage: str) -> Path:
        return self.path("manifests", f"{stage}.json")

    def require(self, stage: str) -> None:
        for req in REQUIRES[stage]:
            p = self.manifest_path(req)
            if not p.exists():
                raise MissingArtifactError(stage, req, p)

    def rel(self, p: Path) -> str:
        return p.relative_to(self.out).as_posix()

    def write_manifest(self, stage: str, outputs: Sequence[Path], extra: Mapping[str, Any] | None = None) -> Path:
        inputs = {}
        for req in REQUIRES[stage]:
            mp = self.manifest_path(req)
            inputs[self.rel(mp)] = sha256_file(mp)
            for k, v in json.loads(mp.read_text())["outputs"].items():
                inputs[k] = v
        manifest = {
            "stage": stage,
            "config_hash": self.cfg.config_hash,
            "seed": self.cfg.seed,
            "detector_seeds": list(self.cfg.detector_seeds),
            "inputs": dict(sorted(inputs.items())),
            "outputs": {self.rel(p): sha256_file(p) for p in sorted(outputs)},
        }
        if extra:
            manifest.update(extra)
        mp = self.manifest_path(stage)
        _write_json(mp, manifest)
        return mp


# -- work plan -------------------------------------------------------------------------


def grid_candidates(cfg: ExperimentConfig) -> list[CandidateConfig]:
    g = cfg.grid
    return candidate_grid(g.threads, g.ratios, g.delays, g.baseline)


def grid_trials(cfg: ExperimentConfig) -> int:
    return max(cfg.grid.trials, cfg.search.trials_per_candidate)


@dataclass(frozen=True)
class TraceJob:
    role: str
    name: str
    trial: int
    spec: WorkloadSpec
    seed: int
    path: str


def plan(cfg: ExperimentConfig) -> list[TraceJob]:
    """All simulations of an experiment in a fixed order.

    Training workloads get their own seed per (workload, trial); grid
    candidates share one seed per trial, so each trial attacks the same
    victim file population under every variant.
    """
    jobs = []
    for name, cand in cfg.training.families.items():
        for t in range(cfg.training.trials):
            spec = WorkloadSpec("encryptor", candidate=cand, duration=cfg.duration, name=name)
            jobs.append(TraceJob("train", name, t, spec, derive_seed(cfg.seed, "train", name, t), f"traces/train/{name}__{t:03d}.jsonl.gz"))
    for name in cfg.training.benign:
        for t in range(cfg.training.trials):
            spec = WorkloadSpec("benign_archetype", archetype=name, duration=cfg.duration, name=name)
            jobs.append(TraceJob("train", name, t, spec, derive_seed(cfg.seed, "train", name, t), f"traces/train/{name}__{t:03d}.jsonl.gz"))
    for cand in grid_candidates(cfg):
        for t in range(grid_trials(cfg)):
            spec = WorkloadSpec("encryptor", candidate=cand, duration=cfg.duration)
            jobs.append(TraceJob("grid", cand.key, t, spec, derive_seed(cfg.seed, "grid", t), f"traces/grid/{cand.key}__{t:03d}.jsonl.gz"))
    return jobs


# Worker entry points take plain tuples so they pickle cleanly for process pools.


def _simulate_one(args: tuple[TraceJob, Any, Any, str]) -> str:
    job, env, archetypes, out = args
    trace = simulate(job.spec, env, job.seed, archetypes)
    path = Path(out) / job.path
    write_trace(trace, path)
    return sha256_file(path)


def _extract_one(args: tuple[str, tuple[Any, ...], float]) -> tuple[list[FeatureMatrix], int | None]:
    path, specs, horizon = args
    trace = read_trace(path, strict=True)
    feats = [extract(trace, s) for s in specs]
    files = files_encrypted(trace, horizon) if trace.file_completions is not None else None
    return feats, files


# -- stages ------------------------------------------------------------------------------


def stage_simulate(ctx: Context) -> list[Path]:
    cfg = ctx.cfg
    jobs = plan(cfg)
    for d in ("traces/train", "traces/grid"):
        ctx.path(d).mkdir(parents=True, exist_ok=True)
    digests = parallel_map(_simulate_one, [(j, cfg.environment, cfg.archetypes, str(ctx.out)) for j in jobs], cfg.workers)
    index = [
        {
            "role": j.role,
            "workload": j.name,
            "trial": j.trial,
            "seed": j.seed,
            "label": "ransomware" if j.spec.kind == "encryptor" else "benign",
            "candidate": None if j.spec.candidate is None else j.spec.candidate.to_dict(),
            "path": j.path,
            "sha256": h,
        }
        for j, h in zip(jobs, digests)
    ]
    idx = ctx.path("traces", "index.json")
    _write_json(idx, {"config_hash": cfg.config_hash, "traces": index})
    ctx.write_manifest("simulate", [idx], {"n_traces": len(index)})
    return [idx]


def _load_index(ctx: Context) -> list[dict[str, Any]]:
    return json.loads(ctx.path("traces", "index.json").read_text())["traces"]


def _tag(fm: FeatureMatrix, entry: Mapping[str, Any]) -> FeatureMatrix:
    prov = dict(fm.provenance, role=entry["role"], trial=entry["trial"], workload_name=entry["workload"])
    return FeatureMatrix(fm.values, fm.label, fm.spec, prov)


def stage_extract(ctx: Context) -> list[Path]:
    cfg = ctx.cfg
    index = _load_index(ctx)
    specs = (cfg.detection_spec, cfg.similarity_spec)
    args = [(str(ctx.path(e["path"])), specs, cfg.search.horizon) for e in index]
    results = parallel_map(_extract_one, args, cfg.workers)

    fdir = ctx.path("features")
    (fdir / "similarity").mkdir(parents=True, exist_ok=True)
    det_train = [_tag(r[0][0], e) for e, r in zip(index, results) if e["role"] == "train"]
    det_grid = [_tag(r[0][0], e) for e, r in zip(index, results) if e["role"] == "grid"]
    outputs = [fdir / "detection_train.npz", fdir / "detection_grid.npz"]
    save_dataset(det_train, outputs[0])
    save_dataset(det_grid, outputs[1])

    # Trial-averaged similarity features: grid candidates over grid.trials trials,
    # training workloads (the comparison samples) over all their trials.
    groups: dict[tuple[str, str], list[FeatureMatrix]] = {}
    for e, r in zip(index, results):
        if e["role"] == "grid" and e["trial"] >= cfg.grid.trials:
            continue
        groups.setdefault((e["role"], e["workload"]), []).append(_tag(r[0][1], e))
    sim_files = []
    for (role, name), mats in groups.items():
        p = fdir / "similarity" / f"{role}__{name}.csv"
        write_feature_csv(average_features(mats), p)
        sim_files += [p, Path(str(p) + ".meta.json")]
    outputs += sim_files

    fc = fdir / "files_encrypted.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["role", "workload", "trial", "seed", "files_encrypted"])
    for e, r in zip(index, results):
        if r[1] is not None:
            w.writerow([e["role"], e["workload"], e["trial"], e["seed"], r[1]])
    fc.write_text(buf.getvalue())
    outputs.append(fc)

    manifest = {
        "datasets": {
            "detection_train": {"file": "features/detection_train.npz", "spec": cfg.detection_spec.to_dict(),
                                "labels": {lab: sum(m.label == lab for m in det_train) for lab in ("ransomware", "benign")}},
            "detection_grid": {"file": "features/detection_grid.npz", "spec": cfg.detection_spec.to_dict(),
                               "labels": {"ransomware": len(det_grid)}},
        },
        "similarity": [
            {"file": ctx.rel(fdir / "similarity" / f"{role}__{name}.csv"), "role": role, "workload": name, "label": mats[0].label}
            for (role, name), mats in groups.items()
        ],
    }
    man = fdir / "manifest.json"
    _write_json(man, manifest)
    outputs.append(man)
    ctx.write_manifest("extract", outputs)
    return outputs


def stage_train(ctx: Context) -> list[Path]:
    cfg = ctx.cfg
    dataset = load_dataset(ctx.path("features", "detection_train.npz"))
    models = train_ensemble(dataset, cfg.hyperparams, cfg.detector_seeds)
    mdir = ctx.path("models")
    mdir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for m in models:
        outputs += list(save_model(m, mdir / f"member_{m.seed}"))
    members = [{"seed": m.seed, "descriptor": f"models/member_{m.seed}.json", "final_loss": m.history[-1]} for m in models]
    man = mdir / "ensemble.json"
    _write_json(man, {"members": members, "hyperparams": cfg.raw["detector"], "n_train": len(dataset)})
    outputs.append(man)
    ctx.write_manifest("train", outputs)
    return outputs


def load_ensemble(ctx: Context):
    members = json.loads(ctx.path("models", "ensemble.json").read_text())["members"]
    return [load_model(ctx.path(m["descriptor"]).with_suffix("")) for m in members]


def _grid_features(ctx: Context, n_trials: int) -> dict[str, list[FeatureMatrix]]:
    by_key: dict[str, list[FeatureMatrix]] = {}
    for fm in load_dataset(ctx.path("features", "detection_grid.npz")):
        if fm.provenance["trial"] < n_trials:
            by_key.setdefault(fm.provenance["workload_name"], []).append(fm)
    return by_key


def stage_evaluate(ctx: Context) -> list[Path]:
    cfg = ctx.cfg
    models = load_ensemble(ctx)
    feats = _grid_features(ctx, cfg.grid.trials)
    grid = grid_candidates(cfg)
    rows = recall_sweep(models, {c: feats[c.key] for c in grid})
    rdir = ctx.path("results")
    rdir.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = rdir / "recall.csv", rdir / "recall.svg"
    write_recall_csv(rows, csv_path)
    recall_bars_svg(rows, svg_path, f"summed-ensemble recall, {len(models)} models x {cfg.grid.trials} trials")
    ctx.write_manifest("evaluate", [csv_path, svg_path])
    return [csv_path, svg_path]


def stage_similarity(ctx: Context) -> list[Path]:
    cfg = ctx.cfg
    sdir = ctx.path("features", "similarity")
    grid = grid_candidates(cfg)
    cand = {c: read_feature_csv(sdir / f"grid__{c.key}.csv") for c in grid}
    samples = {}
    for name in [*cfg.training.families, *cfg.training.benign]:
        samples[name] = read_feature_csv(sdir / f"train__{name}.csv")
    rdir = ctx.path("results")
    rdir.mkdir(parents=True, exist_ok=True)
    ctab = candidate_similarity_table(cand, cfg.grid.baseline)
    stab = sample_similarity_table(cand, samples)
    outs = [rdir / n for n in ("similarity_candidates.csv", "similarity_candidates.svg", "similarity_samples.csv", "similarity_samples.svg")]
    write_similarity_csv(ctab, outs[0])
    similarity_heatmap_svg(ctab, outs[1], f"per-dimension similarity to {cfg.grid.baseline.key}")
    write_sample_similarity_csv(stab, outs[2])
    similarity_heatmap_svg(stab, outs[3], "average similarity over defined dimensions")
    ctx.write_manifest(
        "similarity",
        outs,
        {"excluded_dimensions": ctab.excluded_columns(), "feature_spec": cfg.similarity_spec.to_dict()},
    )
    return outs


def _files_by_candidate(ctx: Context) -> dict[str, dict[int, int]]:
    out: dict[str, dict[int, int]] = {}
    with open(ctx.path("features", "files_encrypted.csv"), newline="") as fh:
        for r in csv.DictReader(fh):
            if r["role"] == "grid":
                out.setdefault(r["workload"], {})[int(r["trial"])] = int(r["files_encrypted"])
    return out


def stage_search(ctx: Context) -> list[Path]:
    cfg = ctx.cfg
    models = load_ensemble(ctx)
    n = cfg.search.trials_per_candidate
    feats = _grid_features(ctx, n)
    files = _files_by_candidate(ctx)
    runs = [
        CandidateRuns(c, sorted(feats[c.key], key=lambda f: f.provenance["trial"]), [files[c.key][t] for t in range(n)])
        for c in grid_candidates(cfg)
    ]
    results = score_candidates(runs, models, cfg.search)
    selected = select_optimal(results)
    rdir = ctx.path("results")
    rdir.mkdir(parents=True, exist_ok=True)
    res_csv, sel_json = rdir / "search_results.csv", rdir / "search_selection.json"
    write_results_csv(results, res_csv)
    write_selection_json(selection_record(selected, results, cfg.search), sel_json)
    ctx.write_manifest("search", [res_csv, sel_json])
    return [res_csv, sel_json]


def stage_report(ctx: Context) -> list[Path]:
    rep = ctx.path("report")
    rep.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name in sorted(p.name for p in ctx.path("results").iterdir() if p.suffix in (".csv", ".svg", ".json")):
        dst = rep / name
        shutil.copyfile(ctx.path("results", name), dst)
        outputs.append(dst)
    rows = list(csv.DictReader(io.StringIO(ctx.path("results", "recall.csv").read_text())))
    recalls = {r["candidate"]: float(r["recall"]) for r in rows}
    base = ctx.cfg.grid.baseline.key
    worst = min(rows, key=lambda r: float(r["recall"]))
    summary = {
        "config_hash": ctx.cfg.config_hash,
        "baseline": base,
        "baseline_recall": recalls[base],
        "min_recall": float(worst["recall"]),
        "min_recall_candidates": [r["candidate"] for r in rows if float(r["recall"]) == float(worst["recall"])],
        "search": json.loads(ctx.path("results", "search_selection.json").read_text()),
    }
    sp = rep / "summary.json"
    _write_json(sp, summary)
    outputs.append(sp)
    ctx.write_manifest("report", outputs)
    return outputs


STAGE_FUNCS: dict[str, Callable[[Context], list[Path]]] = {
    "simulate": stage_simulate,
    "extract": stage_extract,
    "train": stage_train,
    "evaluate": stage_evaluate,
    "similarity": stage_similarity,
    "search": stage_search,
    "report": stage_report,
}


def run_stage(stage: str, cfg: ExperimentConfig) -> list[Path]:
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    ctx = Context(cfg)
    ctx.require(stage)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    logger.info("stage %s -> %s", stage, cfg.output_dir)
    return STAGE_FUNCS[stage](ctx)


def run_all(cfg: ExperimentConfig) -> None:
    for stage in STAGES:
        run_stage(stage, cfg)


def load_recall_table(out: Path) -> dict[str, float]:
    rows = csv.DictReader(io.StringIO((out / "results" / "recall.csv").read_text()))
    return {r["candidate"]: float(r["recall"]) for r in rows}

