from __future__ import annotations

import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from evadebench.cli import EXIT_CONFIG, EXIT_MISSING, main
from evadebench.config import ConfigError, load_config
from evadebench.pipeline import STAGES

SMALL = """\
seed: 7
duration: 4.0
features:
  similarity: {t_window: 1.0, t_d: 4.0}
  detection: {t_window: 0.5, t_d: 4.0}
grid:
  threads: [1, 3]
  ratios: [0.5, 1.0]
  delays: [0.0, 0.1]
  baseline: {threads: 3, ratio: 1.0, delay: 0.1}
  trials: 2
training:
  trials: 3
  ransomware_families:
    fam_1: {threads: 1, ratio: 1.0, delay: 0.0}
    fam_3: {threads: 3, ratio: 1.0, delay: 0.0}
  benign: [idle, compressor, office_like]
detector:
  hidden: [8]
  epochs: 5
  batch_size: 8
  seeds: [1, 2, 3]
search:
  trials_per_candidate: 2
  horizon: 4.0
"""


def write_cfg(tmp_path: Path, text: str = SMALL, name: str = "cfg.yaml") -> Path:
    p = tmp_path / name
    p.write_text(text)
    return p


def run_cli(capsys, *args):
    code = main([str(a) for a in args])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# -- config ---------------------------------------------------------------------------


def test_defaults_load():
    cfg = load_config()
    assert len(cfg.detector_seeds) == 5
    assert cfg.grid.baseline.params == (3, 1.0, 0.1)
    assert cfg.environment.per_thread_encrypt_throughput == 8.0e6
    assert cfg.detection_spec.n_windows == 300 and cfg.similarity_spec.n_windows == 30


def test_user_file_merges_over_defaults(tmp_path):
    cfg = load_config(write_cfg(tmp_path, "environment: {thread_saturation_point: 4}\n"))
    assert cfg.environment.thread_saturation_point == 4
    assert cfg.environment.file_count == 5000
    assert cfg.detector_seeds == (101, 202, 303, 404, 505)


def test_seed_and_out_overrides(tmp_path, monkeypatch):
    p = write_cfg(tmp_path)
    assert load_config(p, seed=99).seed == 99
    monkeypatch.setenv("EVADE_BENCH_OUT", str(tmp_path / "env_out"))
    assert load_config(p).output_dir == tmp_path / "env_out"
    assert load_config(p, out=tmp_path / "flag").output_dir == tmp_path / "flag"


def test_config_hash_tracks_science_not_location(tmp_path):
    p = write_cfg(tmp_path)
    a, b = load_config(p, out=tmp_path / "x"), load_config(p, out=tmp_path / "y")
    assert a.config_hash == b.config_hash
    assert load_config(p, seed=8).config_hash != a.config_hash


@pytest.mark.parametrize(
    "text,field",
    [
        ("grid: {threads: [1, two]}\n", "grid.threads[1]"),
        ("grid: {ratios: [0.5, 1.5]}\n", "grid.ratios[1]"),
        ("grid: {baseline: {threads: 5, ratio: 1.0, delay: 0.1}}\n", "grid.baseline"),
        ("training: {benign: [idle, miner]}\n", "training.benign[1]"),
        ("detector: {seeds: [1, 1, 2]}\n", "detector.seeds"),
        ("detector: {dropout: 0.2}\n", "detector"),
        ("features: {detection: {t_window: 0.7, t_d: 30.0}}\n", "features.detection"),
        ("duration: 10.0\n", "features.similarity.t_d"),
        ("search: {alpha: 0, beta: 0}\n", "search"),
        ("environment: {thread_saturation_point: 0}\n", "environment"),
        ("colour: blue\n", "colour"),
        ("seed: -3\n", "seed"),
    ],
)
def test_validation_reports_field_path(tmp_path, text, field):
    with pytest.raises(ConfigError) as exc:
        load_config(write_cfg(tmp_path, text))
    assert exc.value.path == field


def test_yaml_scientific_notation_is_numeric(tmp_path):
    cfg = load_config(write_cfg(tmp_path, "environment: {per_thread_encrypt_throughput: 6e6}\n"))
    assert cfg.environment.per_thread_encrypt_throughput == 6.0e6


# -- cli errors --------------------------------------------------------------------------


def test_bad_config_exit_code_and_structured_error(tmp_path, capsys):
    p = write_cfg(tmp_path, "grid: {delays: [-1.0]}\n")
    code, _, err = run_cli(capsys, "simulate", "--config", p, "--out", tmp_path / "o")
    assert code == EXIT_CONFIG
    e = json.loads(err.strip().splitlines()[-1])
    assert e["error"] == "config" and e["field"] == "grid.delays[0]"


@pytest.mark.parametrize("stage,needs", [("evaluate", "train"), ("train", "extract"), ("extract", "simulate"),
                                         ("report", "evaluate")])
def test_stage_before_its_input_names_missing_stage(tmp_path, capsys, stage, needs):
    code, _, err = run_cli(capsys, stage, "--config", write_cfg(tmp_path), "--out", tmp_path / "o")
    assert code == EXIT_MISSING
    e = json.loads(err.strip().splitlines()[-1])
    assert e["error"] == "missing_artifact"
    assert e["requires"] == needs
    assert needs in e["message"]


def test_unknown_stage_rejected(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["ingest-all", "--config", str(write_cfg(tmp_path))])
    assert exc.value.code == 2


def test_console_script_entry_point(tmp_path):
    # python -m keeps this independent of PATH; the module is what the script wraps
    r = subprocess.run([sys.executable, "-m", "evadebench.cli", "evaluate", "--config", str(write_cfg(tmp_path)),
                        "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert r.returncode == EXIT_MISSING
    assert json.loads(r.stderr.strip().splitlines()[-1])["requires"] == "train"


# -- small end-to-end pipeline -----------------------------------------------------------


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline")
    cfg_path = write_cfg(base)
    outs = [base / "run_a", base / "run_b"]
    for out in outs:
        for stage in STAGES:
            assert main([stage, "--config", str(cfg_path), "--out", str(out)]) == 0, stage
    return cfg_path, outs


def _csvs(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def test_small_pipeline_outputs(two_runs):
    _, (out, _) = two_runs
    rows = list(csv.DictReader((out / "results" / "recall.csv").open()))
    assert len(rows) == 8
    assert all(int(r["fp"]) == 0 and int(r["tn"]) == 0 for r in rows)
    assert all(int(r["tp"]) + int(r["fn"]) == 3 * 2 for r in rows)  # 3 models x 2 trials
    search_rows = list(csv.DictReader((out / "results" / "search_results.csv").open()))
    assert len(search_rows) == 8
    sel = json.loads((out / "results" / "search_selection.json").read_text())
    assert sel["n_candidates"] == 8
    summary = json.loads((out / "report" / "summary.json").read_text())
    assert set(summary) >= {"baseline_recall", "min_recall", "search"}
    for svg in ("recall.svg", "similarity_candidates.svg", "similarity_samples.svg"):
        assert (out / "report" / svg).read_text().startswith("<?xml")


def test_same_config_gives_identical_csvs(two_runs):
    _, (a, b) = two_runs
    ca, cb = _csvs(a), _csvs(b)
    assert ca and ca.keys() == cb.keys()
    for k in ca:
        assert ca[k] == cb[k], k


def test_manifests_record_config_hash_and_input_hashes(two_runs):
    cfg_path, (out, _) = two_runs
    cfg = load_config(cfg_path)
    for stage in STAGES:
        m = json.loads((out / "manifests" / f"{stage}.json").read_text())
        assert m["config_hash"] == cfg.config_hash
        assert m["seed"] == 7 and m["detector_seeds"] == [1, 2, 3]
        assert m["outputs"]
    train = json.loads((out / "manifests" / "train.json").read_text())
    assert "features/detection_train.npz" in train["inputs"]
    report = json.loads((out / "manifests" / "report.json").read_text())
    assert "results/recall.csv" in report["inputs"]


def test_rerunning_a_stage_is_idempotent(two_runs, capsys):
    cfg_path, (out, _) = two_runs
    before = (out / "results" / "recall.csv").read_bytes(), (out / "manifests" / "evaluate.json").read_bytes()
    code, _, _ = run_cli(capsys, "evaluate", "--config", cfg_path, "--out", out)
    assert code == 0
    after = (out / "results" / "recall.csv").read_bytes(), (out / "manifests" / "evaluate.json").read_bytes()
    assert before == after


def test_seed_change_changes_results(two_runs, tmp_path, capsys):
    cfg_path, (a, _) = two_runs
    for stage in ("simulate", "extract"):
        code, _, err = run_cli(capsys, stage, "--config", cfg_path, "--out", tmp_path / "s", "--seed", 8)
        assert code == 0, err
    assert (a / "features" / "files_encrypted.csv").read_bytes() != (tmp_path / "s" / "features" / "files_encrypted.csv").read_bytes()
