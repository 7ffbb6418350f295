"""Attacker-side search over micro-behavior candidates.

Each candidate is simulated for a number of paired trials, its features are
shown to the substitute ensemble through ``predict`` only, and an evasion
rule decides whether the variant slips past.  Among evaders the search picks
the one with the smallest weighted degradation
``alpha * functional + beta * performance``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .analysis import recall
from .candidates import CandidateConfig
from .detector import STD_FLOOR, Classifier, evaluate
from .features import N_FEATURES, FeatureMatrix, FeatureSpec, average_features
from .runs import encryptor_jobs, parallel_map, run_job, trial_seeds
from .trace import EnvironmentProfile

EVASION_RULES = ("all_models_benign", "majority_benign", "recall_below")


class UndefinedBaselineError(ValueError):
    pass


@dataclass(frozen=True)
class EvasionRule:
    """How per-trace verdicts of the ensemble become one evades/doesn't verdict.

    * ``all_models_benign``: every model labels every trial benign.
    * ``majority_benign``: a strict majority of models labels a trial benign
      (trial verdict), and a strict majority of trials are benign.
    * ``recall_below``: summed-ensemble recall on the candidate's trials is
      strictly below ``threshold``.
    """

    name: str = "recall_below"
    threshold: float | None = 0.5

    def __post_init__(self) -> None:
        if self.name not in EVASION_RULES:
            raise ValueError(f"unknown evasion rule {self.name!r}; choose from {EVASION_RULES}")
        if self.name == "recall_below" and (self.threshold is None or not 0.0 < self.threshold <= 1.0):
            raise ValueError("recall_below needs a threshold in (0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "threshold": self.threshold}


@dataclass(frozen=True)
class SearchConfig:
    alpha: float = 0.5
    beta: float = 0.5
    norm_order: float = 2.0
    evasion_rule: EvasionRule = EvasionRule()
    baseline: CandidateConfig = CandidateConfig(3, 1.0, 0.100)
    trials_per_candidate: int = 10
    horizon: float = 30.0
    functional_policy: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if self.alpha < 0 or self.beta < 0:
            out.append("alpha and beta must be >= 0")
        if self.alpha == 0 and self.beta == 0:
            out.append("alpha and beta cannot both be 0")
        if not (self.norm_order >= 1):
            out.append(f"norm_order must be >= 1 or inf, got {self.norm_order}")
        if int(self.trials_per_candidate) != self.trials_per_candidate or self.trials_per_candidate < 1:
            out.append("trials_per_candidate must be an integer >= 1")
        if self.horizon <= 0:
            out.append("horizon must be > 0")
        for k, v in self.functional_policy.items():
            if not 0.0 <= float(v) <= 1.0:
                out.append(f"functional_policy[{k}] = {v} outside [0, 1]")
        return out


@dataclass(frozen=True)
class CandidateResult:
    candidate: CandidateConfig
    perturbation_norm: float
    perturbation_l2: float
    functional_degradation: float
    performance_degradation: float
    evades: bool
    recall_on_candidate: float
    objective: float
    files_mean: float = float("nan")
    grid_index: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.perturbation_norm < 0 or self.perturbation_l2 < 0:
            out.append("negative perturbation norm")
        for name in ("functional_degradation", "performance_degradation"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                out.append(f"{name} outside [0, 1]")
        if not math.isfinite(self.objective):
            out.append("objective not finite")
        return out


@dataclass
class CandidateRuns:
    """Trial features (detector spec) and encrypted-file counts of one candidate."""

    candidate: CandidateConfig
    features: list[FeatureMatrix]
    files: list[int]

    @property
    def averaged(self) -> FeatureMatrix:
        return average_features(self.features)


# -- pieces ------------------------------------------------------------------------------


def _values(x: FeatureMatrix | np.ndarray) -> np.ndarray:
    return x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)


def perturbation(
    candidate: FeatureMatrix | np.ndarray,
    baseline: FeatureMatrix | np.ndarray,
    norm_order: float = 2.0,
    column_std: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Feature delta ``candidate - baseline`` and its L_p norm over the flattened delta.

    With ``column_std`` the delta is taken on column-standardized features
    (the mean cancels, so only the scale matters).
    """
    if isinstance(candidate, FeatureMatrix) and isinstance(baseline, FeatureMatrix) and candidate.spec != baseline.spec:
        raise ValueError("feature specs differ")
    a, b = _values(candidate), _values(baseline)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    eps = a - b
    if column_std is not None:
        eps = eps / np.maximum(np.asarray(column_std, dtype=np.float64), STD_FLOOR)
    return eps, float(np.linalg.norm(eps.ravel(), ord=norm_order))


def pooled_column_std(matrices: Sequence[FeatureMatrix]) -> np.ndarray:
    """Population std per feature column over all rows of all matrices (floored)."""
    stacked = np.concatenate([_values(m) for m in matrices]).reshape(-1, N_FEATURES)
    return np.maximum(stacked.std(axis=0), STD_FLOOR)


def functional_degradation(candidate: CandidateConfig, policy: Mapping[str, float] | None = None) -> float:
    """Share of function lost: policy value if the candidate is listed, else ``1 - ratio``."""
    if policy and candidate.key in policy:
        v = float(policy[candidate.key])
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"policy value for {candidate.key} outside [0, 1]: {v}")
        return v
    return 1.0 - float(candidate.ratio)


def degradation_from_counts(candidate_files: Sequence[int], baseline_files: Sequence[int]) -> float:
    base = float(np.mean(baseline_files))
    if base <= 0:
        raise UndefinedBaselineError("baseline encrypted no files within the horizon")
    return max(0.0, 1.0 - float(np.mean(candidate_files)) / base)


def performance_degradation(
    candidate: CandidateConfig,
    env: EnvironmentProfile,
    baseline: CandidateConfig,
    *,
    seed: int = 0,
    trials: int = 3,
    horizon: float = 30.0,
) -> float:
    """Relative drop in files encrypted within ``horizon`` vs the baseline, on paired trial seeds."""
    seeds = trial_seeds(seed, "candidate-trials", trials)
    jobs = encryptor_jobs([candidate, baseline], seeds, env, (), horizon, horizon)
    files = [run_job(j).files for j in jobs]
    return degradation_from_counts(files[:trials], files[trials:])


def ensemble_evades(ensemble: Sequence[Classifier], features: Sequence[FeatureMatrix], rule: EvasionRule) -> tuple[bool, float]:
    """(evades, summed-ensemble recall) for one candidate's trial features."""
    cm = evaluate(ensemble, features)
    rec = recall(cm)
    if rule.name == "recall_below":
        return rec < rule.threshold, rec
    votes = np.array([[m.predict(fm).label == "benign" for m in ensemble] for fm in features])
    if rule.name == "all_models_benign":
        return bool(votes.all()), rec
    trial_benign = votes.sum(axis=1) * 2 > votes.shape[1]
    return bool(trial_benign.sum() * 2 > len(features)), rec


# -- search ------------------------------------------------------------------------------


def evaluate_candidates(
    grid: Sequence[CandidateConfig],
    env: EnvironmentProfile,
    config: SearchConfig,
    feature_spec: FeatureSpec,
    *,
    seed: int,
    duration: float | None = None,
    workers: int = 1,
) -> list[CandidateRuns]:
    """Simulate every candidate (and the baseline if absent) on shared paired trial seeds."""
    duration = max(config.horizon, feature_spec.t_d) if duration is None else duration
    seeds = trial_seeds(seed, "candidate-trials", config.trials_per_candidate)
    jobs = encryptor_jobs(grid, seeds, env, (feature_spec,), duration, config.horizon)
    results = parallel_map(run_job, jobs, workers)
    n = config.trials_per_candidate
    return [
        CandidateRuns(c, [r.features[0] for r in results[i * n : (i + 1) * n]], [r.files for r in results[i * n : (i + 1) * n]])
        for i, c in enumerate(grid)
    ]


def score_candidates(
    runs: Sequence[CandidateRuns], ensemble: Sequence[Classifier], config: SearchConfig
) -> list[CandidateResult]:
    """Turn simulated runs into CandidateResults; touches the detector through ``predict`` only."""
    base_params = config.baseline.params
    base_runs = [r for r in runs if r.candidate.params == base_params]
    if not base_runs:
        raise ValueError(f"baseline {config.baseline.key} is not in the candidate grid")
    base = base_runs[0]
    averaged = [r.averaged for r in runs]
    std = pooled_column_std(averaged)
    base_avg = base.averaged
    out = []
    for idx, (r, avg) in enumerate(zip(runs, averaged)):
        _, norm_p = perturbation(avg, base_avg, config.norm_order, std)
        _, norm_2 = perturbation(avg, base_avg, 2.0, std)
        f = functional_degradation(r.candidate, config.functional_policy)
        p = degradation_from_counts(r.files, base.files)
        evades, rec = ensemble_evades(ensemble, r.features, config.evasion_rule)
        out.append(
            CandidateResult(
                candidate=r.candidate,
                perturbation_norm=norm_p,
                perturbation_l2=norm_2,
                functional_degradation=f,
                performance_degradation=p,
                evades=evades,
                recall_on_candidate=rec,
                objective=config.alpha * f + config.beta * p,
                files_mean=float(np.mean(r.files)),
                grid_index=idx,
            )
        )
    return out


def select_optimal(results: Sequence[CandidateResult]) -> CandidateResult | None:
    """Evader minimizing the objective; ties go to the smaller L2 perturbation, then grid order."""
    feasible = [r for r in results if r.evades]
    if not feasible:
        return None
    return min(feasible, key=lambda r: (round(r.objective, 12), round(r.perturbation_l2, 12), r.grid_index))


def min_perturbation_evader(results: Sequence[CandidateResult]) -> CandidateResult | None:
    feasible = [r for r in results if r.evades]
    if not feasible:
        return None
    return min(feasible, key=lambda r: (round(r.perturbation_norm, 12), r.grid_index))


def search(
    grid: Sequence[CandidateConfig],
    ensemble: Sequence[Classifier],
    env: EnvironmentProfile,
    config: SearchConfig,
    *,
    feature_spec: FeatureSpec = FeatureSpec(0.1, 30.0),
    seed: int = 0,
    runs: Sequence[CandidateRuns] | None = None,
    workers: int = 1,
) -> tuple[CandidateResult | None, list[CandidateResult]]:
    """Evaluate every candidate and return (selected evader or None, all results in grid order)."""
    if not grid:
        raise ValueError("empty candidate grid")
    if not ensemble:
        raise ValueError("empty ensemble")
    if runs is None:
        runs = evaluate_candidates(grid, env, config, feature_spec, seed=seed, workers=workers)
    results = score_candidates(runs, ensemble, config)
    return select_optimal(results), results


# -- output ------------------------------------------------------------------------------

RESULT_COLUMNS = (
    "candidate", "threads", "ratio", "delay", "perturbation_norm", "perturbation_l2",
    "functional_degradation", "performance_degradation", "files_mean", "recall_on_candidate",
    "evades", "objective",
)


def write_results_csv(results: Sequence[CandidateResult], path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in results:
        c = r.candidate
        w.writerow([
            c.key, c.threads, repr(c.ratio), repr(c.delay), repr(r.perturbation_norm), repr(r.perturbation_l2),
            repr(r.functional_degradation), repr(r.performance_degradation), repr(r.files_mean),
            repr(r.recall_on_candidate), int(r.evades), repr(r.objective),
        ])
    Path(path).write_text(buf.getvalue())


def selection_record(selected: CandidateResult | None, results: Sequence[CandidateResult], config: SearchConfig) -> dict[str, Any]:
    """JSON-ready summary; the selected variant is given as its parameter diff against the baseline."""
    rec: dict[str, Any] = {
        "baseline": config.baseline.key,
        "alpha": config.alpha,
        "beta": config.beta,
        "norm_order": "inf" if math.isinf(config.norm_order) else config.norm_order,
        "evasion_rule": config.evasion_rule.to_dict(),
        "n_candidates": len(results),
        "n_evaders": sum(r.evades for r in results),
    }
    if selected is None:
        rec["selected"] = None
        rec["reason"] = "no candidate evades the ensemble under the configured rule"
    else:
        c = selected.candidate.relative_to(config.baseline)
        rec["selected"] = {
            "candidate": c.key,
            "patch_delta": [{"field": f, "from": a, "to": b} for f, a, b in c.patch_delta],
            "objective": selected.objective,
            "functional_degradation": selected.functional_degradation,
            "performance_degradation": selected.performance_degradation,
            "perturbation_norm": selected.perturbation_norm,
            "recall_on_candidate": selected.recall_on_candidate,
        }
    mp = min_perturbation_evader(results)
    rec["min_perturbation_evader"] = None if mp is None else {"candidate": mp.candidate.key, "perturbation_norm": mp.perturbation_norm}
    return rec


def write_selection_json(record: Mapping[str, Any], path: str | Path) -> None:
    Path(path).write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
