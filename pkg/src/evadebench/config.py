"""Experiment configuration: one YAML tree holding every scientific parameter.

A user file is deep-merged over the packaged defaults, so it only needs the
keys it changes.  Validation failures raise :class:`ConfigError` carrying the
dotted path of the offending field.  The only environment override is
``EVADE_BENCH_OUT`` (output directory); nothing else is read from the
environment or the clock.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .candidates import CandidateConfig
from .detector import Hyperparams
from .features import FeatureSpec
from .search import EvasionRule, SearchConfig
from .simulator import _packaged_defaults
from .trace import EnvironmentProfile
from .yamlio import load_yaml

OUT_ENV_VAR = "EVADE_BENCH_OUT"


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping) and k not in _REPLACED_WHOLE:
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# Mappings whose entries name things (not fields); a user value replaces them wholesale.
_REPLACED_WHOLE = {"ransomware_families", "functional_policy"}


@dataclass(frozen=True)
class GridConfig:
    threads: tuple[int, ...]
    ratios: tuple[float, ...]
    delays: tuple[float, ...]
    baseline: CandidateConfig
    trials: int


@dataclass(frozen=True)
class TrainingConfig:
    trials: int
    families: dict[str, CandidateConfig]
    benign: tuple[str, ...]


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: Path
    workers: int
    duration: float
    environment: EnvironmentProfile
    similarity_spec: FeatureSpec
    detection_spec: FeatureSpec
    grid: GridConfig
    training: TrainingConfig
    hyperparams: Hyperparams
    detector_seeds: tuple[int, ...]
    search: SearchConfig
    archetypes: dict[str, dict[str, Any]]
    raw: dict[str, Any]

    @property
    def config_hash(self) -> str:
        """SHA-256 of the resolved tree (output location excluded, it is not scientific)."""
        tree = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(tree, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _need(d: Mapping[str, Any], key: str, path: str) -> Any:
    if not isinstance(d, Mapping):
        raise ConfigError(path, "expected a mapping")
    if key not in d:
        raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
    return d[key]


def _int(v: Any, path: str, minimum: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise ConfigError(path, f"expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(path, f"must be >= {minimum}, got {v!r}")
    return int(v)


def _float(v: Any, path: str) -> float:
    if isinstance(v, str) and v.lower() in ("inf", "infinity"):
        return math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, f"expected a number, got {v!r}")
    return float(v)


def _wrap(path: str, fn, *args):
    try:
        return fn(*args)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _candidate(d: Any, path: str) -> CandidateConfig:
    return _wrap(
        path,
        lambda: CandidateConfig(
            _int(_need(d, "threads", path), f"{path}.threads", 1),
            _float(_need(d, "ratio", path), f"{path}.ratio"),
            _float(_need(d, "delay", path), f"{path}.delay"),
        ),
    )


def _list(v: Any, path: str) -> list[Any]:
    if not isinstance(v, list) or not v:
        raise ConfigError(path, "expected a non-empty list")
    return v


def from_tree(tree: Mapping[str, Any]) -> ExperimentConfig:
    """Validate a fully merged tree and build the typed config."""
    t = dict(tree)
    known = {
        "seed", "output_dir", "workers", "duration", "environment", "features",
        "grid", "training", "detector", "search", "archetypes",
    }
    for k in t:
        if k not in known:
            raise ConfigError(k, "unknown top-level field")
    seed = _int(_need(t, "seed", ""), "seed", 0)
    workers = _int(t.get("workers", 1), "workers", 1)
    duration = _float(_need(t, "duration", ""), "duration")
    if duration <= 0:
        raise ConfigError("duration", "must be > 0")
    out = os.environ.get(OUT_ENV_VAR) or t.get("output_dir", "evade-bench-out")

    env = _wrap("environment", EnvironmentProfile.from_dict, dict(t.get("environment") or {}))
    problems = env.violations()
    if problems:
        raise ConfigError("environment", "; ".join(problems))

    feats = _need(t, "features", "")
    sim_spec = _wrap("features.similarity", FeatureSpec.from_dict, dict(_need(feats, "similarity", "features")))
    det_spec = _wrap("features.detection", FeatureSpec.from_dict, dict(_need(feats, "detection", "features")))
    for name, fs in (("similarity", sim_spec), ("detection", det_spec)):
        if fs.t_d > duration:
            raise ConfigError(f"features.{name}.t_d", f"{fs.t_d} exceeds simulated duration {duration}")

    archetypes = dict(_need(t, "archetypes", ""))
    g = _need(t, "grid", "")
    grid = GridConfig(
        tuple(_int(x, f"grid.threads[{i}]", 1) for i, x in enumerate(_list(_need(g, "threads", "grid"), "grid.threads"))),
        tuple(_float(x, f"grid.ratios[{i}]") for i, x in enumerate(_list(_need(g, "ratios", "grid"), "grid.ratios"))),
        tuple(_float(x, f"grid.delays[{i}]") for i, x in enumerate(_list(_need(g, "delays", "grid"), "grid.delays"))),
        _candidate(_need(g, "baseline", "grid"), "grid.baseline"),
        _int(_need(g, "trials", "grid"), "grid.trials", 1),
    )
    for i, r in enumerate(grid.ratios):
        if not 0 < r <= 1:
            raise ConfigError(f"grid.ratios[{i}]", f"ratio must lie in (0, 1], got {r}")
    for i, d in enumerate(grid.delays):
        if d < 0:
            raise ConfigError(f"grid.delays[{i}]", f"delay must be >= 0, got {d}")
    b = grid.baseline
    if b.threads not in grid.threads or b.ratio not in grid.ratios or b.delay not in grid.delays:
        raise ConfigError("grid.baseline", f"baseline {b.key} is not a member of the grid")

    tr = _need(t, "training", "")
    fams = _need(tr, "ransomware_families", "training")
    if not isinstance(fams, Mapping) or not fams:
        raise ConfigError("training.ransomware_families", "expected a non-empty mapping")
    benign = tuple(_list(_need(tr, "benign", "training"), "training.benign"))
    for i, name in enumerate(benign):
        if name not in archetypes:
            raise ConfigError(f"training.benign[{i}]", f"unknown archetype preset {name!r}; known: {sorted(archetypes)}")
    training = TrainingConfig(
        _int(_need(tr, "trials", "training"), "training.trials", 1),
        {str(k): _candidate(v, f"training.ransomware_families.{k}") for k, v in fams.items()},
        benign,
    )

    det = dict(_need(t, "detector", ""))
    seeds = tuple(_int(s, f"detector.seeds[{i}]") for i, s in enumerate(_list(_need(det, "seeds", "detector"), "detector.seeds")))
    if len(set(seeds)) != len(seeds):
        raise ConfigError("detector.seeds", f"seeds must be distinct, got {list(seeds)}")
    hp = _wrap("detector", Hyperparams.from_dict, det)
    if not 0 < hp.threshold < 1:
        raise ConfigError("detector.threshold", "must lie in (0, 1)")

    s = dict(_need(t, "search", ""))
    rule = dict(s.get("evasion_rule") or {})
    search = _wrap(
        "search",
        lambda: SearchConfig(
            alpha=_float(s.get("alpha", 0.5), "search.alpha"),
            beta=_float(s.get("beta", 0.5), "search.beta"),
            norm_order=_float(s.get("norm_order", 2), "search.norm_order"),
            evasion_rule=_wrap("search.evasion_rule", EvasionRule, rule.get("name", "recall_below"), rule.get("threshold")),
            baseline=grid.baseline,
            trials_per_candidate=_int(s.get("trials_per_candidate", 10), "search.trials_per_candidate", 1),
            horizon=_float(s.get("horizon", 30.0), "search.horizon"),
            functional_policy={str(k): float(v) for k, v in (s.get("functional_policy") or {}).items()},
        ),
    )
    if search.horizon > duration:
        raise ConfigError("search.horizon", f"{search.horizon} exceeds simulated duration {duration}")

    return ExperimentConfig(
        seed=seed,
        output_dir=Path(out),
        workers=workers,
        duration=duration,
        environment=env,
        similarity_spec=sim_spec,
        detection_spec=det_spec,
        grid=grid,
        training=training,
        hyperparams=hp,
        detector_seeds=seeds,
        search=search,
        archetypes=archetypes,
        raw=t,
    )


def load_config(path: str | Path | None = None, *, seed: int | None = None, out: str | Path | None = None) -> ExperimentConfig:
    """Defaults, merged with the YAML at ``path`` (if any), then CLI overrides."""
    tree = copy.deepcopy(_packaged_defaults())
    if path is not None:
        try:
            user = load_yaml(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"YAML parse error: {exc}") from exc
        except OSError as exc:
            raise ConfigError("<file>", str(exc)) from exc
        if user is None:
            user = {}
        if not isinstance(user, Mapping):
            raise ConfigError("<root>", "config must be a mapping")
        tree = deep_merge(tree, user)
    if seed is not None:
        tree["seed"] = seed
    cfg = from_tree(tree)
    if out is not None:
        cfg = replace(cfg, output_dir=Path(out))
    return cfg
