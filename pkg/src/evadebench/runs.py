"""Seed derivation and the simulate-then-extract unit of work shared by the pipeline and the search."""

from __future__ import annotations

import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Sequence, TypeVar

import numpy as np

from .candidates import CandidateConfig
from .features import FeatureMatrix, FeatureSpec, extract
from .simulator import WorkloadSpec, files_encrypted, simulate
from .trace import AccessTrace, EnvironmentProfile

T = TypeVar("T")
R = TypeVar("R")


def derive_seed(root: int, *parts: int | str) -> int:
    """Deterministic 63-bit child seed of ``root`` for a (tag, index, ...) path."""
    words = [int(root) & 0xFFFF_FFFF_FFFF_FFFF]
    for p in parts:
        words.append(zlib.crc32(p.encode()) if isinstance(p, str) else int(p))
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0] >> 1)


def trial_seeds(root: int, tag: str, n: int) -> list[int]:
    return [derive_seed(root, tag, t) for t in range(n)]


def parallel_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> list[R]:
    """``[fn(x) for x in items]``, optionally across processes; order always follows ``items``."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class Job:
    spec: WorkloadSpec
    seed: int
    env: EnvironmentProfile
    feature_specs: tuple[FeatureSpec, ...]
    archetypes: Mapping[str, Any] | None = None
    horizon: float | None = None


@dataclass(frozen=True)
class JobResult:
    features: tuple[FeatureMatrix, ...]
    files: int | None
    trace: AccessTrace | None = None


def run_job(job: Job, keep_trace: bool = False) -> JobResult:
    trace = simulate(job.spec, job.env, job.seed, job.archetypes)
    feats = tuple(extract(trace, fs) for fs in job.feature_specs)
    files = files_encrypted(trace, job.horizon) if job.horizon is not None and job.spec.kind == "encryptor" else None
    return JobResult(feats, files, trace if keep_trace else None)


def run_job_with_trace(job: Job) -> JobResult:
    return run_job(job, keep_trace=True)


def encryptor_jobs(
    candidates: Iterable[CandidateConfig],
    seeds: Sequence[int],
    env: EnvironmentProfile,
    feature_specs: Sequence[FeatureSpec],
    duration: float,
    horizon: float | None = None,
) -> list[Job]:
    """Candidate-major job list; every candidate reuses the same trial seeds (paired trials)."""
    return [
        Job(WorkloadSpec("encryptor", candidate=c, duration=duration), s, env, tuple(feature_specs), None, horizon)
        for c in candidates
        for s in seeds
    ]
