"""Deterministic virtual-time workload generator.

Every workload is an item loop run by ``threads`` logical workers that share
one item queue: a worker takes the next item, reads part of it, writes part of
it, then pauses.  Workers are interleaved by a heap-ordered event queue keyed
on ``(virtual time, worker id)``, so a call is a pure function of
``(spec, env, seed)``.  Nothing touches the real filesystem: payloads exist only
as byte histograms drawn from a seeded generator.

The encryptor workload maps a :class:`CandidateConfig` onto that loop (read
the whole file, write ``ratio`` of it back in place as high-entropy bytes,
sleep ``delay``).  Benign archetypes are presets of the same loop loaded from
configuration.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Any, Iterable, Mapping

import numpy as np
from .candidates import DEFAULT_BASELINE, CandidateConfig
from .trace import (
    MEMORY_OPS,
    NS_PER_S,
    PAGE_KINDS,
    SECTOR_SIZE,
    AccessTrace,
    EnvironmentProfile,
    MemoryEvents,
    StorageEvents,
)
from .yamlio import load_yaml

ALIGN = 4096
ARCHETYPES = ("idle", "compressor", "bulk_encryptor", "secure_delete", "browser_like", "office_like")
MEMORY_CLASSES = tuple(f"{k}.{op}" for k in PAGE_KINDS for op in MEMORY_OPS)

_MMIO_BASE = 0xFEB0_0000
_MMIO_SPAN = 64 << 10
_CODE_BASE = 0x0040_0000
_CODE_SPAN = 16 << 20
_HEAP_BASE = 1 << 30
_BUFFER_STRIDE = 256 << 20
_BUFFER_SPAN = 8 << 20
_PAGE_CACHE_WINDOW = 32 << 20


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str
    archetype: str | None = None
    candidate: CandidateConfig | None = None
    duration: float = 30.0
    name: str | None = None

    def violations(self) -> list[str]:
        out = []
        if self.kind == "encryptor":
            if self.candidate is None:
                out.append("encryptor workload requires a candidate")
        elif self.kind == "benign_archetype":
            if self.archetype is None:
                out.append("benign_archetype workload requires an archetype")
        else:
            out.append(f"unknown workload kind {self.kind!r}")
        if not self.duration > 0:
            out.append("duration must be > 0")
        return out

    @property
    def workload_name(self) -> str:
        if self.name:
            return self.name
        return "encryptor" if self.kind == "encryptor" else str(self.archetype)


@dataclass(frozen=True)
class Behavior:
    """Resolved parameters of the item loop (rates are bytes/s per worker)."""

    threads: int
    item_size: tuple[str, Mapping[str, float]]
    read_fraction: float
    write_fraction: float
    read_rate: float
    write_rate: float
    pause_mean: float = 0.0
    pause_dist: str = "fixed"
    write_entropy: float = 8.0
    write_entropy_std: float = 0.0
    read_entropy: float = 5.0
    read_entropy_std: float = 0.8
    file_placement: str = "scattered"
    write_placement: str = "inplace"
    cluster_span: int = 4 << 30
    memory_scale: float = 1.0
    max_items: int | None = None


def encryptor_rates(candidate: CandidateConfig, env: EnvironmentProfile) -> tuple[float, float]:
    """Per-worker (read, encrypt+write) byte rates for ``candidate`` on ``env``.

    Aggregate encryption throughput grows linearly up to the saturation point,
    then loses ``oversubscription_penalty`` per extra worker.  Storage caps are
    shared evenly.
    """
    n = candidate.threads
    sat = env.thread_saturation_point
    aggregate = env.per_thread_encrypt_throughput * min(n, sat) * (1.0 - env.oversubscription_penalty) ** max(0, n - sat)
    write_rate = min(aggregate / n, env.storage_write_throughput_cap / n)
    read_rate = env.storage_read_throughput_cap / n
    return read_rate, write_rate


def encryptor_behavior(candidate: CandidateConfig, env: EnvironmentProfile) -> Behavior:
    read_rate, write_rate = encryptor_rates(candidate, env)
    return Behavior(
        threads=candidate.threads,
        item_size=env.file_size_distribution,
        read_fraction=1.0,
        write_fraction=candidate.ratio,
        read_rate=read_rate,
        write_rate=write_rate,
        pause_mean=candidate.delay,
        pause_dist="fixed",
        write_entropy=8.0,
        read_entropy=env.plaintext_entropy_mean,
        read_entropy_std=env.plaintext_entropy_std,
        file_placement="scattered",
        write_placement="inplace",
        max_items=env.file_count,
    )


def archetype_behavior(preset: Mapping[str, Any], env: EnvironmentProfile) -> Behavior:
    """Resolve a benign archetype preset (a config mapping) against ``env``."""
    threads = int(preset.get("threads", 1))
    rate = float(preset["rate"])
    size = preset["item_size"]
    pause = preset.get("pause", {})
    went = preset.get("write_entropy", {})
    rent = preset.get("read_entropy", {})
    return Behavior(
        threads=threads,
        item_size=(size["name"], dict(size.get("params", {}))),
        read_fraction=float(preset.get("read_fraction", 1.0)),
        write_fraction=float(preset.get("write_fraction", 0.0)),
        read_rate=min(float(preset.get("read_rate", rate)), env.storage_read_throughput_cap / threads),
        write_rate=min(rate, env.storage_write_throughput_cap / threads),
        pause_mean=float(pause.get("mean", 0.0)),
        pause_dist=pause.get("name", "fixed"),
        write_entropy=float(went.get("mean", 8.0)),
        write_entropy_std=float(went.get("std", 0.0)),
        read_entropy=float(rent.get("mean", env.plaintext_entropy_mean)),
        read_entropy_std=float(rent.get("std", env.plaintext_entropy_std)),
        file_placement=preset.get("file_placement", "scattered"),
        write_placement=preset.get("write_placement", "inplace"),
        cluster_span=int(preset.get("cluster_span", 4 << 30)),
        memory_scale=float(preset.get("memory_scale", 1.0)),
        max_items=preset.get("max_items"),
    )


@lru_cache(maxsize=1)
def _packaged_defaults() -> dict[str, Any]:
    text = resources.files("evadebench").joinpath("data/default.yaml").read_text()
    return load_yaml(text)


def default_archetypes() -> dict[str, dict[str, Any]]:
    return _packaged_defaults()["archetypes"]


# -- payload models -------------------------------------------------------------


def _entropy_bits(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


@lru_cache(maxsize=1024)
def byte_distribution(target_entropy: float) -> np.ndarray:
    """256-symbol distribution with Shannon entropy ``target_entropy`` bits.

    Uses the geometric family ``p_i ~ r**i``; entropy is monotone in ``r`` so a
    bisection finds it.  ``target >= 8`` gives the uniform distribution.
    """
    if target_entropy >= 8.0:
        return np.full(256, 1.0 / 256)
    if target_entropy <= 0.0:
        p = np.zeros(256)
        p[0] = 1.0
        return p
    i = np.arange(256)
    lo, hi = 1e-9, 1.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        p = mid**i
        p /= p.sum()
        if _entropy_bits(p) < target_entropy:
            lo = mid
        else:
            hi = mid
    p = hi**i
    return p / p.sum()


def draw_sizes(dist: tuple[str, Mapping[str, float]], rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` item sizes (bytes, rounded up to 4 KiB)."""
    name, params = dist
    if name == "fixed":
        raw = np.full(n, float(params["value"]))
    elif name == "uniform":
        raw = rng.uniform(params["low"], params["high"], n)
    elif name == "lognormal":
        raw = float(params["median"]) * np.exp(float(params["sigma"]) * rng.standard_normal(n))
    elif name == "exponential":
        raw = rng.exponential(float(params["mean"]), n)
    else:
        raise ValueError(f"unknown size distribution {name!r}")
    lo = float(params.get("min", ALIGN))
    hi = float(params.get("max", np.inf))
    raw = np.clip(raw, lo, hi)
    return (np.ceil(raw / ALIGN) * ALIGN).astype(np.int64)


def _align_up(nbytes: float) -> int:
    return int(math.ceil(nbytes / ALIGN) * ALIGN)


# -- scheduler ------------------------------------------------------------------


class _ItemPool:
    """Lazily drawn, seed-determined sequence of items (the victim files)."""

    BLOCK = 256

    def __init__(self, behavior: Behavior, env: EnvironmentProfile, rng: np.random.Generator):
        self.b, self.env, self.rng = behavior, env, rng
        self.size = np.zeros(0, np.int64)
        self.lba = np.zeros(0, np.int64)
        self.gpa = np.zeros(0, np.int64)
        self.plain = np.zeros(0)
        self.went = np.zeros(0)
        sectors = env.disk_sectors
        self.cluster_base = int(rng.integers(0, max(1, sectors - behavior.cluster_span // SECTOR_SIZE)))

    def _grow(self) -> None:
        b, rng, n = self.b, self.rng, self.BLOCK
        size = draw_sizes(b.item_size, rng, n)
        span = self.env.disk_sectors if b.file_placement == "scattered" else b.cluster_span // SECTOR_SIZE
        base = 0 if b.file_placement == "scattered" else self.cluster_base
        lba = base + rng.integers(0, np.maximum(1, span - size // SECTOR_SIZE))
        pages = self.env.guest_memory_bytes // (2 << 20)
        gpa = rng.integers(0, pages, n) * (2 << 20)
        plain = np.clip(b.read_entropy + b.read_entropy_std * rng.standard_normal(n), 0.0, 8.0)
        if b.write_entropy >= 8.0:
            went = np.full(n, 8.0)
        else:
            went = np.clip(b.write_entropy + b.write_entropy_std * rng.standard_normal(n), 0.0, 7.99)
        self.size = np.concatenate([self.size, size])
        self.lba = np.concatenate([self.lba, lba])
        self.gpa = np.concatenate([self.gpa, gpa])
        self.plain = np.concatenate([self.plain, plain])
        self.went = np.concatenate([self.went, went])

    def __getitem__(self, i: int) -> tuple[int, int, int, float, float]:
        while i >= self.size.shape[0]:
            self._grow()
        return int(self.size[i]), int(self.lba[i]), int(self.gpa[i]), float(self.plain[i]), float(self.went[i])


def _streams(seed: int) -> dict[str, np.random.Generator]:
    s = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
    names = ("items", "behavior", "payload", "memory", "background")
    return {name: np.random.default_rng([s, i]) for i, name in enumerate(names)}


def _ns(nbytes: int, rate: float) -> int:
    return max(1, int(round(nbytes * NS_PER_S / rate)))


def _schedule(behavior: Behavior, env: EnvironmentProfile, duration_ns: int, rngs) -> tuple[dict[str, np.ndarray], list[int]]:
    """Run the item loop; returns per-chunk columns and file completion times."""
    b = behavior
    if b.read_fraction <= 0 and b.write_fraction <= 0 and b.pause_mean <= 0:
        raise ValueError("workload makes no progress: no reads, no writes and no pause")
    pool = _ItemPool(b, env, rngs["items"])
    brng = rngs["behavior"]
    req = env.io_request_size
    t0s: list[int] = []
    t1s: list[int] = []
    nbytes: list[int] = []
    is_write: list[bool] = []
    lbas: list[int] = []
    ents: list[float] = []
    workers: list[int] = []
    item_gpa: list[int] = []
    item_sizes: list[int] = []
    completions: list[int] = []
    seq_cursor = int(brng.integers(0, max(1, env.disk_sectors // 2)))

    def emit(t: int, total: int, rate: float, write: bool, lba: int, ent: float, w: int, gpa: int, isize: int) -> int:
        done = 0
        while done < total and t < duration_ns:
            c = min(req, total - done)
            dt = _ns(c, rate)
            t0s.append(t)
            t1s.append(t + dt)
            nbytes.append(c)
            is_write.append(write)
            lbas.append(lba + done // SECTOR_SIZE)
            ents.append(ent)
            workers.append(w)
            item_gpa.append(gpa)
            item_sizes.append(isize)
            t += dt
            done += c
        if done < total:
            # remainder falls past the horizon; account its time only
            t += _ns(total - done, rate)
        return t

    heap = [(0, w) for w in range(b.threads)]
    next_item = 0
    while heap:
        t, w = heapq.heappop(heap)
        if t >= duration_ns:
            continue
        if b.max_items is not None and next_item >= b.max_items:
            continue
        size, lba, gpa, plain, went = pool[next_item]
        next_item += 1
        rbytes = min(size, _align_up(b.read_fraction * size)) if b.read_fraction > 0 else 0
        if rbytes:
            t = emit(t, rbytes, b.read_rate, False, lba, plain, w, gpa, size)
        wbytes = _align_up(b.write_fraction * size) if b.write_fraction > 0 else 0
        if wbytes:
            if b.write_placement == "inplace":
                wbytes = min(wbytes, size)
                wlba = lba
            elif b.write_placement == "sequential":
                wlba = seq_cursor
                seq_cursor += wbytes // SECTOR_SIZE
            else:
                wlba = int(brng.integers(0, max(1, env.disk_sectors - wbytes // SECTOR_SIZE)))
            t = emit(t, wbytes, b.write_rate, True, wlba, went, w, gpa, size)
            if t < duration_ns:
                completions.append(t)
        if b.pause_dist == "exponential":
            pause = brng.exponential(b.pause_mean) if b.pause_mean > 0 else 0.0
        else:
            pause = b.pause_mean
        heapq.heappush(heap, (t + int(round(pause * NS_PER_S)), w))

    chunks = {
        "t0": np.asarray(t0s, dtype=np.int64),
        "t1": np.asarray(t1s, dtype=np.int64),
        "bytes": np.asarray(nbytes, dtype=np.int64),
        "write": np.asarray(is_write, dtype=bool),
        "lba": np.asarray(lbas, dtype=np.int64),
        "entropy": np.asarray(ents, dtype=np.float64),
        "worker": np.asarray(workers, dtype=np.int64),
        "gpa": np.asarray(item_gpa, dtype=np.int64),
        "isize": np.asarray(item_sizes, dtype=np.int64),
    }
    order = np.lexsort((chunks["worker"], chunks["t0"]))
    chunks = {k: v[order] for k, v in chunks.items()}
    return chunks, sorted(completions)


def _storage_from_chunks(chunks: dict[str, np.ndarray], rng: np.random.Generator) -> StorageEvents:
    n = chunks["t0"].shape[0]
    write = chunks["write"]
    hist = np.zeros((n, 256), dtype=np.int64)
    entropy = np.full(n, np.nan)
    entropy[~write] = chunks["entropy"][~write]
    if write.any():
        # quantize targets so payload draws can be batched per distribution
        targets = np.round(chunks["entropy"], 2)
        for target in np.unique(targets[write]):
            idx = np.flatnonzero(write & (targets == target))
            hist[idx] = rng.multinomial(chunks["bytes"][idx], byte_distribution(float(target)))
    return StorageEvents(
        chunks["t0"],
        write.astype(np.int8),
        chunks["lba"],
        chunks["bytes"],
        hist if write.any() else None,
        write,
        entropy,
    )


def _gpa_for(cls: int, n: int, rng, env: EnvironmentProfile, worker=None, item_gpa=None, item_size=None) -> np.ndarray:
    kind = PAGE_KINDS[cls // len(MEMORY_OPS)]
    op = MEMORY_OPS[cls % len(MEMORY_OPS)]
    if kind == "mmio":
        return _MMIO_BASE + rng.integers(0, _MMIO_SPAN // 4, n) * 4
    if op == "exec":
        return _CODE_BASE + rng.integers(0, _CODE_SPAN // ALIGN, n) * ALIGN
    if kind == "page4k" or worker is None:
        return rng.integers(0, env.guest_memory_bytes // ALIGN, n) * ALIGN
    if op == "read":
        span = np.minimum(np.maximum(item_size, ALIGN), _PAGE_CACHE_WINDOW)
        return item_gpa + (rng.random(n) * span).astype(np.int64) // ALIGN * ALIGN
    base = _HEAP_BASE + worker * _BUFFER_STRIDE
    return base + rng.integers(0, _BUFFER_SPAN // ALIGN, n) * ALIGN


def _memory_entropy(cls: int, chunk_entropy: np.ndarray, rng) -> np.ndarray:
    op = MEMORY_OPS[cls % len(MEMORY_OPS)]
    n = chunk_entropy.shape[0]
    if op == "write":
        return np.clip(chunk_entropy + 0.05 * rng.standard_normal(n), 0.0, 8.0)
    if op == "read_write":
        return np.clip(chunk_entropy - 0.5 + 0.1 * rng.standard_normal(n), 0.0, 8.0)
    return np.full(n, np.nan)


def _memory_events(
    chunks: dict[str, np.ndarray],
    behavior: Behavior,
    env: EnvironmentProfile,
    duration_ns: int,
    rng: np.random.Generator,
    bg_rng: np.random.Generator,
) -> MemoryEvents:
    coef = np.array([env.memory_event_rate_coefficients.get(c, 0.0) for c in MEMORY_CLASSES]) * behavior.memory_scale
    flush_ns = env.tlb_flush_period * NS_PER_S
    d = (chunks["t1"] - chunks["t0"]).astype(np.float64)
    # pages touched by a chunk fault again after every TLB flush it spans
    refaults = np.maximum(1.0, d / flush_ns)
    lam = chunks["bytes"][:, None] * refaults[:, None] * coef[None, :]
    counts = rng.poisson(lam) if lam.size else np.zeros((0, len(MEMORY_CLASSES)), np.int64)

    ts_parts, op_parts, kind_parts, gpa_parts, ent_parts = [], [], [], [], []
    for cls in range(len(MEMORY_CLASSES)):
        reps = counts[:, cls]
        total = int(reps.sum())
        if total:
            idx = np.repeat(np.arange(reps.shape[0]), reps)
            ts = chunks["t0"][idx] + (rng.random(total) * d[idx]).astype(np.int64)
            gpa = _gpa_for(cls, total, rng, env, chunks["worker"][idx], chunks["gpa"][idx], chunks["isize"][idx])
            ent = _memory_entropy(cls, chunks["entropy"][idx], rng)
            ts_parts.append(ts)
            op_parts.append(np.full(total, cls % len(MEMORY_OPS), np.int8))
            kind_parts.append(np.full(total, cls // len(MEMORY_OPS), np.int8))
            gpa_parts.append(gpa)
            ent_parts.append(ent)
        rate = env.background_memory_rates.get(MEMORY_CLASSES[cls], 0.0)
        nbg = int(bg_rng.poisson(rate * duration_ns / NS_PER_S)) if rate > 0 else 0
        if nbg:
            ts_parts.append(bg_rng.integers(0, duration_ns, nbg))
            op_parts.append(np.full(nbg, cls % len(MEMORY_OPS), np.int8))
            kind_parts.append(np.full(nbg, cls // len(MEMORY_OPS), np.int8))
            gpa_parts.append(_gpa_for(cls, nbg, bg_rng, env))
            op = MEMORY_OPS[cls % len(MEMORY_OPS)]
            if op == "write":
                ent_parts.append(np.clip(3.0 + 0.7 * bg_rng.standard_normal(nbg), 0.0, 8.0))
            elif op == "read_write":
                ent_parts.append(np.clip(2.5 + 0.7 * bg_rng.standard_normal(nbg), 0.0, 8.0))
            else:
                ent_parts.append(np.full(nbg, np.nan))
    if not ts_parts:
        return MemoryEvents.empty()
    ts = np.concatenate(ts_parts)
    keep = ts < duration_ns
    order = np.argsort(ts[keep], kind="stable")
    pick = lambda parts: np.concatenate(parts)[keep][order]  # noqa: E731
    return MemoryEvents(pick(ts_parts), pick(op_parts), pick(gpa_parts), pick(kind_parts), pick(ent_parts))


def simulate(
    spec: WorkloadSpec,
    env: EnvironmentProfile,
    seed: int,
    archetypes: Mapping[str, Mapping[str, Any]] | None = None,
) -> AccessTrace:
    """Generate the access trace of one workload execution in virtual time."""
    problems = spec.violations() + env.violations()
    if problems:
        raise ValueError("; ".join(problems))
    if spec.kind == "encryptor":
        behavior = encryptor_behavior(spec.candidate, env)
        label = "ransomware"
    else:
        presets = default_archetypes() if archetypes is None else archetypes
        if spec.archetype not in presets:
            raise ValueError(f"unknown archetype {spec.archetype!r}; known: {sorted(presets)}")
        behavior = archetype_behavior(presets[spec.archetype], env)
        label = "benign"
    duration_ns = int(round(spec.duration * NS_PER_S))
    rngs = _streams(seed)
    chunks, completions = _schedule(behavior, env, duration_ns, rngs)
    storage = _storage_from_chunks(chunks, rngs["payload"])
    memory = _memory_events(chunks, behavior, env, duration_ns, rngs["memory"], rngs["background"])
    return AccessTrace(
        storage_events=storage,
        memory_events=memory,
        label=label,
        workload_name=spec.workload_name,
        environment=env,
        seed=int(seed),
        duration=float(spec.duration),
        candidate=spec.candidate,
        file_completions=tuple(completions) if spec.kind == "encryptor" else None,
    )


def files_encrypted(trace: AccessTrace, horizon: float) -> int:
    """Number of files whose final ciphertext write completed before ``horizon`` seconds."""
    if trace.candidate is None or trace.file_completions is None:
        raise ValueError(f"trace {trace.workload_name!r} has no encryptor provenance")
    if horizon > trace.duration:
        raise ValueError(f"horizon {horizon} s exceeds trace duration {trace.duration} s")
    limit = horizon * NS_PER_S
    return int(sum(1 for t in trace.file_completions if t < limit))


def candidate_grid(
    thread_set: Iterable[int],
    ratio_set: Iterable[float],
    delay_set: Iterable[float],
    baseline: CandidateConfig = DEFAULT_BASELINE,
) -> list[CandidateConfig]:
    """Cartesian product in (threads, ratio, delay) lexicographic order."""
    sets = [sorted(set(s)) for s in (thread_set, ratio_set, delay_set)]
    if not all(sets):
        raise ValueError("candidate parameter sets must be non-empty")
    return [
        CandidateConfig(int(t), float(r), float(d)).relative_to(baseline) for t, r, d in itertools.product(*sets)
    ]
