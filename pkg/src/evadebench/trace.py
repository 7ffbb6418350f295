"""Event/trace data model, validation and serialization.

Traces are held column-wise (one numpy array per field) so that a 30 s trace
with tens of thousands of events stays cheap to build, window and compare.
Iterating a table yields plain :class:`StorageEvent` / :class:`MemoryEvent`
records.

Serialized forms
----------------
``jsonl``
    Line 1 is a header record (``"record": "header"``) with trace metadata;
    every following line is one event (``"record": "storage"`` or
    ``"record": "memory"``), storage events first.  Field names match the
    dataclasses below.  Files ending in ``.gz`` are gzip-compressed.
``csv``
    A directory holding ``meta.json`` (the header record), ``storage.csv`` and
    ``memory.csv``.  ``payload_hist`` is a space-separated list of 256 counts.
"""

from __future__ import annotations

import csv
import gzip
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

from .candidates import CandidateConfig

logger = logging.getLogger(__name__)

STORAGE_OPS = ("read", "write")
MEMORY_OPS = ("write", "read", "exec", "read_write")
PAGE_KINDS = ("page4k", "page2m", "mmio")
LABELS = ("ransomware", "benign")
SECTOR_SIZE = 512
NS_PER_S = 1_000_000_000
FORMAT_NAME = "evadebench-trace"
FORMAT_VERSION = 1


class TraceFormatError(ValueError):
    """Base class for trace parsing problems."""


class TraceParseError(TraceFormatError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TraceSchemaError(TraceFormatError):
    pass


@dataclass(frozen=True)
class StorageEvent:
    timestamp: int
    op: str
    lba: int
    size: int
    payload_hist: tuple[int, ...] | None = None
    payload_entropy: float | None = None


@dataclass(frozen=True)
class MemoryEvent:
    timestamp: int
    op: str
    gpa: int
    page_kind: str
    payload_entropy: float | None = None


def _as_i64(a, n=None) -> np.ndarray:
    arr = np.asarray(a, dtype=np.int64).reshape(-1)
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"column length {arr.shape[0]} != {n}")
    return arr


def _nan_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and bool(np.all((a == b) | (np.isnan(a) & np.isnan(b))))


class StorageEvents:
    """Column table of storage events.

    ``op`` holds indices into :data:`STORAGE_OPS`.  ``hist`` is an ``(n, 256)``
    count array (rows without a histogram are zero and masked out by
    ``has_hist``) or ``None`` when no event carries one.  Missing entropies are
    NaN.
    """

    __slots__ = ("timestamp", "op", "lba", "size", "hist", "has_hist", "entropy")

    def __init__(self, timestamp, op, lba, size, hist=None, has_hist=None, entropy=None):
        self.timestamp = _as_i64(timestamp)
        n = self.timestamp.shape[0]
        self.op = np.asarray(op, dtype=np.int8).reshape(-1)
        self.lba = _as_i64(lba, n)
        self.size = _as_i64(size, n)
        if self.op.shape[0] != n:
            raise ValueError("op column length mismatch")
        if hist is None:
            self.hist = None
            self.has_hist = np.zeros(n, dtype=bool)
        else:
            self.hist = np.asarray(hist, dtype=np.int64).reshape(n, 256)
            self.has_hist = (
                np.ones(n, dtype=bool) if has_hist is None else np.asarray(has_hist, dtype=bool)
            )
            if not self.has_hist.any():
                self.hist = None
        if entropy is None:
            self.entropy = np.full(n, np.nan)
        else:
            self.entropy = np.asarray(entropy, dtype=np.float64).reshape(-1)
            if self.entropy.shape[0] != n:
                raise ValueError("entropy column length mismatch")

    @classmethod
    def empty(cls) -> StorageEvents:
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int8), [], [])

    @classmethod
    def from_events(cls, events: Iterable[StorageEvent]) -> StorageEvents:
        events = list(events)
        n = len(events)
        hist = np.zeros((n, 256), dtype=np.int64)
        has_hist = np.zeros(n, dtype=bool)
        for i, e in enumerate(events):
            if e.payload_hist is not None:
                hist[i] = e.payload_hist
                has_hist[i] = True
        return cls(
            [e.timestamp for e in events],
            [STORAGE_OPS.index(e.op) for e in events],
            [e.lba for e in events],
            [e.size for e in events],
            hist if has_hist.any() else None,
            has_hist,
            [np.nan if e.payload_entropy is None else e.payload_entropy for e in events],
        )

    def __len__(self) -> int:
        return int(self.timestamp.shape[0])

    def __getitem__(self, i: int) -> StorageEvent:
        h = tuple(int(v) for v in self.hist[i]) if self.has_hist[i] else None
        ent = float(self.entropy[i])
        return StorageEvent(
            int(self.timestamp[i]),
            STORAGE_OPS[int(self.op[i])],
            int(self.lba[i]),
            int(self.size[i]),
            h,
            None if math.isnan(ent) else ent,
        )

    def __iter__(self) -> Iterator[StorageEvent]:
        for i in range(len(self)):
            yield self[i]

    def select(self, mask: np.ndarray) -> StorageEvents:
        return StorageEvents(
            self.timestamp[mask],
            self.op[mask],
            self.lba[mask],
            self.size[mask],
            None if self.hist is None else self.hist[mask],
            self.has_hist[mask],
            self.entropy[mask],
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StorageEvents):
            return NotImplemented
        if len(self) != len(other):
            return False
        same = (
            np.array_equal(self.timestamp, other.timestamp)
            and np.array_equal(self.op, other.op)
            and np.array_equal(self.lba, other.lba)
            and np.array_equal(self.size, other.size)
            and np.array_equal(self.has_hist, other.has_hist)
            and _nan_equal(self.entropy, other.entropy)
        )
        if not same:
            return False
        if self.has_hist.any():
            return bool(np.array_equal(self.hist[self.has_hist], other.hist[other.has_hist]))
        return True

    __hash__ = None  # type: ignore[assignment]


class MemoryEvents:
    """Column table of memory events (one row per EPT violation)."""

    __slots__ = ("timestamp", "op", "gpa", "page_kind", "entropy")

    def __init__(self, timestamp, op, gpa, page_kind, entropy=None):
        self.timestamp = _as_i64(timestamp)
        n = self.timestamp.shape[0]
        self.op = np.asarray(op, dtype=np.int8).reshape(-1)
        self.gpa = _as_i64(gpa, n)
        self.page_kind = np.asarray(page_kind, dtype=np.int8).reshape(-1)
        if self.op.shape[0] != n or self.page_kind.shape[0] != n:
            raise ValueError("memory column length mismatch")
        if entropy is None:
            self.entropy = np.full(n, np.nan)
        else:
            self.entropy = np.asarray(entropy, dtype=np.float64).reshape(-1)
            if self.entropy.shape[0] != n:
                raise ValueError("entropy column length mismatch")

    @classmethod
    def empty(cls) -> MemoryEvents:
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int8), [], np.zeros(0, np.int8))

    @classmethod
    def from_events(cls, events: Iterable[MemoryEvent]) -> MemoryEvents:
        events = list(events)
        return cls(
            [e.timestamp for e in events],
            [MEMORY_OPS.index(e.op) for e in events],
            [e.gpa for e in events],
            [PAGE_KINDS.index(e.page_kind) for e in events],
            [np.nan if e.payload_entropy is None else e.payload_entropy for e in events],
        )

    def __len__(self) -> int:
        return int(self.timestamp.shape[0])

    def __getitem__(self, i: int) -> MemoryEvent:
        ent = float(self.entropy[i])
        return MemoryEvent(
            int(self.timestamp[i]),
            MEMORY_OPS[int(self.op[i])],
            int(self.gpa[i]),
            PAGE_KINDS[int(self.page_kind[i])],
            None if math.isnan(ent) else ent,
        )

    def __iter__(self) -> Iterator[MemoryEvent]:
        for i in range(len(self)):
            yield self[i]

    def select(self, mask: np.ndarray) -> MemoryEvents:
        return MemoryEvents(
            self.timestamp[mask], self.op[mask], self.gpa[mask], self.page_kind[mask], self.entropy[mask]
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryEvents):
            return NotImplemented
        return (
            np.array_equal(self.timestamp, other.timestamp)
            and np.array_equal(self.op, other.op)
            and np.array_equal(self.gpa, other.gpa)
            and np.array_equal(self.page_kind, other.page_kind)
            and _nan_equal(self.entropy, other.entropy)
        )

    __hash__ = None  # type: ignore[assignment]


def _default_coefficients() -> dict[str, float]:
    # events per processed byte, keyed "<page_kind>.<op>"
    coeff = {f"{k}.{op}": 0.0 for k in PAGE_KINDS for op in MEMORY_OPS}
    coeff.update(
        {
            "page4k.write": 5.0e-8,
            "page4k.read": 5.0e-8,
            "page4k.exec": 1.0e-8,
            "page4k.read_write": 2.0e-8,
            "page2m.write": 1.0e-6,
            "page2m.read": 1.2e-6,
            "page2m.exec": 2.0e-7,
            "page2m.read_write": 5.0e-7,
            "mmio.write": 1.5e-7,
            "mmio.read": 2.0e-7,
        }
    )
    return coeff


def _default_background() -> dict[str, float]:
    # events per second, independent of workload activity
    rates = {f"{k}.{op}": 0.0 for k in PAGE_KINDS for op in MEMORY_OPS}
    rates.update(
        {
            "page4k.write": 2.0,
            "page4k.read": 2.0,
            "page2m.write": 20.0,
            "page2m.read": 30.0,
            "page2m.exec": 10.0,
            "page2m.read_write": 8.0,
            "mmio.write": 6.0,
            "mmio.read": 6.0,
        }
    )
    return rates


@dataclass(frozen=True)
class EnvironmentProfile:
    """The execution environment a workload runs on.

    Throughputs are bytes/s.  ``memory_event_rate_coefficients`` maps
    ``"<page_kind>.<op>"`` to EPT violations per processed byte;
    ``background_memory_rates`` adds activity-independent violations per
    second.  ``oversubscription_penalty`` is the fractional loss of aggregate
    encryption throughput per worker beyond ``thread_saturation_point``.
    """

    per_thread_encrypt_throughput: float = 8.0e6
    storage_write_throughput_cap: float = 250.0e6
    storage_read_throughput_cap: float = 400.0e6
    thread_saturation_point: int = 3
    file_size_distribution: tuple[str, dict[str, float]] = (
        "lognormal",
        {"median": 1.5e6, "sigma": 0.8, "min": 4096.0, "max": 64.0e6},
    )
    file_count: int = 5000
    memory_event_rate_coefficients: dict[str, float] = field(default_factory=_default_coefficients)
    tlb_flush_period: float = 0.05
    oversubscription_penalty: float = 0.08
    io_request_size: int = 1 << 20
    disk_sectors: int = 500_118_192
    guest_memory_bytes: int = 16 << 30
    plaintext_entropy_mean: float = 5.0
    plaintext_entropy_std: float = 0.8
    background_memory_rates: dict[str, float] = field(default_factory=_default_background)

    def violations(self) -> list[str]:
        out = []
        for name in (
            "per_thread_encrypt_throughput",
            "storage_write_throughput_cap",
            "storage_read_throughput_cap",
            "tlb_flush_period",
        ):
            if not getattr(self, name) > 0:
                out.append(f"environment.{name} must be > 0")
        if self.thread_saturation_point < 1:
            out.append("environment.thread_saturation_point must be >= 1")
        if self.file_count < 1:
            out.append("environment.file_count must be >= 1")
        if self.io_request_size < SECTOR_SIZE:
            out.append("environment.io_request_size must be >= one sector")
        for key, value in {**self.memory_event_rate_coefficients, **self.background_memory_rates}.items():
            kind, _, op = key.partition(".")
            if kind not in PAGE_KINDS or op not in MEMORY_OPS:
                out.append(f"environment: unknown memory class {key!r}")
            elif value < 0:
                out.append(f"environment: negative memory rate for {key!r}")
        return out

    def to_dict(self) -> dict[str, Any]:
        name, params = self.file_size_distribution
        return {
            "per_thread_encrypt_throughput": self.per_thread_encrypt_throughput,
            "storage_write_throughput_cap": self.storage_write_throughput_cap,
            "storage_read_throughput_cap": self.storage_read_throughput_cap,
            "thread_saturation_point": self.thread_saturation_point,
            "file_size_distribution": {"name": name, "params": dict(sorted(params.items()))},
            "file_count": self.file_count,
            "memory_event_rate_coefficients": dict(sorted(self.memory_event_rate_coefficients.items())),
            "tlb_flush_period": self.tlb_flush_period,
            "oversubscription_penalty": self.oversubscription_penalty,
            "io_request_size": self.io_request_size,
            "disk_sectors": self.disk_sectors,
            "guest_memory_bytes": self.guest_memory_bytes,
            "plaintext_entropy_mean": self.plaintext_entropy_mean,
            "plaintext_entropy_std": self.plaintext_entropy_std,
            "background_memory_rates": dict(sorted(self.background_memory_rates.items())),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EnvironmentProfile:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown environment fields: {sorted(unknown)}")
        if "file_size_distribution" in d:
            fsd = d["file_size_distribution"]
            if isinstance(fsd, dict):
                d["file_size_distribution"] = (fsd["name"], {k: float(v) for k, v in fsd.get("params", {}).items()})
            else:
                d["file_size_distribution"] = (fsd[0], dict(fsd[1]))
        for key in ("memory_event_rate_coefficients", "background_memory_rates"):
            if key in d:
                merged = {f"{k}.{op}": 0.0 for k in PAGE_KINDS for op in MEMORY_OPS}
                merged.update({k: float(v) for k, v in d[key].items()})
                d[key] = merged
        for key in ("thread_saturation_point", "file_count", "io_request_size", "disk_sectors", "guest_memory_bytes"):
            if key in d:
                d[key] = int(d[key])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class AccessTrace:
    """Time-ordered storage and memory events of one execution.

    ``file_completions`` holds, for encryptor workloads, the virtual time (ns)
    at which each file's last ciphertext write finished.
    """

    storage_events: StorageEvents
    memory_events: MemoryEvents
    label: str
    workload_name: str
    environment: EnvironmentProfile
    seed: int
    duration: float
    candidate: CandidateConfig | None = None
    file_completions: tuple[int, ...] | None = None

    def header(self) -> dict[str, Any]:
        return {
            "record": "header",
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "label": self.label,
            "workload_name": self.workload_name,
            "seed": int(self.seed),
            "duration": float(self.duration),
            "candidate": None if self.candidate is None else self.candidate.to_dict(),
            "environment": self.environment.to_dict(),
            "file_completions": None if self.file_completions is None else [int(t) for t in self.file_completions],
            "n_storage_events": len(self.storage_events),
            "n_memory_events": len(self.memory_events),
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AccessTrace):
            return NotImplemented
        return (
            self.header() == other.header()
            and self.storage_events == other.storage_events
            and self.memory_events == other.memory_events
        )

    __hash__ = None  # type: ignore[assignment]


# -- validation ---------------------------------------------------------------


def _first_bad(mask: np.ndarray, limit: int = 3) -> list[int]:
    return [int(i) for i in np.flatnonzero(mask)[:limit]]


def _check_column_range(out: list[str], what: str, mask: np.ndarray, message: str) -> None:
    if mask.any():
        idx = _first_bad(mask)
        out.append(f"{what}{idx}: {message} ({int(mask.sum())} events)")


def validate_trace(trace: AccessTrace) -> list[str]:
    """Return one description per broken invariant; empty when the trace is valid."""
    out: list[str] = []
    if trace.label not in LABELS:
        out.append(f"label {trace.label!r} not in {LABELS}")
    if not trace.duration > 0:
        out.append("duration must be > 0")
    out.extend(trace.environment.violations())
    if trace.candidate is not None:
        out.extend(f"candidate: {v}" for v in trace.candidate.violations())
    limit_ns = trace.duration * NS_PER_S

    s = trace.storage_events
    if len(s):
        _check_column_range(out, "storage", s.timestamp < 0, "negative timestamp")
        _check_column_range(out, "storage", np.diff(s.timestamp) < 0, "non-monotonic timestamp")
        _check_column_range(out, "storage", s.timestamp >= limit_ns, "timestamp at or beyond duration")
        _check_column_range(out, "storage", s.size <= 0, "non-positive size")
        _check_column_range(out, "storage", (s.op < 0) | (s.op >= len(STORAGE_OPS)), "unknown op")
        _check_column_range(out, "storage", s.lba < 0, "negative lba")
        ent = s.entropy
        _check_column_range(out, "storage", ~np.isnan(ent) & ((ent < 0) | (ent > 8)), "entropy out of range [0, 8]")
        if s.hist is not None:
            bad = s.has_hist & ((s.hist.sum(axis=1) != s.size) | (s.hist < 0).any(axis=1))
            _check_column_range(out, "storage", bad, "payload_hist does not sum to size")

    m = trace.memory_events
    if len(m):
        _check_column_range(out, "memory", m.timestamp < 0, "negative timestamp")
        _check_column_range(out, "memory", np.diff(m.timestamp) < 0, "non-monotonic timestamp")
        _check_column_range(out, "memory", m.timestamp >= limit_ns, "timestamp at or beyond duration")
        _check_column_range(out, "memory", (m.op < 0) | (m.op >= len(MEMORY_OPS)), "unknown op")
        _check_column_range(
            out, "memory", (m.page_kind < 0) | (m.page_kind >= len(PAGE_KINDS)), "unknown page_kind"
        )
        _check_column_range(out, "memory", m.gpa < 0, "negative gpa")
        ent = m.entropy
        _check_column_range(out, "memory", ~np.isnan(ent) & ((ent < 0) | (ent > 8)), "entropy out of range [0, 8]")
    return out


# -- JSONL --------------------------------------------------------------------


def _open_text(path: Path, mode: str):
    if path.suffix == ".gz":
        # mtime=0 keeps gzip output byte-identical across runs
        raw = open(path, mode[0] + "b")
        if mode[0] == "w":
            gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0, compresslevel=1)
        else:
            gz = gzip.GzipFile(fileobj=raw, mode="rb")
        return _Closing(io.TextIOWrapper(gz, encoding="utf-8", newline="\n"), raw)
    return open(path, mode, encoding="utf-8", newline="\n")


class _Closing:
    def __init__(self, wrapper, raw):
        self.wrapper, self.raw = wrapper, raw

    def __enter__(self):
        return self.wrapper

    def __exit__(self, *exc):
        self.wrapper.close()
        self.raw.close()


def _dumps(obj: dict[str, Any]) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _storage_records(s: StorageEvents) -> Iterator[dict[str, Any]]:
    ts, ops, lbas, sizes = s.timestamp.tolist(), s.op.tolist(), s.lba.tolist(), s.size.tolist()
    ent = s.entropy.tolist()
    for i in range(len(s)):
        rec: dict[str, Any] = {
            "record": "storage",
            "timestamp": ts[i],
            "op": STORAGE_OPS[ops[i]],
            "lba": lbas[i],
            "size": sizes[i],
        }
        if s.has_hist[i]:
            rec["payload_hist"] = s.hist[i].tolist()
        if not math.isnan(ent[i]):
            rec["payload_entropy"] = ent[i]
        yield rec


def _memory_records(m: MemoryEvents) -> Iterator[dict[str, Any]]:
    ts, ops, gpas, kinds = m.timestamp.tolist(), m.op.tolist(), m.gpa.tolist(), m.page_kind.tolist()
    ent = m.entropy.tolist()
    for i in range(len(m)):
        rec: dict[str, Any] = {
            "record": "memory",
            "timestamp": ts[i],
            "op": MEMORY_OPS[ops[i]],
            "gpa": gpas[i],
            "page_kind": PAGE_KINDS[kinds[i]],
        }
        if not math.isnan(ent[i]):
            rec["payload_entropy"] = ent[i]
        yield rec


def write_trace(trace: AccessTrace, path: str | Path, format: str = "jsonl") -> None:
    """Serialize ``trace``; identical traces produce identical bytes."""
    path = Path(path)
    problems = validate_trace(trace)
    if problems:
        raise ValueError(f"refusing to write invalid trace: {problems[:3]}")
    if format == "jsonl":
        with _open_text(path, "w") as fh:
            fh.write(_dumps(trace.header()) + "\n")
            for rec in _storage_records(trace.storage_events):
                fh.write(_dumps(rec) + "\n")
            for rec in _memory_records(trace.memory_events):
                fh.write(_dumps(rec) + "\n")
    elif format == "csv":
        _write_csv_dir(trace, path)
    else:
        raise ValueError(f"unknown trace format {format!r}")


def _header_fields(header: dict[str, Any]) -> dict[str, Any]:
    for key in ("label", "workload_name", "seed", "duration", "environment"):
        if key not in header:
            raise TraceSchemaError(f"header missing required field {key!r}")
    cand = header.get("candidate")
    fc = header.get("file_completions")
    return {
        "label": header["label"],
        "workload_name": header["workload_name"],
        "seed": int(header["seed"]),
        "duration": float(header["duration"]),
        "environment": EnvironmentProfile.from_dict(header["environment"]),
        "candidate": None if cand is None else CandidateConfig.from_dict(cand),
        "file_completions": None if fc is None else tuple(int(t) for t in fc),
    }


_STORAGE_REQUIRED = ("timestamp", "op", "lba", "size")
_MEMORY_REQUIRED = ("timestamp", "op", "gpa", "page_kind")


def _storage_from_records(recs: list[tuple[int, dict[str, Any]]]) -> StorageEvents:
    events = []
    for lineno, r in recs:
        for key in _STORAGE_REQUIRED:
            if key not in r:
                raise TraceSchemaError(f"line {lineno}: storage event missing required field {key!r}")
        if r["op"] not in STORAGE_OPS:
            raise TraceParseError(f"unknown storage op {r['op']!r}", lineno)
        hist = r.get("payload_hist")
        if hist is not None and len(hist) != 256:
            raise TraceParseError("payload_hist must have 256 bins", lineno)
        events.append(
            StorageEvent(
                int(r["timestamp"]),
                r["op"],
                int(r["lba"]),
                int(r["size"]),
                None if hist is None else tuple(int(v) for v in hist),
                None if r.get("payload_entropy") is None else float(r["payload_entropy"]),
            )
        )
    return StorageEvents.from_events(events) if events else StorageEvents.empty()


def _memory_from_records(recs: list[tuple[int, dict[str, Any]]]) -> MemoryEvents:
    events = []
    for lineno, r in recs:
        for key in _MEMORY_REQUIRED:
            if key not in r:
                raise TraceSchemaError(f"line {lineno}: memory event missing required field {key!r}")
        if r["op"] not in MEMORY_OPS:
            raise TraceParseError(f"unknown memory op {r['op']!r}", lineno)
        if r["page_kind"] not in PAGE_KINDS:
            raise TraceParseError(f"unknown page_kind {r['page_kind']!r}", lineno)
        events.append(
            MemoryEvent(
                int(r["timestamp"]),
                r["op"],
                int(r["gpa"]),
                r["page_kind"],
                None if r.get("payload_entropy") is None else float(r["payload_entropy"]),
            )
        )
    return MemoryEvents.from_events(events) if events else MemoryEvents.empty()


def read_trace(path: str | Path, format: str = "jsonl", *, strict: bool = False) -> AccessTrace:
    """Load a trace written by :func:`write_trace`.

    Invariant violations are logged (or raised with ``strict=True``); malformed
    input raises :class:`TraceParseError` / :class:`TraceSchemaError`.
    """
    path = Path(path)
    if format == "jsonl":
        trace = _read_jsonl(path)
    elif format == "csv":
        trace = _read_csv_dir(path)
    else:
        raise ValueError(f"unknown trace format {format!r}")
    problems = validate_trace(trace)
    if problems:
        if strict:
            raise ValueError(f"{path}: invalid trace: {problems}")
        for p in problems:
            logger.warning("%s: %s", path, p)
    return trace


def _read_jsonl(path: Path) -> AccessTrace:
    header = None
    storage: list[tuple[int, dict[str, Any]]] = []
    memory: list[tuple[int, dict[str, Any]]] = []
    with _open_text(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict):
                raise TraceParseError("record is not an object", lineno)
            kind = rec.get("record")
            if kind == "header":
                if header is not None:
                    raise TraceParseError("duplicate header record", lineno)
                header = rec
            elif kind == "storage":
                storage.append((lineno, rec))
            elif kind == "memory":
                memory.append((lineno, rec))
            else:
                raise TraceParseError(f"unknown record type {kind!r}", lineno)
    if header is None:
        raise TraceSchemaError(f"{path}: no header record")
    return AccessTrace(
        storage_events=_storage_from_records(storage),
        memory_events=_memory_from_records(memory),
        **_header_fields(header),
    )


# -- CSV directory ------------------------------------------------------------

_STORAGE_COLUMNS = ("timestamp", "op", "lba", "size", "payload_hist", "payload_entropy")
_MEMORY_COLUMNS = ("timestamp", "op", "gpa", "page_kind", "payload_entropy")


def _write_csv_dir(trace: AccessTrace, path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    (path / "meta.json").write_text(json.dumps(trace.header(), indent=1, sort_keys=True) + "\n")
    with open(path / "storage.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_STORAGE_COLUMNS)
        for rec in _storage_records(trace.storage_events):
            hist = rec.get("payload_hist")
            ent = rec.get("payload_entropy")
            w.writerow(
                [
                    rec["timestamp"],
                    rec["op"],
                    rec["lba"],
                    rec["size"],
                    "" if hist is None else " ".join(map(str, hist)),
                    "" if ent is None else repr(ent),
                ]
            )
    with open(path / "memory.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_MEMORY_COLUMNS)
        for rec in _memory_records(trace.memory_events):
            ent = rec.get("payload_entropy")
            w.writerow([rec["timestamp"], rec["op"], rec["gpa"], rec["page_kind"], "" if ent is None else repr(ent)])


def _csv_rows(path: Path, required: tuple[str, ...]) -> list[tuple[int, dict[str, Any]]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise TraceSchemaError(f"{path.name}: missing required column(s) {missing}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            rec: dict[str, Any] = {}
            try:
                for key, value in row.items():
                    if value is None or value == "":
                        continue
                    if key == "payload_hist":
                        rec[key] = [int(v) for v in value.split()]
                    elif key == "payload_entropy":
                        rec[key] = float(value)
                    elif key in ("op", "page_kind"):
                        rec[key] = value
                    else:
                        rec[key] = int(value)
            except ValueError as exc:
                raise TraceParseError(f"{path.name}: {exc}", lineno) from None
            rows.append((lineno, rec))
        return rows


def _read_csv_dir(path: Path) -> AccessTrace:
    try:
        header = json.loads((path / "meta.json").read_text())
    except FileNotFoundError:
        raise TraceSchemaError(f"{path}: missing meta.json") from None
    return AccessTrace(
        storage_events=_storage_from_records(_csv_rows(path / "storage.csv", _STORAGE_REQUIRED)),
        memory_events=_memory_from_records(_csv_rows(path / "memory.csv", _MEMORY_REQUIRED)),
        **_header_fields(header),
    )
