"""Ingest externally collected traces through a column-mapping config.

The mapping is a YAML (or already-parsed dict) document::

    time_origin: first        # "first": shift so the earliest event is t=0; "absolute": keep
    sources:
      - file: ata_write.csv   # relative to the mapping file / base_dir
        kind: storage         # storage | memory
        delimiter: ","
        constants: {op: write}
        columns:              # canonical field -> source column
          timestamp_seconds: "UNIX time(s)"
          timestamp_nanoseconds: "UNIX time(ns)"
          lba: LBA
          size: size
          payload_entropy: entropy
        scale: {size: 1}      # multiplicative unit conversion, applied before int rounding
        values:               # per-field value translation
          page_kind: {"4K": page4k, "2M": page2m, "MMIO": mmio}

``timestamp`` may be given directly (``scale.timestamp`` converts it to ns) or
as a ``timestamp_seconds`` + ``timestamp_nanoseconds`` pair.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Any

from .trace import (
    MEMORY_OPS,
    NS_PER_S,
    PAGE_KINDS,
    STORAGE_OPS,
    AccessTrace,
    EnvironmentProfile,
    MemoryEvent,
    MemoryEvents,
    StorageEvent,
    StorageEvents,
    TraceParseError,
    TraceSchemaError,
)
from .yamlio import load_yaml

_REQUIRED = {
    "storage": ("op", "lba", "size"),
    "memory": ("op", "gpa", "page_kind"),
}
_NUMERIC = {"lba", "size", "gpa", "payload_entropy", "timestamp", "timestamp_seconds", "timestamp_nanoseconds"}


def load_mapping(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    with open(path) as fh:
        mapping = load_yaml(fh.read())
    mapping.setdefault("_base_dir", str(path.parent))
    return mapping


def _field_value(name: str, row: dict[str, str], src: dict[str, Any], lineno: int, fname: str):
    consts = src.get("constants", {})
    if name in consts:
        raw: Any = consts[name]
    else:
        col = src.get("columns", {}).get(name)
        if col is None:
            return None
        raw = row.get(col)
        if raw is None:
            raise TraceSchemaError(f"{fname}: missing source column {col!r} (for {name})")
        raw = raw.strip()
        if raw == "":
            return None
    raw = src.get("values", {}).get(name, {}).get(raw, raw)
    if name in _NUMERIC:
        try:
            value = float(raw) if not isinstance(raw, (int, float)) else raw
        except ValueError:
            raise TraceParseError(f"{fname}: {name}={raw!r} is not numeric", lineno) from None
        factor = src.get("scale", {}).get(name)
        if factor is not None:
            value = value * factor
        return value
    return raw


def _timestamp(row, src, lineno, fname) -> int:
    ts = _field_value("timestamp", row, src, lineno, fname)
    if ts is not None:
        return int(round(ts))
    sec = _field_value("timestamp_seconds", row, src, lineno, fname)
    nsec = _field_value("timestamp_nanoseconds", row, src, lineno, fname)
    if sec is None:
        raise TraceSchemaError(f"{fname}: no timestamp mapping")
    return int(sec) * NS_PER_S + (0 if nsec is None else int(nsec))


def ingest_external(
    mapping: dict[str, Any] | str | Path,
    *,
    label: str,
    workload_name: str,
    base_dir: str | Path | None = None,
    duration: float | None = None,
    environment: EnvironmentProfile | None = None,
    seed: int = 0,
) -> AccessTrace:
    """Build an :class:`AccessTrace` from external CSV files described by ``mapping``."""
    if not isinstance(mapping, dict):
        mapping = load_mapping(mapping)
    base = Path(base_dir if base_dir is not None else mapping.get("_base_dir", "."))
    storage: list[StorageEvent] = []
    memory: list[MemoryEvent] = []
    for src in mapping.get("sources", []):
        kind = src.get("kind")
        if kind not in _REQUIRED:
            raise TraceSchemaError(f"source {src.get('file')!r}: kind must be storage or memory")
        fname = src["file"]
        with open(base / fname, newline="") as fh:
            reader = csv.DictReader(fh, delimiter=src.get("delimiter", ","))
            header = reader.fieldnames or []
            for canon, col in src.get("columns", {}).items():
                if col not in header:
                    raise TraceSchemaError(f"{fname}: missing source column {col!r} (for {canon})")
            for name in _REQUIRED[kind]:
                if name not in src.get("columns", {}) and name not in src.get("constants", {}):
                    raise TraceSchemaError(f"{fname}: no mapping for required field {name!r}")
            for lineno, row in enumerate(reader, start=2):
                ts = _timestamp(row, src, lineno, fname)
                get = lambda n: _field_value(n, row, src, lineno, fname)  # noqa: E731
                ent = get("payload_entropy")
                op = str(get("op"))
                if op not in (STORAGE_OPS if kind == "storage" else MEMORY_OPS):
                    raise TraceParseError(f"{fname}: unknown {kind} op {op!r}", lineno)
                if kind == "memory" and str(get("page_kind")) not in PAGE_KINDS:
                    raise TraceParseError(f"{fname}: unknown page_kind {get('page_kind')!r}", lineno)
                if kind == "storage":
                    storage.append(
                        StorageEvent(ts, str(get("op")), int(round(get("lba"))), int(round(get("size"))), None, ent)
                    )
                else:
                    memory.append(MemoryEvent(ts, str(get("op")), int(round(get("gpa"))), str(get("page_kind")), ent))

    all_ts = [e.timestamp for e in storage] + [e.timestamp for e in memory]
    origin = min(all_ts) if all_ts and mapping.get("time_origin", "first") == "first" else 0
    storage = sorted((_shift(e, origin) for e in storage), key=lambda e: e.timestamp)
    memory = sorted((_shift(e, origin) for e in memory), key=lambda e: e.timestamp)
    if duration is None:
        last = max(all_ts) - origin if all_ts else 0
        duration = float(max(1, math.floor(last / NS_PER_S) + 1))
    return AccessTrace(
        storage_events=StorageEvents.from_events(storage) if storage else StorageEvents.empty(),
        memory_events=MemoryEvents.from_events(memory) if memory else MemoryEvents.empty(),
        label=label,
        workload_name=workload_name,
        environment=environment or EnvironmentProfile(),
        seed=int(seed),
        duration=float(duration),
    )


def _shift(e, origin: int):
    return type(e)(**{**e.__dict__, "timestamp": e.timestamp - origin})

