from __future__ import annotations

import gzip
import json

import numpy as np
import pytest
from conftest import random_trace

from evadebench.candidates import CandidateConfig
from evadebench.simulator import WorkloadSpec, simulate
from evadebench.trace import (
    AccessTrace,
    EnvironmentProfile,
    MemoryEvent,
    MemoryEvents,
    StorageEvent,
    StorageEvents,
    TraceParseError,
    TraceSchemaError,
    read_trace,
    validate_trace,
    write_trace,
)


def _tiny(storage=(), memory=(), duration=1.0, label="benign"):
    return AccessTrace(
        StorageEvents.from_events(storage) if storage else StorageEvents.empty(),
        MemoryEvents.from_events(memory) if memory else MemoryEvents.empty(),
        label,
        "tiny",
        EnvironmentProfile(),
        0,
        duration,
    )


@pytest.mark.parametrize("suffix,fmt", [(".jsonl", "jsonl"), (".jsonl.gz", "jsonl"), ("", "csv")])
def test_round_trip_is_lossless(tmp_path, rng, suffix, fmt):
    tr = random_trace(rng, duration=2.0, n_storage=120, n_memory=200)
    path = tmp_path / f"t{suffix}"
    write_trace(tr, path, fmt)
    back = read_trace(path, fmt, strict=True)
    assert back == tr


def test_simulated_trace_round_trip(tmp_path, env):
    tr = simulate(WorkloadSpec("encryptor", candidate=CandidateConfig(2, 0.5, 0.025), duration=3.0), env, 9)
    p = tmp_path / "sim.jsonl.gz"
    write_trace(tr, p)
    back = read_trace(p, strict=True)
    assert back == tr
    assert back.file_completions == tr.file_completions
    assert back.candidate.params == (2, 0.5, 0.025)


def test_identical_traces_give_identical_bytes(tmp_path, rng):
    tr = random_trace(rng, n_storage=50, n_memory=50)
    a, b = tmp_path / "a.jsonl.gz", tmp_path / "b.jsonl.gz"
    write_trace(tr, a)
    write_trace(tr, b)
    assert a.read_bytes() == b.read_bytes()


def test_iteration_yields_row_dataclasses(rng):
    tr = random_trace(rng, n_storage=10, n_memory=10)
    rows = list(tr.storage_events)
    assert all(isinstance(r, StorageEvent) for r in rows)
    assert StorageEvents.from_events(rows) == tr.storage_events
    mrows = list(tr.memory_events)
    assert all(isinstance(r, MemoryEvent) for r in mrows)


def test_valid_trace_has_no_violations(rng):
    assert validate_trace(random_trace(rng)) == []


def test_non_monotonic_timestamps_are_reported():
    tr = _tiny(storage=[StorageEvent(500, "read", 0, 4096), StorageEvent(100, "read", 8, 4096)])
    problems = validate_trace(tr)
    assert any("non-monotonic" in p for p in problems)


def test_histogram_must_sum_to_size():
    hist = tuple([16] * 256)  # sums to 4096
    ok = _tiny(storage=[StorageEvent(0, "write", 0, 4096, hist)])
    bad = _tiny(storage=[StorageEvent(0, "write", 0, 8192, hist)])
    assert validate_trace(ok) == []
    assert any("hist" in p for p in validate_trace(bad))


@pytest.mark.parametrize(
    "event,needle",
    [
        (StorageEvent(0, "write", 0, 0), "size"),
        (StorageEvent(0, "read", -1, 4096), "lba"),
        (StorageEvent(0, "read", 0, 4096, None, 8.5), "entropy"),
        (StorageEvent(2_000_000_000, "read", 0, 4096), "duration"),
    ],
)
def test_storage_invariants(event, needle):
    problems = validate_trace(_tiny(storage=[event]))
    assert problems and any(needle in p for p in problems), problems


def test_memory_invariants():
    problems = validate_trace(_tiny(memory=[MemoryEvent(0, "write", -4096, "page4k")]))
    assert any("gpa" in p for p in problems)


def test_write_refuses_invalid_trace(tmp_path):
    tr = _tiny(storage=[StorageEvent(0, "write", 0, 0)])
    with pytest.raises(ValueError):
        write_trace(tr, tmp_path / "x.jsonl")


def _lines(tmp_path, rng):
    tr = random_trace(rng, n_storage=5, n_memory=5)
    p = tmp_path / "t.jsonl"
    write_trace(tr, p)
    return p, p.read_text().splitlines()


def test_malformed_line_reports_line_number(tmp_path, rng):
    p, lines = _lines(tmp_path, rng)
    lines[3] = lines[3][:-5]
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceParseError) as exc:
        read_trace(p)
    assert exc.value.line == 4
    assert "line 4" in str(exc.value)


def test_missing_required_field_is_schema_error(tmp_path, rng):
    p, lines = _lines(tmp_path, rng)
    rec = json.loads(lines[1])
    del rec["lba"]
    lines[1] = json.dumps(rec)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceSchemaError, match="lba"):
        read_trace(p)


def test_unknown_op_is_parse_error(tmp_path, rng):
    p, lines = _lines(tmp_path, rng)
    rec = json.loads(lines[1])
    rec["op"] = "trim"
    lines[1] = json.dumps(rec)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(TraceParseError, match="trim"):
        read_trace(p)


def test_strict_read_raises_on_invariant_violation(tmp_path):
    hist = tuple([16] * 256)
    tr = _tiny(storage=[StorageEvent(0, "write", 0, 4096, hist)])
    p = tmp_path / "t.jsonl"
    write_trace(tr, p)
    lines = p.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["size"] = 8192
    lines[1] = json.dumps(rec)
    p.write_text("\n".join(lines) + "\n")
    assert read_trace(p).storage_events.size[0] == 8192  # lenient: logged only
    with pytest.raises(ValueError):
        read_trace(p, strict=True)


def test_gzip_header_has_no_timestamp(tmp_path, rng):
    p = tmp_path / "t.jsonl.gz"
    write_trace(random_trace(rng, n_storage=3, n_memory=3), p)
    raw = p.read_bytes()
    assert raw[4:8] == b"\x00\x00\x00\x00"
    assert gzip.decompress(raw).startswith(b'{"')


def test_columnar_equality_treats_missing_entropy_equal():
    a = StorageEvents.from_events([StorageEvent(0, "read", 0, 4096)])
    b = StorageEvents.from_events([StorageEvent(0, "read", 0, 4096)])
    assert np.isnan(a.entropy[0])
    assert a == b
