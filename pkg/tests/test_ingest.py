from __future__ import annotations

import pytest

from evadebench.features import FeatureSpec, extract
from evadebench.ingest import ingest_external, load_mapping
from evadebench.trace import TraceParseError, TraceSchemaError, validate_trace

MAPPING = """\
time_origin: first
sources:
  - file: writes.csv
    kind: storage
    constants: {op: write}
    columns:
      timestamp_seconds: sec
      timestamp_nanoseconds: nsec
      lba: LBA
      size: bytes
      payload_entropy: ent
  - file: mem.tsv
    kind: memory
    delimiter: "\\t"
    columns:
      timestamp: t_us
      op: access
      gpa: addr
      page_kind: page
    scale: {timestamp: 1000}
    values:
      page_kind: {"4K": page4k, "2M": page2m, "MMIO": mmio}
      op: {W: write, R: read, X: exec, RW: read_write}
"""


@pytest.fixture
def dataset(tmp_path):
    (tmp_path / "writes.csv").write_text(
        "sec,nsec,LBA,bytes,ent\n"
        "100,500000000,2048,4096,7.9\n"
        "100,0,1024,8192,\n"
        "101,250000000,4096,4096,7.5\n"
    )
    (tmp_path / "mem.tsv").write_text(
        "t_us\taccess\taddr\tpage\n"
        "100000000\tW\t4096\t4K\n"
        "100700000\tRW\t2097152\t2M\n"
        "101900000\tR\t4276092928\tMMIO\n"
    )
    (tmp_path / "map.yaml").write_text(MAPPING)
    return tmp_path


def test_ingest_builds_a_valid_sorted_trace(dataset):
    tr = ingest_external(load_mapping(dataset / "map.yaml"), label="ransomware", workload_name="ext")
    assert validate_trace(tr) == []
    ts = [e.timestamp for e in tr.storage_events]
    assert ts == sorted(ts)
    # earliest event (storage at 100.0 s and memory at 100.0 s) becomes t=0
    assert ts[0] == 0
    assert [e.lba for e in tr.storage_events] == [1024, 2048, 4096]
    first = list(tr.storage_events)[0]
    assert first.payload_entropy is None and first.op == "write"
    kinds = [(e.op, e.page_kind) for e in tr.memory_events]
    assert kinds == [("write", "page4k"), ("read_write", "page2m"), ("read", "mmio")]
    assert tr.memory_events.timestamp[1] == 700_000_000
    assert tr.duration == 2.0


def test_ingested_trace_feeds_the_extractor(dataset):
    tr = ingest_external(load_mapping(dataset / "map.yaml"), label="benign", workload_name="ext", duration=2.0)
    fm = extract(tr, FeatureSpec(1.0, 2.0))
    assert fm.values.shape == (2, 23)
    assert fm.values[0, 1] == 4096 + 8192


def test_missing_column_is_schema_error(dataset):
    (dataset / "writes.csv").write_text("sec,nsec,LBA,ent\n1,0,0,1\n")
    with pytest.raises(TraceSchemaError, match="bytes"):
        ingest_external(load_mapping(dataset / "map.yaml"), label="benign", workload_name="x")


def test_unknown_value_reports_line(dataset):
    (dataset / "mem.tsv").write_text("t_us\taccess\taddr\tpage\n1\tW\t0\t4K\n2\tW\t0\t1G\n")
    with pytest.raises(TraceParseError) as exc:
        ingest_external(load_mapping(dataset / "map.yaml"), label="benign", workload_name="x")
    assert exc.value.line == 3


def test_non_numeric_field_is_parse_error(dataset):
    (dataset / "writes.csv").write_text("sec,nsec,LBA,bytes,ent\n1,0,zero,4096,1\n")
    with pytest.raises(TraceParseError, match="lba"):
        ingest_external(load_mapping(dataset / "map.yaml"), label="benign", workload_name="x")
