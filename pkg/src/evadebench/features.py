"""Windowed 23-dimensional behavioral features.

Column order (a frozen public contract)::

    x_0         entropy of written storage payload (bits/byte)
    x_1, x_2    storage write / read throughput (bytes/s)
    x_3, x_4    population variance of written / read LBAs
    x_5, x_6    memory payload entropy of write / read_write violations
    x_7..x_10   4 KiB-page violation counts  (write, read, exec, read_write)
    x_11..x_14  2 MiB-page violation counts  (same op order)
    x_15..x_18  MMIO violation counts        (same op order)
    x_19..x_22  population variance of GPAs per op, pooled over page kinds

Empty windows yield 0 in every column.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .npzio import save_npz
from .trace import MEMORY_OPS, NS_PER_S, PAGE_KINDS, AccessTrace, MemoryEvent, StorageEvent

N_FEATURES = 23
FEATURE_IDS = tuple(f"x_{i}" for i in range(N_FEATURES))
FEATURE_NAMES = (
    "storage_write_entropy",
    "storage_write_throughput",
    "storage_read_throughput",
    "storage_write_lba_variance",
    "storage_read_lba_variance",
    "memory_write_entropy",
    "memory_read_write_entropy",
    *(f"{kind}_{op}_count" for kind in PAGE_KINDS for op in MEMORY_OPS),
    *(f"gpa_{op}_variance" for op in MEMORY_OPS),
)
ENTROPY_COLUMNS = (0, 5, 6)
COUNT_COLUMNS = tuple(range(7, 19))


@dataclass(frozen=True)
class FeatureSpec:
    t_window: float = 1.0
    t_d: float = 30.0
    entropy_normalization: str = "bits_per_byte"

    def __post_init__(self) -> None:
        if not (self.t_window > 0 and self.t_d > 0):
            raise ValueError("t_window and t_d must be > 0")
        if self.t_d_ns % self.window_ns:
            raise ValueError(f"t_d={self.t_d} is not an integer multiple of t_window={self.t_window}")
        if self.entropy_normalization not in ("bits_per_byte", "unit_interval"):
            raise ValueError(f"unknown entropy normalization {self.entropy_normalization!r}")

    @property
    def window_ns(self) -> int:
        return int(round(self.t_window * NS_PER_S))

    @property
    def t_d_ns(self) -> int:
        return int(round(self.t_d * NS_PER_S))

    @property
    def n_windows(self) -> int:
        return self.t_d_ns // self.window_ns

    def to_dict(self) -> dict[str, Any]:
        return {"t_window": self.t_window, "t_d": self.t_d, "entropy_normalization": self.entropy_normalization}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> FeatureSpec:
        return cls(float(d["t_window"]), float(d["t_d"]), d.get("entropy_normalization", "bits_per_byte"))


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """``spec.n_windows`` x 23 feature rows plus label and trace provenance."""

    values: np.ndarray
    label: str
    spec: FeatureSpec
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != N_FEATURES:
            raise ValueError(f"feature matrix must be (rows, 23), got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def column(self, i: int) -> np.ndarray:
        return self.values[:, i]

    def violations(self) -> list[str]:
        out = []
        v = self.values
        if v.shape != (self.spec.n_windows, N_FEATURES):
            out.append(f"shape {v.shape} != ({self.spec.n_windows}, {N_FEATURES})")
        if not np.isfinite(v).all():
            out.append("non-finite entries")
        top = 8.0 if self.spec.entropy_normalization == "bits_per_byte" else 1.0
        ent = v[:, ENTROPY_COLUMNS]
        if (ent < 0).any() or (ent > top + 1e-12).any():
            out.append("entropy column out of range")
        counts = v[:, COUNT_COLUMNS]
        if (counts < 0).any() or (counts != np.round(counts)).any():
            out.append("count column not a nonnegative integer")
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return (
            self.label == other.label
            and self.spec == other.spec
            and self.provenance == other.provenance
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None  # type: ignore[assignment]


# -- per-window primitives ------------------------------------------------------


def shannon_entropy(hist: Sequence[int] | np.ndarray) -> float:
    """Shannon entropy (bits/symbol) of a count histogram; 0 for an empty one."""
    h = np.asarray(hist, dtype=np.float64)
    total = h.sum()
    if total <= 0:
        return 0.0
    p = h[h > 0] / total
    return float(max(0.0, -(p * np.log2(p)).sum()))


def _row_entropy(hist: np.ndarray) -> np.ndarray:
    h = np.asarray(hist, dtype=np.float64)
    total = h.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(total > 0, h / np.where(total > 0, total, 1), 0.0)
        terms = np.where(p > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return np.maximum(0.0, -terms.sum(axis=1))


def window_entropy(events: Iterable[StorageEvent | MemoryEvent]) -> float:
    """Payload entropy of one window's write events, in bits/byte.

    When every event carries a byte histogram the histograms are merged and
    the entropy of the merged distribution is returned.  Otherwise the result
    is the size-weighted mean of per-event entropies (memory events weigh 1;
    an event's entropy comes from its histogram when ``payload_entropy`` is
    absent).  Events with neither are ignored; no usable events gives 0.
    """
    events = list(events)
    hists = [getattr(e, "payload_hist", None) for e in events]
    if events and all(h is not None for h in hists):
        return shannon_entropy(np.sum(np.asarray(hists, dtype=np.int64), axis=0))
    num = den = 0.0
    for e, h in zip(events, hists):
        ent = e.payload_entropy
        if ent is None and h is not None:
            ent = shannon_entropy(h)
        if ent is None:
            continue
        w = float(getattr(e, "size", 1))
        num += w * ent
        den += w
    return num / den if den > 0 else 0.0


def window_variance(addresses: Iterable[int] | np.ndarray) -> float:
    """Population variance (two-pass); fewer than two addresses gives 0."""
    a = np.asarray(list(addresses) if not isinstance(addresses, np.ndarray) else addresses, dtype=np.float64)
    if a.shape[0] < 2:
        return 0.0
    d = a - a.mean()
    return float(np.dot(d, d) / a.shape[0])


# -- vectorized grouped versions used by extract ---------------------------------


def _grouped_variance(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    if idx.size == 0:
        return np.zeros(n)
    x = values.astype(np.float64)
    counts = np.bincount(idx, minlength=n).astype(np.float64)
    safe = np.where(counts > 0, counts, 1.0)
    mean = np.bincount(idx, weights=x, minlength=n) / safe
    d = x - mean[idx]
    var = np.bincount(idx, weights=d * d, minlength=n) / safe
    var[counts < 2] = 0.0
    return var


def _grouped_mean(idx: np.ndarray, values: np.ndarray, weights: np.ndarray, n: int) -> np.ndarray:
    den = np.bincount(idx, weights=weights, minlength=n)
    num = np.bincount(idx, weights=weights * values, minlength=n)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def _storage_write_entropy(s, sel: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    if not sel.any():
        return np.zeros(n)
    widx = idx[sel]
    has_hist = s.has_hist[sel]
    ent = s.entropy[sel]
    size = s.size[sel].astype(np.float64)
    out = np.zeros(n)

    merged = np.zeros((n, 256))
    if s.hist is not None and has_hist.any():
        np.add.at(merged, widx[has_hist], s.hist[sel][has_hist])
    lacking = np.bincount(widx[~has_hist], minlength=n)
    present = np.bincount(widx, minlength=n)
    all_hist = (lacking == 0) & (present > 0)
    if all_hist.any():
        out[all_hist] = _row_entropy(merged[all_hist])

    rest = ~all_hist & (present > 0)
    if rest.any():
        per_event = ent.copy()
        need = np.isnan(per_event) & has_hist
        if need.any():
            per_event[need] = _row_entropy(s.hist[sel][need])
        usable = ~np.isnan(per_event)
        fallback = _grouped_mean(widx[usable], per_event[usable], size[usable], n)
        out[rest] = fallback[rest]
    return out


def extract(trace: AccessTrace, spec: FeatureSpec) -> FeatureMatrix:
    """Windowed 23-column feature matrix of ``trace`` over ``[0, spec.t_d)``."""
    if trace.duration * NS_PER_S < spec.t_d_ns:
        raise ValueError(f"trace duration {trace.duration} s is shorter than t_d={spec.t_d} s")
    n = spec.n_windows
    w_ns = spec.window_ns
    x = np.zeros((n, N_FEATURES))

    s = trace.storage_events
    if len(s):
        inside = s.timestamp < spec.t_d_ns
        idx = (s.timestamp // w_ns).astype(np.int64)
        writes = inside & (s.op == 1)
        reads = inside & (s.op == 0)
        x[:, 0] = _storage_write_entropy(s, writes, idx, n)
        x[:, 1] = np.bincount(idx[writes], weights=s.size[writes], minlength=n) / spec.t_window
        x[:, 2] = np.bincount(idx[reads], weights=s.size[reads], minlength=n) / spec.t_window
        x[:, 3] = _grouped_variance(idx[writes], s.lba[writes], n)
        x[:, 4] = _grouped_variance(idx[reads], s.lba[reads], n)

    m = trace.memory_events
    if len(m):
        inside = m.timestamp < spec.t_d_ns
        idx = (m.timestamp // w_ns).astype(np.int64)
        for col, op in ((5, MEMORY_OPS.index("write")), (6, MEMORY_OPS.index("read_write"))):
            sel = inside & (m.op == op) & ~np.isnan(m.entropy)
            x[:, col] = _grouped_mean(idx[sel], m.entropy[sel], np.ones(int(sel.sum())), n)
        cls = m.page_kind.astype(np.int64) * len(MEMORY_OPS) + m.op.astype(np.int64)
        counts = np.bincount(idx[inside] * 12 + cls[inside], minlength=n * 12).reshape(n, 12)
        x[:, 7:19] = counts
        for j in range(len(MEMORY_OPS)):
            sel = inside & (m.op == j)
            x[:, 19 + j] = _grouped_variance(idx[sel], m.gpa[sel], n)

    if spec.entropy_normalization == "unit_interval":
        x[:, ENTROPY_COLUMNS] /= 8.0
    return FeatureMatrix(x, trace.label, spec, trace_provenance(trace))


def trace_provenance(trace: AccessTrace) -> dict[str, Any]:
    return {
        "workload_name": trace.workload_name,
        "seed": int(trace.seed),
        "duration": float(trace.duration),
        "candidate": None if trace.candidate is None else trace.candidate.to_dict(),
    }


def average_features(matrices: Sequence[FeatureMatrix]) -> FeatureMatrix:
    """Element-wise mean over trials of one workload."""
    if not matrices:
        raise ValueError("no matrices to average")
    spec = matrices[0].spec
    if any(m.spec != spec for m in matrices):
        raise ValueError("cannot average matrices with different FeatureSpecs")
    values = np.mean([m.values for m in matrices], axis=0)
    prov = dict(matrices[0].provenance)
    prov["seed"] = None
    prov["trials"] = len(matrices)
    return FeatureMatrix(values, matrices[0].label, spec, prov)


# -- serialization --------------------------------------------------------------


def write_feature_csv(fm: FeatureMatrix, path: str | Path) -> None:
    """One row per window with the 23 named columns; metadata in ``<path>.meta.json``."""
    path = Path(path)
    lines = [",".join(FEATURE_NAMES)]
    lines += [",".join(repr(float(v)) for v in row) for row in fm.values]
    path.write_text("\n".join(lines) + "\n")
    meta = {"label": fm.label, "spec": fm.spec.to_dict(), "provenance": fm.provenance, "columns": list(FEATURE_IDS)}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_feature_csv(path: str | Path) -> FeatureMatrix:
    path = Path(path)
    rows = path.read_text().splitlines()
    if rows[0].split(",") != list(FEATURE_NAMES):
        raise ValueError(f"{path}: unexpected feature header")
    values = np.array([[float(v) for v in r.split(",")] for r in rows[1:]]).reshape(-1, N_FEATURES)
    meta = json.loads(Path(str(path) + ".meta.json").read_text())
    return FeatureMatrix(values, meta["label"], FeatureSpec.from_dict(meta["spec"]), meta["provenance"])


def save_dataset(matrices: Sequence[FeatureMatrix], path: str | Path) -> None:
    """Compact binary form: one ``.npz`` with a ``(N, rows, 23)`` array."""
    if not matrices:
        raise ValueError("empty dataset")
    spec = matrices[0].spec
    if any(m.spec != spec for m in matrices):
        raise ValueError("dataset matrices must share one FeatureSpec")
    meta = {
        "spec": spec.to_dict(),
        "labels": [m.label for m in matrices],
        "provenance": [m.provenance for m in matrices],
    }
    save_npz(path, values=np.stack([m.values for m in matrices]), meta=np.array(json.dumps(meta, sort_keys=True)))


def load_dataset(path: str | Path) -> list[FeatureMatrix]:
    with np.load(path) as z:
        values = z["values"]
        meta = json.loads(str(z["meta"]))
    spec = FeatureSpec.from_dict(meta["spec"])
    return [FeatureMatrix(v, lab, spec, prov) for v, lab, prov in zip(values, meta["labels"], meta["provenance"])]
