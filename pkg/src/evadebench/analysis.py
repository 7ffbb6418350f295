"""Evaluation math: per-dimension cosine similarity, average similarity, recall.

Similarity cells whose inputs contain an all-zero series are undefined; they
are carried as :class:`Excluded` markers (``NaN`` in the value array) with the
reason attached, never silently turned into 0 or 1.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .candidates import CandidateConfig
from .detector import Classifier, ConfusionMatrix, evaluate
from .features import FEATURE_IDS, N_FEATURES, FeatureMatrix, FeatureSpec

EXCLUDED = "excluded"


class UndefinedRecallError(ValueError):
    pass


@dataclass(frozen=True)
class Excluded:
    reason: str

    def __bool__(self) -> bool:
        return False


def cosine_similarity(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float | Excluded:
    """``a.b / (|a| |b|)``, or :class:`Excluded` when either vector is all zeros."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    za, zb = not np.any(a), not np.any(b)
    if za or zb:
        which = "both series" if za and zb else ("first series" if za else "second series")
        return Excluded(f"zero vector in {which}")
    if np.array_equal(a, b):
        return 1.0
    # Rescale first: raw address variances reach ~1e19 and their squares would
    # lose the small ones entirely.
    a = a / np.max(np.abs(a))
    b = b / np.max(np.abs(b))
    value = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return min(1.0, max(-1.0, value))


@dataclass(eq=False)
class SimilarityMatrix:
    """Rows x cols table of similarities; ``NaN`` marks excluded cells.

    ``included`` (optional) counts the dimensions averaged into each cell and
    ``fixed_divisor`` holds the same sums divided by 23 regardless of
    exclusions, so both readings of the averaged form are reported.
    """

    rows: list[str]
    cols: list[str]
    values: np.ndarray
    reasons: dict[tuple[int, int], str] = field(default_factory=dict)
    included: np.ndarray | None = None
    fixed_divisor: np.ndarray | None = None
    spec: FeatureSpec | None = None

    def violations(self) -> list[str]:
        out = []
        if self.values.shape != (len(self.rows), len(self.cols)):
            out.append(f"values shape {self.values.shape} != {len(self.rows)}x{len(self.cols)}")
        defined = ~np.isnan(self.values)
        if not np.isfinite(self.values[defined]).all():
            out.append("non-finite defined values")
        if np.any(np.abs(self.values[defined]) > 1 + 1e-12):
            out.append("similarity outside [-1, 1]")
        for i, j in zip(*np.nonzero(~defined)):
            if (int(i), int(j)) not in self.reasons:
                out.append(f"excluded cell ({self.rows[i]}, {self.cols[j]}) has no reason")
        return out

    def cell(self, row: str, col: str) -> float | Excluded:
        i, j = self.rows.index(row), self.cols.index(col)
        v = self.values[i, j]
        return Excluded(self.reasons[(i, j)]) if math.isnan(v) else float(v)

    def excluded_columns(self) -> list[str]:
        return [c for j, c in enumerate(self.cols) if np.isnan(self.values[:, j]).all()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["candidate", *self.cols])
        for i, r in enumerate(self.rows):
            w.writerow([r, *(EXCLUDED if math.isnan(v) else repr(float(v)) for v in self.values[i])])
        return buf.getvalue()


def _key(c: CandidateConfig | str) -> str:
    return c.key if isinstance(c, CandidateConfig) else str(c)


def candidate_similarity_table(
    features: Mapping[CandidateConfig | str, FeatureMatrix], baseline: CandidateConfig | str
) -> SimilarityMatrix:
    """Per-dimension similarity of each candidate's (trial-averaged) features to the baseline's.

    Rows follow the mapping's iteration order, which callers keep in grid order.
    """
    by_key = {_key(c): fm for c, fm in features.items()}
    base_key = _key(baseline)
    if base_key not in by_key:
        raise KeyError(f"baseline {base_key} not among candidates")
    base = by_key[base_key]
    rows = list(by_key)
    values = np.full((len(rows), N_FEATURES), np.nan)
    reasons: dict[tuple[int, int], str] = {}
    for i, k in enumerate(rows):
        fm = by_key[k]
        if fm.spec != base.spec:
            raise ValueError(f"candidate {k} uses a different FeatureSpec than the baseline")
        for j in range(N_FEATURES):
            v = cosine_similarity(base.values[:, j], fm.values[:, j])
            if isinstance(v, Excluded):
                reasons[(i, j)] = v.reason.replace("first series", "baseline").replace("second series", "candidate")
            else:
                values[i, j] = v
    return SimilarityMatrix(rows, list(FEATURE_IDS), values, reasons, spec=base.spec)


def average_similarity(a: FeatureMatrix, b: FeatureMatrix) -> tuple[float | Excluded, int, float]:
    """(mean over defined dims, number of defined dims, sum of defined dims / 23)."""
    if a.values.shape != b.values.shape:
        raise ValueError(f"shape mismatch {a.values.shape} vs {b.values.shape}")
    sims = [cosine_similarity(a.values[:, j], b.values[:, j]) for j in range(N_FEATURES)]
    defined = [s for s in sims if not isinstance(s, Excluded)]
    total = float(sum(defined))
    if not defined:
        return Excluded("no dimension defined for this pair"), 0, 0.0
    return total / len(defined), len(defined), total / N_FEATURES


def sample_similarity_table(
    features: Mapping[CandidateConfig | str, FeatureMatrix], samples: Mapping[str, FeatureMatrix]
) -> SimilarityMatrix:
    """Average per-dimension similarity between each candidate and each named sample."""
    if not samples:
        raise ValueError("sample set is empty")
    by_key = {_key(c): fm for c, fm in features.items()}
    rows, cols = list(by_key), list(samples)
    values = np.full((len(rows), len(cols)), np.nan)
    included = np.zeros((len(rows), len(cols)), dtype=np.int64)
    fixed = np.zeros((len(rows), len(cols)))
    reasons: dict[tuple[int, int], str] = {}
    for i, k in enumerate(rows):
        for j, s in enumerate(cols):
            mean, n, over23 = average_similarity(by_key[k], samples[s])
            included[i, j], fixed[i, j] = n, over23
            if isinstance(mean, Excluded):
                reasons[(i, j)] = mean.reason
            else:
                values[i, j] = mean
    spec = next(iter(by_key.values())).spec if by_key else None
    return SimilarityMatrix(rows, cols, values, reasons, included, fixed, spec)


def write_sample_similarity_csv(table: SimilarityMatrix, path: str | Path) -> None:
    """Long format: one row per (candidate, sample) with both averaging conventions."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["candidate", "sample", "mean_defined_dims", "included_dims", "mean_over_23", "excluded_dims_flag"])
    for i, r in enumerate(table.rows):
        for j, s in enumerate(table.cols):
            v = table.values[i, j]
            n = int(table.included[i, j]) if table.included is not None else N_FEATURES
            f = float(table.fixed_divisor[i, j]) if table.fixed_divisor is not None else float("nan")
            w.writerow([r, s, EXCLUDED if math.isnan(v) else repr(float(v)), n, repr(f), int(n < N_FEATURES)])
    Path(path).write_text(buf.getvalue())


def write_similarity_csv(table: SimilarityMatrix, path: str | Path) -> None:
    Path(path).write_text(table.to_csv())


# -- recall ------------------------------------------------------------------------------


def recall(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fn == 0:
        raise UndefinedRecallError("recall undefined: no positive examples (tp + fn = 0)")
    return cm.tp / (cm.tp + cm.fn)


@dataclass(frozen=True)
class RecallRow:
    candidate: CandidateConfig
    confusion: ConfusionMatrix
    recall: float


def recall_sweep(
    ensemble: Sequence[Classifier], features: Mapping[CandidateConfig, Sequence[FeatureMatrix]]
) -> list[RecallRow]:
    """Summed-ensemble confusion matrix and recall per candidate, in mapping order."""
    out = []
    for cand, mats in features.items():
        bad = [m.label for m in mats if m.label != "ransomware"]
        if bad:
            raise ValueError(f"candidate {cand.key}: recall sweep accepts only ransomware-labelled features")
        cm = evaluate(ensemble, mats)
        out.append(RecallRow(cand, cm, recall(cm)))
    return out


def write_recall_csv(rows: Sequence[RecallRow], path: str | Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["candidate", "threads", "ratio", "delay", "tp", "fn", "fp", "tn", "recall"])
    for r in rows:
        c, cm = r.candidate, r.confusion
        w.writerow([c.key, c.threads, repr(c.ratio), repr(c.delay), cm.tp, cm.fn, cm.fp, cm.tn, repr(r.recall)])
    Path(path).write_text(buf.getvalue())


def read_recall_csv(path: str | Path) -> list[RecallRow]:
    rows = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            cand = CandidateConfig(int(d["threads"]), float(d["ratio"]), float(d["delay"]))
            cm = ConfusionMatrix(int(d["tp"]), int(d["fn"]), int(d["fp"]), int(d["tn"]))
            rows.append(RecallRow(cand, cm, float(d["recall"])))
    return rows


# -- figures ------------------------------------------------------------------------------
#
# Color scales are fixed so figures from different runs compare visually:
# similarity heatmaps map [-1, 1] onto the diverging "RdBu" colormap (blue = 1),
# excluded cells are drawn light grey; recall bars share the y range [0, 1].

_SVG_SALT = "evadebench"


def _save_svg(fig: Any, path: str | Path) -> None:
    import matplotlib

    with matplotlib.rc_context({"svg.hashsalt": _SVG_SALT, "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})


def similarity_heatmap_svg(table: SimilarityMatrix, path: str | Path, title: str = "") -> None:
    from matplotlib.figure import Figure

    n_rows, n_cols = table.values.shape
    fig = Figure(figsize=(max(4.0, 0.42 * n_cols + 2.5), max(3.0, 0.3 * n_rows + 1.5)))
    ax = fig.add_subplot()
    masked = np.ma.masked_invalid(table.values)
    import matplotlib

    cmap = matplotlib.colormaps["RdBu"].with_extremes(bad="#d9d9d9")
    im = ax.imshow(masked, cmap=cmap, vmin=-1.0, vmax=1.0, aspect="auto", interpolation="nearest")
    ax.set_xticks(range(n_cols), table.cols, rotation=90, fontsize=7)
    ax.set_yticks(range(n_rows), table.rows, fontsize=7)
    fig.colorbar(im, ax=ax, label="cosine similarity")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    _save_svg(fig, path)


def recall_bars_svg(rows: Sequence[RecallRow], path: str | Path, title: str = "") -> None:
    """One panel per encryption ratio; bars grouped by thread count, one per delay."""
    from matplotlib.figure import Figure

    ratios = sorted({r.candidate.ratio for r in rows})
    threads = sorted({r.candidate.threads for r in rows})
    delays = sorted({r.candidate.delay for r in rows})
    fig = Figure(figsize=(4.5 * len(ratios), 3.4))
    width = 0.8 / max(len(delays), 1)
    for p, ratio in enumerate(ratios):
        ax = fig.add_subplot(1, len(ratios), p + 1)
        lookup = {(r.candidate.threads, r.candidate.delay): r.recall for r in rows if r.candidate.ratio == ratio}
        for k, d in enumerate(delays):
            xs = [i + (k - (len(delays) - 1) / 2) * width for i in range(len(threads))]
            ys = [lookup.get((t, d), np.nan) for t in threads]
            ax.bar(xs, ys, width=width, label=f"delay {d * 1000:g} ms")
        ax.set_xticks(range(len(threads)), [f"{t} thr" for t in threads])
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("recall")
        ax.set_title(f"encryption ratio {ratio:.0%}", fontsize=9)
        ax.legend(fontsize=6, loc="lower right")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    _save_svg(fig, path)
