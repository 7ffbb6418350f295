"""Independent brute-force reference implementations used as test oracles.

These deliberately avoid the package's vectorized code paths: plain Python
loops over event rows, exact rational variance via ``statistics``, and
``math.log2`` entropy.
"""

from __future__ import annotations

import math
import statistics
from fractions import Fraction

PAGE_KINDS = ("page4k", "page2m", "mmio")
MEMORY_OPS = ("write", "read", "exec", "read_write")


def entropy_of_counts(counts) -> float:
    total = sum(int(c) for c in counts)
    if total == 0:
        return 0.0
    h = 0.0
    for c in counts:
        c = int(c)
        if c:
            p = c / total
            h -= p * math.log2(p)
    return max(0.0, h)


def exact_pvariance(values) -> float:
    vals = [int(v) for v in values]
    if len(vals) < 2:
        return 0.0
    return float(statistics.pvariance([Fraction(v) for v in vals]))


def window_write_entropy(events) -> float:
    if not events:
        return 0.0
    if all(e.payload_hist is not None for e in events):
        merged = [0] * 256
        for e in events:
            for i, c in enumerate(e.payload_hist):
                merged[i] += int(c)
        return entropy_of_counts(merged)
    num = den = 0.0
    for e in events:
        ent = e.payload_entropy
        if ent is None and e.payload_hist is not None:
            ent = entropy_of_counts(e.payload_hist)
        if ent is None:
            continue
        num += e.size * ent
        den += e.size
    return num / den if den else 0.0


def features(trace, t_window: float, t_d: float, unit_interval: bool = False) -> list[list[float]]:
    """All 23 columns, one Python loop per window."""
    w_ns = round(t_window * 1_000_000_000)
    td_ns = round(t_d * 1_000_000_000)
    n = td_ns // w_ns
    storage = list(trace.storage_events)
    memory = list(trace.memory_events)
    rows = []
    for k in range(n):
        lo, hi = k * w_ns, (k + 1) * w_ns
        s_in = [e for e in storage if lo <= e.timestamp < hi and e.timestamp < td_ns]
        m_in = [e for e in memory if lo <= e.timestamp < hi and e.timestamp < td_ns]
        writes = [e for e in s_in if e.op == "write"]
        reads = [e for e in s_in if e.op == "read"]
        row = [
            window_write_entropy(writes),
            sum(e.size for e in writes) / t_window,
            sum(e.size for e in reads) / t_window,
            exact_pvariance([e.lba for e in writes]),
            exact_pvariance([e.lba for e in reads]),
        ]
        for op in ("write", "read_write"):
            ents = [e.payload_entropy for e in m_in if e.op == op and e.payload_entropy is not None]
            row.append(sum(ents) / len(ents) if ents else 0.0)
        for kind in PAGE_KINDS:
            for op in MEMORY_OPS:
                row.append(float(sum(1 for e in m_in if e.page_kind == kind and e.op == op)))
        for op in MEMORY_OPS:
            row.append(exact_pvariance([e.gpa for e in m_in if e.op == op]))
        if unit_interval:
            for c in (0, 5, 6):
                row[c] /= 8.0
        rows.append(row)
    return rows


def cosine(a, b):
    """Exact rational arithmetic, so tiny or huge components neither underflow nor overflow."""
    fa, fb = [Fraction(float(x)) for x in a], [Fraction(float(y)) for y in b]
    na, nb = sum(x * x for x in fa), sum(y * y for y in fb)
    if na == 0 or nb == 0:
        return None
    dot = sum(x * y for x, y in zip(fa, fb))
    return math.copysign(math.sqrt(dot * dot / (na * nb)), dot)


def files_in_lockstep(size: int, request: int, read_rate: float, write_rate: float, ratio_bytes: int,
                      delay: float, threads: int, horizon: float) -> int:
    """Files finished before ``horizon`` when every file has the same size.

    Each worker repeats: read ``size`` in ``request``-sized chunks, write
    ``ratio_bytes`` the same way, pause ``delay``.  Chunk times are rounded
    to whole nanoseconds like the simulator's clock.
    """
    def chunk_ns(nbytes, rate):
        return max(1, round(nbytes * 1_000_000_000 / rate))

    def phase(total, rate):
        t, done = 0, 0
        while done < total:
            c = min(request, total - done)
            t += chunk_ns(c, rate)
            done += c
        return t

    busy = phase(size, read_rate) + phase(ratio_bytes, write_rate)
    pause = round(delay * 1_000_000_000)
    h_ns = horizon * 1_000_000_000
    done, t = 0, 0
    while True:
        t += busy
        if t >= h_ns:
            break
        done += 1
        t += pause
        if t >= h_ns:
            break
    return done * threads
