"""Micro-behavior parameter triples for the encryptor workload."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

PARAMETER_FIELDS = ("threads", "ratio", "delay")


@dataclass(frozen=True)
class CandidateConfig:
    """One program variant: worker count, per-file encryption ratio, per-file pause.

    ``patch_delta`` lists ``(field, baseline value, candidate value)`` for every
    parameter that differs from the baseline the candidate was derived from.
    """

    threads: int
    ratio: float
    delay: float
    patch_delta: tuple[tuple[str, Any, Any], ...] = field(default=(), compare=True)

    def __post_init__(self) -> None:
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if int(self.threads) != self.threads or self.threads < 1:
            out.append(f"threads must be an integer >= 1, got {self.threads!r}")
        if not 0.0 < self.ratio <= 1.0:
            out.append(f"ratio must lie in (0, 1], got {self.ratio!r}")
        if not self.delay >= 0.0:
            out.append(f"delay must be >= 0, got {self.delay!r}")
        return out

    @property
    def params(self) -> tuple[int, float, float]:
        return (self.threads, self.ratio, self.delay)

    @property
    def key(self) -> str:
        """Stable identifier, e.g. ``t3_r1.00_d0.100``."""
        return f"t{self.threads}_r{self.ratio:.2f}_d{self.delay:.3f}"

    def relative_to(self, baseline: CandidateConfig) -> CandidateConfig:
        """Return a copy whose patch_delta is computed against ``baseline``."""
        delta = tuple(
            (name, getattr(baseline, name), getattr(self, name))
            for name in PARAMETER_FIELDS
            if getattr(baseline, name) != getattr(self, name)
        )
        return CandidateConfig(self.threads, self.ratio, self.delay, delta)

    def to_dict(self) -> dict[str, Any]:
        return {
            "threads": int(self.threads),
            "ratio": float(self.ratio),
            "delay": float(self.delay),
            "patch_delta": [list(d) for d in self.patch_delta],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CandidateConfig:
        delta = tuple(tuple(x) for x in d.get("patch_delta", ()))
        return cls(int(d["threads"]), float(d["ratio"]), float(d["delay"]), delta)


DEFAULT_BASELINE = CandidateConfig(3, 1.0, 0.100)
