"""Taint verdict reports shared by the oracle and the propagation engines."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

REPORT_MAGIC = "HTREP 1"


@dataclass(frozen=True)
class SinkVerdict:
    site: str  # "func@index"
    slot: str  # "r0" or "[r1+4]"
    occurrence: int  # dynamic occurrence index of this (site, slot)
    tainted: bool
    witness: tuple[str, ...] = ()

    @property
    def status(self) -> str:
        return "TAINTED" if self.tainted else "untainted"

    def key(self) -> tuple[str, str, int, bool]:
        return (self.site, self.slot, self.occurrence, self.tainted)

    def line(self, with_witness: bool = True) -> str:
        s = f"sink {self.slot}@{self.site} #{self.occurrence}: {self.status}"
        if with_witness and self.witness:
            s += " via " + " ; ".join(self.witness)
        return s


@dataclass
class TaintReport:
    verdicts: list[SinkVerdict] = field(default_factory=list)
    latency: float = 0.0  # seconds from end of trace generation to end of propagation
    warnings: list[str] = field(default_factory=list)

    @property
    def tainted_count(self) -> int:
        return sum(v.tainted for v in self.verdicts)

    def summary(self) -> dict[str, int]:
        return {"sinks": len(self.verdicts), "tainted": self.tainted_count,
                "untainted": len(self.verdicts) - self.tainted_count}

    def canonical(self) -> str:
        """Deterministic text form (no timing) used for equality checks."""
        return "\n".join(v.line() for v in self.verdicts) + "\n"

    def verdict_keys(self) -> list[tuple[str, str, int, bool]]:
        return [v.key() for v in self.verdicts]

    def to_text(self) -> str:
        lines = [v.line() for v in self.verdicts]
        s = self.summary()
        lines.append(f"summary sinks={s['sinks']} tainted={s['tainted']} untainted={s['untainted']}")
        return "\n".join(lines) + "\n"

    def dumps(self) -> str:
        body = {
            "verdicts": [[v.site, v.slot, v.occurrence, v.tainted, list(v.witness)] for v in self.verdicts],
            "latency": self.latency,
            "warnings": self.warnings,
        }
        return REPORT_MAGIC + "\n" + json.dumps(body, indent=1) + "\n"

    @staticmethod
    def loads(text: str) -> "TaintReport":
        head, _, body = text.partition("\n")
        if head.strip() != REPORT_MAGIC:
            raise ValueError("not a taint report file")
        d = json.loads(body)
        return TaintReport([SinkVerdict(a, b, c, t, tuple(w)) for a, b, c, t, w in d["verdicts"]],
                           d.get("latency", 0.0), d.get("warnings", []))


def diff_reports(a: TaintReport, b: TaintReport) -> list[str]:
    """Human-readable verdict differences (witnesses ignored)."""
    out = []
    ka, kb = a.verdict_keys(), b.verdict_keys()
    if len(ka) != len(kb):
        out.append(f"sink occurrence count differs: {len(ka)} vs {len(kb)}")
    for x, y in zip(ka, kb):
        if x != y:
            out.append(f"{x[1]}@{x[0]} #{x[2]}: {'T' if x[3] else 'U'} vs {y[1]}@{y[0]} #{y[2]}: {'T' if y[3] else 'U'}")
    return out
