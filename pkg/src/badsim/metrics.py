"""Bandwidth ledger and the fork-broadcast overhead model.

Overhead is the yearly volume of re-broadcast orphaned blocks divided by a
node's yearly traffic (monthly bandwidth times twelve). MB to GB uses the
decimal factor 1000.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass

DELIVERED = "delivered"
SUPPRESSED = "suppressed"
FORK_INTEL = "fork-intel"


@dataclass(frozen=True)
class LedgerEntry:
    tick: int
    src: int
    dst: int
    kind: str
    bytes: int
    status: str

    def as_dict(self) -> dict:
        return {"tick": self.tick, "from": self.src, "to": self.dst, "kind": self.kind,
                "bytes": self.bytes, "status": self.status}


class BandwidthLedger:
    """Append-only record of every resolved message; totals are per sender."""

    def __init__(self):
        self.entries: list[LedgerEntry] = []
        self.totals: dict[tuple[int, str], int] = defaultdict(int)

    def record(self, tick: int, src: int, dst: int, kind: str, size: int, status: str) -> LedgerEntry:
        if status not in (DELIVERED, SUPPRESSED):
            raise ValueError(f"bad status {status!r}")
        entry = LedgerEntry(tick, src, dst, kind, size, status)
        self.entries.append(entry)
        self.totals[(src, kind)] += size
        return entry

    def sent_bytes(self, node: int, kind: str | None = None) -> int:
        if kind is not None:
            return self.totals.get((node, kind), 0)
        return sum(v for (n, _), v in self.totals.items() if n == node)

    def link_counts(self) -> dict[tuple[int, int], dict[str, int]]:
        counts: dict[tuple[int, int], dict[str, int]] = defaultdict(lambda: {DELIVERED: 0, SUPPRESSED: 0})
        for e in self.entries:
            counts[(e.src, e.dst)][e.status] += 1
        return dict(counts)


@dataclass(frozen=True)
class OverheadReport:
    bad_broadcast_gb_per_year: float
    monthly_bandwidth_gb: float
    overhead_fraction: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def annual_fork_broadcast(n_orphans: float, max_block_mb: float, out_degree: float) -> float:
    """GB per year a node sends re-broadcasting every orphaned block to its peers."""
    if min(n_orphans, max_block_mb, out_degree) < 0:
        raise ValueError("inputs must be non-negative")
    return out_degree * max_block_mb * n_orphans / 1000


def overhead(bad_gb_year: float, m: float) -> float:
    """Fraction of yearly traffic spent on fork broadcast, ``m`` in GB/month."""
    if m <= 0:
        raise ValueError(f"nonpositive bandwidth: {m}")
    return bad_gb_year / (m * 12)


def overhead_report(bad_gb_year: float, m: float) -> OverheadReport:
    return OverheadReport(bad_gb_year, m, overhead(bad_gb_year, m))


def overhead_curve(bad_gb_year: float, m_values) -> list[tuple[float, float]]:
    m_values = list(m_values)
    if any(m <= 0 for m in m_values):
        raise ValueError("all m must be positive")
    return [(m, overhead(bad_gb_year, m)) for m in m_values]


def curve_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["m_gb_month", "overhead_fraction"])
    for m, ovh in rows:
        w.writerow([f"{m:g}", f"{ovh:.8f}"])
    return buf.getvalue()


def measured_overhead(ledger: BandwidthLedger, node: int, horizon_ticks: int) -> float:
    """Share of the bytes ``node`` sent before ``horizon_ticks`` that were fork intel."""
    if horizon_ticks <= 0:
        raise ValueError("horizon must be positive")
    total = intel = 0
    for e in ledger.entries:
        if e.src != node or e.tick >= horizon_ticks:
            continue
        total += e.bytes
        if e.kind == FORK_INTEL:
            intel += e.bytes
    return intel / total if total else 0.0
