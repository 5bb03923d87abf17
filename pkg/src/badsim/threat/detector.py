"""Transaction filter, pattern inspector and threat detector.

These sit between the network layer and the chain store: incoming blocks go
through :func:`filter_block`, abandoned fork branches are turned into
candidate attack sequences by :func:`inspect_fork`, and candidates enter the
threat database through :func:`confirm_threat` under a :class:`ThreatPolicy`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Collection

from ..chain import Block, ForkRecord, Transaction
from .db import AttackSequence, ThreatDatabase
from .matcher import ATTACK_DETECTED, MatcherState, Verdict

INSERTED = "inserted"
DISCARDED = "discarded"


@dataclass(frozen=True)
class ThreatPolicy:
    min_length: int = 1
    # Empty means every label is acceptable.
    label_prefixes: tuple[str, ...] = ()
    skip_recurrences: bool = True

    def accepts_label(self, label: str) -> bool:
        return not self.label_prefixes or label.startswith(self.label_prefixes)


DEFAULT_POLICY = ThreatPolicy()


@dataclass
class FilterOutcome:
    accepted: list[Transaction] = field(default_factory=list)
    rejected: list[Transaction] = field(default_factory=list)
    alerts: list[Verdict] = field(default_factory=list)

    @property
    def refused(self) -> bool:
        return bool(self.rejected)


@dataclass(frozen=True)
class Candidate:
    sequence: AttackSequence
    # Id of a stored sequence this candidate equals or prefixes.
    recurrence_of: int | None = None

    @property
    def recurrence(self) -> bool:
        return self.recurrence_of is not None


@dataclass(frozen=True)
class Confirmation:
    status: str
    sequence: AttackSequence | None = None
    reason: str = ""
    evicted: tuple[int, ...] = ()

    @property
    def inserted(self) -> bool:
        return self.status == INSERTED


def filter_block(state: MatcherState, db: ThreatDatabase, block: Block, now: int | None = None) -> FilterOutcome:
    """Run every non-coinbase transaction of ``block`` through the matcher.

    A transaction completing a known sequence is rejected, and so is any later
    transaction of the same block continuing that sequence instance.
    """
    out = FilterOutcome()
    tails: dict[int, list[bytes]] = {}
    for tx in block.txs:
        if tx.is_coinbase:
            out.accepted.append(tx)
            continue
        verdict = state.step(db, tx.txid, now)
        if not verdict.is_clean:
            out.alerts.append(verdict)
        if verdict.kind == ATTACK_DETECTED:
            out.rejected.append(tx)
            for sid in verdict.detected:
                seq = db.get(sid)
                tails[sid] = list(seq.hashes[db.theta(seq):])
            continue
        continued = False
        for tail in tails.values():
            if tail and tail[0] == tx.txid:
                tail.pop(0)
                continued = True
        (out.rejected if continued else out.accepted).append(tx)
    return out


def inspect_fork(record: ForkRecord, db: ThreatDatabase,
                 mainstream: Collection[bytes] | None = None) -> list[Candidate]:
    """Turn a fork record's branch-only transactions into candidate sequences.

    ``mainstream`` is an optional set of txids currently on the main chain;
    those are dropped. Branches longer than the database's length cap are
    split into consecutive chunks.
    """
    hashes = [h for h in record.suspicious_txs if mainstream is None or h not in mainstream]
    if not hashes:
        return []
    label = f"fork:{record.origin_node}:{record.start_time}"
    out = []
    cap = db.max_length
    for start in range(0, len(hashes), cap):
        chunk = hashes[start:start + cap]
        seq = AttackSequence(0, tuple(chunk), label, record.detect_time)
        known = db.find_recurrence(chunk)
        out.append(Candidate(seq, known.id if known else None))
    return out


def confirm_threat(db: ThreatDatabase, candidate: Candidate | AttackSequence,
                   policy: ThreatPolicy = DEFAULT_POLICY, now: int = 0) -> Confirmation:
    """Store a candidate if ``policy`` lets it in, then prune to capacity."""
    seq = candidate.sequence if isinstance(candidate, Candidate) else candidate
    if seq.length < policy.min_length:
        return Confirmation(DISCARDED, reason="too-short")
    if not policy.accepts_label(seq.label):
        return Confirmation(DISCARDED, reason="label")
    if policy.skip_recurrences:
        known = db.find_recurrence(seq.hashes)
        if known is not None:
            db.touch(known.id, now)
            return Confirmation(DISCARDED, known, reason="known")
    stored = db.add(AttackSequence(db.new_id(), seq.hashes, seq.label, now))
    evicted = prune(db)
    return Confirmation(INSERTED, stored, evicted=tuple(evicted))


def _staleness(db: ThreatDatabase, seq: AttackSequence):
    activity = max(seq.first_seen, db.last_matched.get(seq.id, -1))
    return activity, seq.first_seen, seq.id


def prune(db: ThreatDatabase, policy: ThreatPolicy | None = None) -> list[int]:
    """Evict least-recently-matched sequences until ``k <= capacity``.

    A sequence that was never matched counts as active at its ``first_seen``
    tick, so a fresh insert is not evicted ahead of long-idle entries.
    """
    evicted = []
    if db.capacity is None:
        return evicted
    while db.k > db.capacity:
        victim = min(db.sequences, key=lambda s: _staleness(db, s))
        db.remove(victim.id)
        evicted.append(victim.id)
    return evicted
