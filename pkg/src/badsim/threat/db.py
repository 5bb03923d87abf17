"""Threat database: an unsized list of attack sequences of transaction hashes.

Binary layout (all integers little-endian)::

    b"BADT" | u16 version=1 | varint k
    per sequence: varint id | varint length | length x 32-byte hash
                  | varint label-len | label (utf-8) | u64 first_seen
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from ..chain import TxHash
from ..encoding import MalformedInput, Reader, sha256d, u64, var_bytes, varint

MAGIC = b"BADT"
VERSION = 1
DEFAULT_MAX_LENGTH = 64
THRESHOLD_MODES = ("full", "scaled")


def prevention_threshold(length: int, mode: str = "full") -> int:
    """Prefix length at which a sequence starts being rejected.

    ``full`` waits for the whole sequence. ``scaled`` fires earlier, after
    roughly a third of it plus one transaction.
    """
    if mode == "full":
        return length
    if mode == "scaled":
        return min(length, max(1, math.ceil(length / 3)) + 1)
    raise ValueError(f"unknown threshold mode {mode!r}")


@dataclass(frozen=True)
class AttackSequence:
    id: int
    hashes: tuple[TxHash, ...]
    label: str = ""
    first_seen: int = 0

    def __post_init__(self):
        if not self.hashes:
            raise ValueError("attack sequence must hold at least one hash")
        object.__setattr__(self, "hashes", tuple(TxHash(h) for h in self.hashes))

    @property
    def length(self) -> int:
        return len(self.hashes)

    @property
    def digest(self) -> bytes:
        """Identity of the hash list alone; labels and ids are ignored."""
        return sha256d(b"".join(self.hashes))

    def encode(self) -> bytes:
        label = self.label.encode()
        return b"".join([varint(self.id), varint(self.length), *self.hashes,
                         var_bytes(label), u64(self.first_seen)])


class ThreatDatabase:
    """Known attack sequences plus the bookkeeping pruning needs.

    ``version`` increases on every mutation so matchers can tell when their
    compiled index is stale. ``last_matched`` is runtime state and is not
    serialised.
    """

    def __init__(self, sequences: Iterable[AttackSequence] = (), capacity: int | None = None,
                 threshold: str = "full", max_length: int = DEFAULT_MAX_LENGTH):
        if threshold not in THRESHOLD_MODES:
            raise ValueError(f"unknown threshold mode {threshold!r}")
        self.capacity = capacity
        self.threshold = threshold
        self.max_length = max_length
        self.sequences: list[AttackSequence] = []
        self.last_matched: dict[int, int] = {}
        self.version = 0
        self._next_id = 1
        for seq in sequences:
            self.add(seq)

    @property
    def k(self) -> int:
        return len(self.sequences)

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ThreatDatabase):
            return NotImplemented
        return self.sequences == other.sequences

    def __repr__(self) -> str:
        return f"ThreatDatabase(k={self.k}, capacity={self.capacity})"

    def get(self, seq_id: int) -> AttackSequence | None:
        for seq in self.sequences:
            if seq.id == seq_id:
                return seq
        return None

    def total_length(self) -> int:
        return sum(s.length for s in self.sequences)

    def theta(self, seq: AttackSequence) -> int:
        return prevention_threshold(seq.length, self.threshold)

    def add(self, seq: AttackSequence) -> AttackSequence:
        """Insert as-is; ``id`` must be unused. Does not prune."""
        if seq.length > self.max_length:
            raise ValueError(f"sequence length {seq.length} exceeds cap {self.max_length}")
        if any(s.id == seq.id for s in self.sequences):
            raise ValueError(f"duplicate sequence id {seq.id}")
        self.sequences.append(seq)
        self._next_id = max(self._next_id, seq.id + 1)
        self.version += 1
        return seq

    def new_id(self) -> int:
        return self._next_id

    def remove(self, seq_id: int) -> None:
        self.sequences = [s for s in self.sequences if s.id != seq_id]
        self.last_matched.pop(seq_id, None)
        self.version += 1

    def touch(self, seq_id: int, now: int) -> None:
        self.last_matched[seq_id] = now

    def find_recurrence(self, hashes: Sequence[bytes]) -> AttackSequence | None:
        """Existing sequence that ``hashes`` equals or is a prefix of."""
        n = len(hashes)
        for seq in self.sequences:
            if seq.length >= n and tuple(seq.hashes[:n]) == tuple(hashes):
                return seq
        return None

    # -- serialisation

    def serialize(self) -> bytes:
        parts = [MAGIC, VERSION.to_bytes(2, "little"), varint(self.k)]
        parts += [s.encode() for s in self.sequences]
        return b"".join(parts)

    @classmethod
    def deserialize(cls, data: bytes, **kwargs) -> ThreatDatabase:
        r = Reader(data)
        if r.take(4) != MAGIC:
            raise MalformedInput("bad magic", 0)
        version = r.u16()
        if version != VERSION:
            raise MalformedInput(f"unsupported version {version}", 4)
        db = cls(**kwargs)
        for _ in range(r.varint()):
            start = r.pos
            seq_id = r.varint()
            length = r.varint()
            if length == 0:
                raise MalformedInput("empty sequence", start)
            if length > db.max_length:
                raise MalformedInput(f"sequence length {length} exceeds cap", start)
            hashes = tuple(TxHash(r.take(32)) for _ in range(length))
            label_at = r.pos
            try:
                label = r.var_bytes().decode()
            except UnicodeDecodeError:
                raise MalformedInput("label is not utf-8", label_at) from None
            first_seen = r.u64()
            if db.get(seq_id) is not None:
                raise MalformedInput(f"duplicate sequence id {seq_id}", start)
            db.add(AttackSequence(seq_id, hashes, label, first_seen))
        r.expect_end()
        return db

    def to_json(self) -> str:
        return json.dumps({
            "version": VERSION,
            "k": self.k,
            "sequences": [
                {"id": s.id, "length": s.length, "label": s.label, "first_seen": s.first_seen,
                 "hashes": [h.hex() for h in s.hashes]}
                for s in self.sequences
            ],
        }, indent=2)


def serialize_db(db: ThreatDatabase) -> bytes:
    return db.serialize()


def deserialize_db(data: bytes, **kwargs) -> ThreatDatabase:
    return ThreatDatabase.deserialize(data, **kwargs)
