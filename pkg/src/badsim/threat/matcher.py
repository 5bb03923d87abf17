"""Streaming partial-sequence matcher.

Every node keeps a set U of partial sequences ``(i, j)``: the first ``j``
hashes of attack sequence ``i`` were seen, in order but possibly with other
transactions in between. Each incoming hash extends every partial sequence
waiting for it and opens ``(i, 1)`` for sequences starting with it. When a
sequence reaches its prevention threshold the transaction is flagged and the
sequence's partial state is reset.

The per-hash update is done by a kernel over bitmasks (one machine word per
sequence, hence the 64-hash cap on sequence length). A compiled kernel is
used when available; set ``BADSIM_PURE=1`` to force the Python one.
"""

from __future__ import annotations

import os
from array import array
from dataclasses import dataclass

from . import _kernel_py
from .db import ThreatDatabase

try:
    from . import _kernel as _compiled_kernel
except ImportError:  # extension not built
    _compiled_kernel = None

BACKENDS = {"python": _kernel_py}
if _compiled_kernel is not None:
    BACKENDS["compiled"] = _compiled_kernel


def default_backend() -> str:
    if os.environ.get("BADSIM_PURE") or "compiled" not in BACKENDS:
        return "python"
    return "compiled"


BACKEND = default_backend()

CLEAN = "clean"
SUSPICIOUS = "suspicious"
ATTACK_DETECTED = "attack_detected"


@dataclass(frozen=True)
class Verdict:
    kind: str
    pairs: tuple[tuple[int, int], ...] = ()
    detected: tuple[int, ...] = ()

    @property
    def seq_id(self) -> int | None:
        """Lowest detected sequence id, if any."""
        return self.detected[0] if self.detected else None

    @property
    def is_clean(self) -> bool:
        return self.kind == CLEAN


CLEAN_VERDICT = Verdict(CLEAN)


class _Index:
    """Hash -> (sequence, position-mask) rows compiled from one db version."""

    def __init__(self, db: ThreatDatabase):
        self.ids = [s.id for s in db.sequences]
        self.pos = {sid: n for n, sid in enumerate(self.ids)}
        self.lengths = [s.length for s in db.sequences]
        self.detect = [1 << (db.theta(s) - 1) for s in db.sequences]
        masks: dict[bytes, dict[int, int]] = {}
        for n, seq in enumerate(db.sequences):
            for p, h in enumerate(seq.hashes):
                row = masks.setdefault(bytes(h), {})
                row[n] = row.get(n, 0) | (1 << p)
        self.rows: dict[bytes, tuple[int, int]] = {}
        self.seq_idx = array("q")
        self.pos_mask = array("Q")
        for h, row in masks.items():
            start = len(self.seq_idx)
            for n in sorted(row):
                self.seq_idx.append(n)
                self.pos_mask.append(row[n])
            self.rows[h] = (start, len(self.seq_idx))
        k = max(1, len(self.ids))
        self.touched = array("q", bytes(8 * k))
        self.formed = array("Q", bytes(8 * k))


class MatcherState:
    """The set U for one stream, plus work accounting."""

    def __init__(self, backend: str | None = None):
        self.backend = backend or BACKEND
        self._kernel = BACKENDS[self.backend]
        self.work_counter = 0
        self.last_work = 0
        self.max_step_work = 0
        self.steps = 0
        self._index: _Index | None = None
        self._db = None
        self._version = -1
        self._entries = array("Q")

    def _sync(self, db: ThreatDatabase) -> _Index:
        if db is self._db and db.version == self._version:
            return self._index
        old = self._index
        held = {}
        if old is not None and db is self._db:
            held = {sid: self._entries[n] for n, sid in enumerate(old.ids) if self._entries[n]}
        idx = _Index(db)
        entries = array("Q", bytes(8 * len(idx.ids)))
        for sid, bits in held.items():
            n = idx.pos.get(sid)
            if n is not None:
                # keep only prefixes shorter than the (possibly new) threshold
                entries[n] = bits & (idx.detect[n] - 1)
        self._index, self._entries = idx, entries
        self._db, self._version = db, db.version
        return idx

    def clear(self) -> None:
        for n in range(len(self._entries)):
            self._entries[n] = 0

    def partials(self, db: ThreatDatabase) -> frozenset[tuple[int, int]]:
        """Current U as ``(seq_id, j)`` pairs."""
        idx = self._sync(db)
        out = set()
        for n, bits in enumerate(self._entries):
            out.update((idx.ids[n], j) for j in _bit_positions(bits))
        return frozenset(out)

    def add_partial(self, db: ThreatDatabase, seq_id: int, j: int) -> None:
        idx = self._sync(db)
        n = idx.pos[seq_id]
        theta = idx.detect[n].bit_length()
        if not 1 <= j < theta:
            raise ValueError(f"j={j} outside 1..{theta - 1}")
        self._entries[n] |= 1 << (j - 1)

    def step(self, db: ThreatDatabase, h: bytes, now: int | None = None) -> Verdict:
        idx = self._sync(db)
        span = idx.rows.get(bytes(h))
        if span is None:
            self._account(0)
            return CLEAN_VERDICT
        work, n = self._kernel.advance(self._entries, span[0], span[1], idx.seq_idx,
                                       idx.pos_mask, idx.touched, idx.formed)
        self._account(work)
        pairs = []
        detected = []
        for t in range(n):
            s = idx.touched[t]
            sid = idx.ids[s]
            pairs.extend((sid, j) for j in _bit_positions(idx.formed[t]))
            if self._entries[s] & idx.detect[s]:
                detected.append(sid)
                self._entries[s] = 0
            if now is not None:
                db.touch(sid, now)
        if detected:
            return Verdict(ATTACK_DETECTED, tuple(sorted(pairs)), tuple(sorted(detected)))
        if pairs:
            return Verdict(SUSPICIOUS, tuple(sorted(pairs)))
        return CLEAN_VERDICT

    def _account(self, work: int) -> None:
        self.steps += 1
        self.last_work = work
        self.work_counter += work
        if work > self.max_step_work:
            self.max_step_work = work


def _bit_positions(bits: int):
    j = 1
    while bits:
        if bits & 1:
            yield j
        bits >>= 1
        j += 1


def matcher_step(state: MatcherState, db: ThreatDatabase, h: bytes, now: int | None = None) -> Verdict:
    return state.step(db, h, now)
