"""Toy UTXO ledger with a fork-retaining block store.

Blocks are mined regtest style (no proof of work, the nonce is a counter).
The store follows the longest chain with first-seen tie breaking, but never
throws away the losing side of a reorganisation: every branch that stops
being the mainstream chain is summarised as a :class:`ForkRecord`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Mapping

from .encoding import MalformedInput, Reader, U64_MAX, sha256d, u64, var_bytes, varint

ZERO_HASH = bytes(32)
BLOCK_SUBSIDY = 50


class TxHash(bytes):
    """A 32-byte double-SHA-256 digest."""

    def __new__(cls, value: bytes):
        if len(value) != 32:
            raise ValueError(f"TxHash must be 32 bytes, got {len(value)}")
        return super().__new__(cls, value)

    def __repr__(self) -> str:
        return f"TxHash({self.hex()[:16]}...)"


@dataclass(frozen=True)
class OutPoint:
    txid: TxHash
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("output index must be >= 0")


@dataclass(frozen=True)
class Output:
    amount: int
    spending_condition: bytes = b""

    def __post_init__(self):
        if not 0 <= self.amount <= U64_MAX:
            raise ValueError(f"amount out of 64-bit range: {self.amount}")


@dataclass(frozen=True)
class Input:
    outpoint: OutPoint
    witness: bytes = b""


@dataclass(frozen=True)
class Transaction:
    inputs: tuple[Input, ...] = ()
    outputs: tuple[Output, ...] = ()
    payload: bytes = b""
    nonce: int = 0

    @property
    def is_coinbase(self) -> bool:
        return not self.inputs

    @cached_property
    def encoded(self) -> bytes:
        return encode_tx(self)

    @cached_property
    def txid(self) -> TxHash:
        return TxHash(sha256d(self.encoded))


@dataclass(frozen=True)
class Block:
    prev: bytes
    nonce: int
    txs: tuple[Transaction, ...]
    height: int

    @cached_property
    def encoded(self) -> bytes:
        return encode_block(self)

    @cached_property
    def hash(self) -> bytes:
        return sha256d(self.encoded)

    @property
    def miner_tag(self) -> bytes:
        """Spending condition of the coinbase's first output."""
        if self.txs and self.txs[0].outputs:
            return self.txs[0].outputs[0].spending_condition
        return b""


@dataclass(frozen=True)
class ForkRecord:
    fork_head: bytes
    branch_blocks: tuple[Block, ...]
    start_time: int
    detect_time: int
    suspicious_txs: tuple[TxHash, ...]
    origin_node: int

    def __post_init__(self):
        if not self.branch_blocks:
            raise ValueError("fork record needs at least one branch block")
        if self.detect_time < self.start_time:
            raise ValueError("detect_time precedes start_time")

    @property
    def leaf(self) -> bytes:
        return self.branch_blocks[-1].hash


class EventKind(enum.Enum):
    EXTENDED_TIP = "extended-tip"
    CREATED_FORK = "created-fork"
    EXTENDED_FORK = "extended-fork"
    REORG = "reorg"
    DUPLICATE = "duplicate"


@dataclass(frozen=True)
class ChainEvent:
    kind: EventKind
    block_hash: bytes
    # Only populated for REORG.
    old_branch: tuple[bytes, ...] = ()
    new_tip: bytes | None = None
    fork_record: ForkRecord | None = None


class ChainError(Exception):
    pass


class UnknownParent(ChainError):
    pass


class InvalidBlock(ChainError):
    pass


class NotAFork(ChainError):
    pass


class InvalidTransaction(ChainError):
    """A transaction broke a validation rule; ``rule`` names the first one."""

    RULES = ("missing-outpoint", "bad-witness", "overspend", "internal-double-spend", "no-outputs")

    def __init__(self, rule: str, detail: str = ""):
        super().__init__(f"{rule}: {detail}" if detail else rule)
        self.rule = rule


# -- canonical encoding -------------------------------------------------------

def encode_tx(tx: Transaction) -> bytes:
    parts = [varint(len(tx.inputs))]
    for txin in tx.inputs:
        parts += [bytes(txin.outpoint.txid), varint(txin.outpoint.index), var_bytes(txin.witness)]
    parts.append(varint(len(tx.outputs)))
    for out in tx.outputs:
        parts += [u64(out.amount), var_bytes(out.spending_condition)]
    parts += [var_bytes(tx.payload), u64(tx.nonce)]
    return b"".join(parts)


def encode_block(block: Block) -> bytes:
    return b"".join([block.prev, u64(block.nonce), varint(len(block.txs))]
                    + [tx.encoded for tx in block.txs])


def read_tx(r: Reader) -> Transaction:
    inputs = []
    for _ in range(r.varint()):
        txid = TxHash(r.take(32))
        inputs.append(Input(OutPoint(txid, r.varint()), r.var_bytes()))
    outputs = [Output(r.u64(), r.var_bytes()) for _ in range(r.varint())]
    payload = r.var_bytes()
    return Transaction(tuple(inputs), tuple(outputs), payload, r.u64())


def decode_tx(data: bytes) -> Transaction:
    r = Reader(data)
    tx = read_tx(r)
    r.expect_end()
    return tx


def read_block(r: Reader, height: int) -> Block:
    prev = r.take(32)
    nonce = r.u64()
    txs = tuple(read_tx(r) for _ in range(r.varint()))
    return Block(prev, nonce, txs, height)


def decode_block(data: bytes, height: int) -> Block:
    """Height is positional, not part of the encoding."""
    r = Reader(data)
    block = read_block(r, height)
    r.expect_end()
    return block


def encode_fork_record(record: ForkRecord) -> bytes:
    parts = [record.fork_head, varint(len(record.branch_blocks))]
    for b in record.branch_blocks:
        parts += [varint(b.height), var_bytes(b.encoded)]
    parts += [u64(record.start_time), u64(record.detect_time), varint(len(record.suspicious_txs))]
    parts += [bytes(h) for h in record.suspicious_txs]
    parts.append(varint(record.origin_node))
    return b"".join(parts)


def decode_fork_record(data: bytes) -> ForkRecord:
    r = Reader(data)
    head = r.take(32)
    blocks = []
    for _ in range(r.varint()):
        height = r.varint()
        blocks.append(decode_block(r.var_bytes(), height))
    start, detect = r.u64(), r.u64()
    sus = tuple(TxHash(r.take(32)) for _ in range(r.varint()))
    origin = r.varint()
    r.expect_end()
    try:
        return ForkRecord(head, tuple(blocks), start, detect, sus, origin)
    except ValueError as exc:
        raise MalformedInput(str(exc), r.pos) from exc


def hash_transaction(tx: Transaction) -> TxHash:
    return tx.txid


# -- validation ---------------------------------------------------------------

def validate_transaction(tx: Transaction, utxo: Mapping[OutPoint, Output]) -> int:
    """Check a non-coinbase transaction against a UTXO view.

    Returns the fee (inputs minus outputs). Raises InvalidTransaction naming
    the first rule broken, checking inputs in order.
    """
    seen = set()
    total_in = 0
    for txin in tx.inputs:
        op = txin.outpoint
        if op in seen:
            raise InvalidTransaction("internal-double-spend", f"{op.txid.hex()[:12]}:{op.index}")
        seen.add(op)
        prev_out = utxo.get(op)
        if prev_out is None:
            raise InvalidTransaction("missing-outpoint", f"{op.txid.hex()[:12]}:{op.index}")
        if txin.witness != prev_out.spending_condition:
            raise InvalidTransaction("bad-witness", f"{op.txid.hex()[:12]}:{op.index}")
        total_in += prev_out.amount
    if not tx.outputs:
        raise InvalidTransaction("no-outputs")
    total_out = sum(o.amount for o in tx.outputs)
    if total_out > total_in:
        raise InvalidTransaction("overspend", f"{total_out} > {total_in}")
    return total_in - total_out


def apply_tx(utxo: dict[OutPoint, Output], tx: Transaction) -> None:
    for txin in tx.inputs:
        utxo.pop(txin.outpoint, None)
    for i, out in enumerate(tx.outputs):
        utxo[OutPoint(tx.txid, i)] = out


class _Overlay(Mapping):
    """Copy-on-write view over a UTXO dict used while checking a block."""

    def __init__(self, base: Mapping[OutPoint, Output]):
        self.base = base
        self.added: dict[OutPoint, Output] = {}
        self.spent: set[OutPoint] = set()

    def __getitem__(self, op):
        if op in self.added:
            return self.added[op]
        if op in self.spent:
            raise KeyError(op)
        return self.base[op]

    def __iter__(self):
        raise TypeError("overlay is not iterable")

    def __len__(self):
        raise TypeError("overlay has no length")

    def apply(self, tx: Transaction) -> None:
        for txin in tx.inputs:
            if self.added.pop(txin.outpoint, None) is None:
                self.spent.add(txin.outpoint)
        for i, out in enumerate(tx.outputs):
            self.added[OutPoint(tx.txid, i)] = out


def make_genesis() -> Block:
    coinbase = Transaction(outputs=(Output(BLOCK_SUBSIDY, b"genesis"),), payload=b"badsim genesis")
    return Block(ZERO_HASH, 0, (coinbase,), 0)


GENESIS = make_genesis()


# -- the store ----------------------------------------------------------------

@dataclass
class EnhancedChainStore:
    """Block DAG that keeps the mainstream chain and every abandoned branch.

    ``validate=False`` gives a light-client store: headers and block
    structure are checked but no UTXO set is maintained.
    """

    owner: int = 0
    validate: bool = True
    genesis: Block = GENESIS
    blocks: dict[bytes, Block] = field(init=False, default_factory=dict)
    children: dict[bytes, list[bytes]] = field(init=False, default_factory=dict)
    arrival: dict[bytes, int] = field(init=False, default_factory=dict)
    utxo: dict[OutPoint, Output] = field(init=False, default_factory=dict)
    fork_records: list[ForkRecord] = field(init=False, default_factory=list)
    tip: bytes = field(init=False)

    def __post_init__(self):
        g = self.genesis
        self.blocks[g.hash] = g
        self.children[g.hash] = []
        self.arrival[g.hash] = 0
        self.tip = g.hash
        self._main = [g.hash]
        self._main_set = {g.hash}
        self._nonce = 0
        if self.validate:
            for tx in g.txs:
                apply_tx(self.utxo, tx)

    # -- queries

    def __contains__(self, block_hash: bytes) -> bool:
        return block_hash in self.blocks

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def height(self) -> int:
        return self.blocks[self.tip].height

    @property
    def tip_block(self) -> Block:
        return self.blocks[self.tip]

    def mainstream(self) -> list[bytes]:
        """Hashes of the mainstream chain, genesis first."""
        return list(self._main)

    def is_mainstream(self, block_hash: bytes) -> bool:
        return block_hash in self._main_set

    def ancestors(self, block_hash: bytes) -> Iterator[Block]:
        """Walk from ``block_hash`` back to genesis (inclusive)."""
        h = block_hash
        while True:
            b = self.blocks[h]
            yield b
            if b.height == 0:
                return
            h = b.prev

    def leaves(self) -> list[bytes]:
        return [h for h, kids in self.children.items() if not kids]

    def locator(self) -> list[bytes]:
        """Bitcoin-style block locator: dense near the tip, sparse after."""
        out, step, idx = [], 1, len(self._main) - 1
        while idx > 0:
            out.append(self._main[idx])
            if len(out) >= 10:
                step *= 2
            idx -= step
        out.append(self._main[0])
        return out

    def blocks_after(self, locator: Iterable[bytes]) -> list[Block]:
        """Mainstream blocks following the first locator hash we share."""
        start = 0
        for h in locator:
            if h in self._main_set:
                start = self.blocks[h].height + 1
                break
        return [self.blocks[h] for h in self._main[start:]]

    def utxo_at(self, block_hash: bytes) -> dict[OutPoint, Output]:
        """UTXO set after ``block_hash``, by full replay from genesis."""
        if block_hash == self.tip:
            return dict(self.utxo)
        utxo: dict[OutPoint, Output] = {}
        for b in reversed(list(self.ancestors(block_hash))):
            for tx in b.txs:
                apply_tx(utxo, tx)
        return utxo

    # -- mining

    def next_nonce(self) -> int:
        self._nonce += 1
        return self._nonce

    def mine_block(self, parent: bytes, txs: Iterable[Transaction] = (), miner: bytes = b"") -> Block:
        """Build (but do not insert) a block on ``parent`` with a fresh coinbase."""
        if parent not in self.blocks:
            raise UnknownParent(parent.hex())
        txs = tuple(txs)
        fees = 0
        if self.validate:
            view = _Overlay(self.utxo if parent == self.tip else self.utxo_at(parent))
            for tx in txs:
                fees += validate_transaction(tx, view)
                view.apply(tx)
        height = self.blocks[parent].height + 1
        nonce = self.next_nonce()
        coinbase = Transaction(
            outputs=(Output(BLOCK_SUBSIDY + fees, b"miner:" + miner),),
            payload=varint(height) + miner,
            nonce=nonce,
        )
        return Block(parent, nonce, (coinbase,) + txs, height)

    # -- insertion

    def check_block(self, block: Block) -> None:
        parent = self.blocks.get(block.prev)
        if parent is None:
            raise UnknownParent(block.prev.hex())
        if block.height != parent.height + 1:
            raise InvalidBlock(f"height {block.height} does not follow parent {parent.height}")
        if not block.txs or not block.txs[0].is_coinbase:
            raise InvalidBlock("first transaction must be a coinbase")
        if any(tx.is_coinbase for tx in block.txs[1:]):
            raise InvalidBlock("coinbase after position 0")
        if not self.validate:
            return
        view = _Overlay(self.utxo if block.prev == self.tip else self.utxo_at(block.prev))
        fees = 0
        for tx in block.txs[1:]:
            try:
                fees += validate_transaction(tx, view)
            except InvalidTransaction as exc:
                raise InvalidBlock(f"tx {tx.txid.hex()[:12]} {exc.rule}") from exc
            view.apply(tx)
        minted = sum(o.amount for o in block.txs[0].outputs)
        if minted > BLOCK_SUBSIDY + fees:
            raise InvalidBlock(f"coinbase mints {minted} > {BLOCK_SUBSIDY + fees}")

    def append_block(self, block: Block, now: int = 0) -> ChainEvent:
        """Insert ``block`` and apply the longest-chain rule.

        Raises UnknownParent when the parent is missing (callers buffer such
        orphans) and InvalidBlock when a transaction fails validation against
        the branch it extends.
        """
        h = block.hash
        if h in self.blocks:
            return ChainEvent(EventKind.DUPLICATE, h)
        self.check_block(block)
        parent_was_leaf = not self.children[block.prev]
        self.blocks[h] = block
        self.children[h] = []
        self.children[block.prev].append(h)
        self.arrival[h] = now

        if block.prev == self.tip:
            self.tip = h
            self._main.append(h)
            self._main_set.add(h)
            if self.validate:
                for tx in block.txs:
                    apply_tx(self.utxo, tx)
            return ChainEvent(EventKind.EXTENDED_TIP, h)

        if block.height > self.height:
            old_tip = self.tip
            self._set_tip(h)
            record = self.extract_fork_record(old_tip, now)
            self.fork_records.append(record)
            old_branch = tuple(b.hash for b in record.branch_blocks)
            return ChainEvent(EventKind.REORG, h, old_branch, h, record)

        if parent_was_leaf:
            return ChainEvent(EventKind.EXTENDED_FORK, h)
        return ChainEvent(EventKind.CREATED_FORK, h)

    def _set_tip(self, new_tip: bytes) -> None:
        self.tip = new_tip
        self._main = [b.hash for b in self.ancestors(new_tip)][::-1]
        self._main_set = set(self._main)
        if self.validate:
            self.utxo = {}
            for bh in self._main:
                for tx in self.blocks[bh].txs:
                    apply_tx(self.utxo, tx)

    def extract_fork_record(self, abandoned_leaf: bytes, now: int) -> ForkRecord:
        """Summarise the branch from the fork head up to ``abandoned_leaf``."""
        if abandoned_leaf not in self.blocks:
            raise KeyError(abandoned_leaf.hex())
        if abandoned_leaf in self._main_set:
            raise NotAFork(abandoned_leaf.hex())
        branch = []
        for b in self.ancestors(abandoned_leaf):
            if b.hash in self._main_set:
                fork_head = b.hash
                break
            branch.append(b)
        branch.reverse()
        main_txids = {tx.txid for bh in self._main for tx in self.blocks[bh].txs[1:]}
        suspicious: list[TxHash] = []
        for b in branch:
            for tx in b.txs[1:]:
                if tx.txid not in main_txids and tx.txid not in suspicious:
                    suspicious.append(tx.txid)
        return ForkRecord(
            fork_head=fork_head,
            branch_blocks=tuple(branch),
            start_time=self.arrival[branch[0].hash],
            detect_time=max(now, self.arrival[branch[0].hash]),
            suspicious_txs=tuple(suspicious),
            origin_node=self.owner,
        )
