"""Deterministic discrete-event simulation of a blockchain p2p network.

Nodes hold fork-retaining chain stores and, when detection is enabled, a threat
database plus one matcher per feeding peer. Blocks are relayed by flooding;
fork intelligence is flooded with duplicate suppression. An adversary can
eclipse a victim for a finite window, during which every honest message to
or from the victim is dropped and only attacker-controlled peers talk to it.

Time is measured in integer ticks (one tick is one second). Events fire in
(tick, insertion order), so a run is a pure function of its SimConfig.
"""

from __future__ import annotations

import heapq
import json
import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field

from .chain import (
    GENESIS,
    Block,
    EnhancedChainStore,
    EventKind,
    ForkRecord,
    InvalidBlock,
    Transaction,
    encode_fork_record,
)
from .encoding import varint
from .metrics import DELIVERED, FORK_INTEL, SUPPRESSED, BandwidthLedger
from .threat import (
    AttackSequence,
    MatcherState,
    ThreatDatabase,
    ThreatPolicy,
    confirm_threat,
    filter_block,
    inspect_fork,
)

log = logging.getLogger(__name__)

FULL, LIGHT, ATTACKER = "full", "light", "attacker"
ROLES = (FULL, LIGHT, ATTACKER)

BLOCK = "block"
GET_BLOCKS = "get-blocks"

# Trace kinds written at the "quiet" verbosity level.
SECURITY_KINDS = frozenset({
    "alert", "refused", "reorg", "fork-record", "threat", "intel", "eclipse-start",
    "eclipse-end", "eclipse-failed", "inject", "probe",
})


class SimError(Exception):
    pass


class UnconnectableConfig(SimError):
    pass


class OverlappingWindow(SimError):
    pass


def miner_tag(node_id: int) -> bytes:
    return str(node_id).encode()


@dataclass(frozen=True)
class EclipseWindow:
    victim: int
    controlled_peers: tuple[int, ...]
    start: int
    end: int

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"eclipse window must satisfy start < end ({self.start}, {self.end})")
        if not self.controlled_peers:
            raise ValueError("eclipse needs at least one controlled peer")
        object.__setattr__(self, "controlled_peers", tuple(self.controlled_peers))

    def active(self, tick: int) -> bool:
        return self.start <= tick < self.end


@dataclass(frozen=True)
class MineAction:
    tick: int
    node: int
    txs: tuple[Transaction, ...] = ()


@dataclass(frozen=True)
class InjectAction:
    """Attacker mines a chain of blocks on the victim's tip and sends them."""
    tick: int
    attacker: int
    victim: int
    blocks: tuple[tuple[Transaction, ...], ...]


@dataclass(frozen=True)
class EdgeAction:
    tick: int
    a: int
    b: int
    add: bool = True


@dataclass(frozen=True)
class ProbeAction:
    tick: int
    node: int


@dataclass
class SimConfig:
    seed: int = 0
    n_nodes: int = 8
    out_degree: int = 8
    latency: tuple[int, int] = (1, 60)
    roles: dict[int, str] = field(default_factory=dict)
    bad_disabled: tuple[int, ...] = ()
    # Explicit undirected edges replace the random topology when given.
    edges: list[tuple[int, int]] | None = None
    eclipses: list[EclipseWindow] = field(default_factory=list)
    actions: list = field(default_factory=list)
    eclipse_success_prob: float = 1.0
    orphan_timeout: int = 600
    threshold: str = "full"
    db_capacity: int | None = None
    policy: ThreatPolicy = field(default_factory=ThreatPolicy)
    initial_chain: tuple[Block, ...] = ()
    preload: list[tuple[int, AttackSequence]] = field(default_factory=list)
    genesis: Block = GENESIS

    def role(self, node: int) -> str:
        return self.roles.get(node, FULL)

    def honest(self) -> list[int]:
        return [n for n in range(self.n_nodes) if self.role(n) != ATTACKER]

    def validate(self) -> None:
        if self.n_nodes < 1:
            raise SimError("need at least one node")
        if self.edges is None and not 0 < self.out_degree < self.n_nodes:
            raise SimError(f"out_degree {self.out_degree} must be in 1..n_nodes-1")
        lo, hi = self.latency
        if not 0 <= lo <= hi <= 600:
            raise SimError(f"latency range {self.latency} outside [0, 600]")
        for n, r in self.roles.items():
            if r not in ROLES or not 0 <= n < self.n_nodes:
                raise SimError(f"bad role entry {n}: {r}")
        if not 0.0 <= self.eclipse_success_prob <= 1.0:
            raise SimError("eclipse_success_prob must be in [0, 1]")
        by_victim = defaultdict(list)
        for w in self.eclipses:
            check_window(self, w)
            by_victim[w.victim].append(w)
        for windows in by_victim.values():
            windows.sort(key=lambda w: w.start)
            for a, b in zip(windows, windows[1:]):
                if b.start < a.end:
                    raise OverlappingWindow(f"windows for node {a.victim} overlap")


def check_window(config: SimConfig, w: EclipseWindow) -> None:
    if not 0 <= w.victim < config.n_nodes:
        raise SimError(f"unknown victim {w.victim}")
    for p in w.controlled_peers:
        if config.role(p) != ATTACKER:
            raise SimError(f"controlled peer {p} is not an attacker")


@dataclass
class Topology:
    """Undirected connections; ``out_edges`` keeps who dialled whom."""
    out_edges: dict[int, list[int]]

    def __post_init__(self):
        self._adj: dict[int, set[int]] = defaultdict(set)
        for a, outs in self.out_edges.items():
            for b in outs:
                self._adj[a].add(b)
                self._adj[b].add(a)

    def neighbors(self, node: int) -> list[int]:
        return sorted(self._adj.get(node, ()))

    def edge_set(self) -> set[tuple[int, int]]:
        return {(a, b) for a, outs in self.out_edges.items() for b in outs}

    def connect(self, a: int, b: int) -> None:
        if b not in self._adj[a]:
            self.out_edges.setdefault(a, []).append(b)
            self._adj[a].add(b)
            self._adj[b].add(a)

    def disconnect(self, a: int, b: int) -> None:
        for x, y in ((a, b), (b, a)):
            if y in self.out_edges.get(x, []):
                self.out_edges[x].remove(y)
        self._adj[a].discard(b)
        self._adj[b].discard(a)

    def connected(self, nodes) -> bool:
        nodes = list(nodes)
        if len(nodes) <= 1:
            return True
        allowed = set(nodes)
        seen = {nodes[0]}
        stack = [nodes[0]]
        while stack:
            for nb in self._adj.get(stack.pop(), ()):
                if nb in allowed and nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return seen == allowed


def build_topology(config: SimConfig) -> Topology:
    """Seeded random graph: each honest node dials ``out_degree`` distinct peers.

    Connectivity of the honest nodes is checked and the graph resampled up to
    100 times.
    """
    if config.edges is not None:
        out: dict[int, list[int]] = {n: [] for n in range(config.n_nodes)}
        for a, b in config.edges:
            if a == b or not (0 <= a < config.n_nodes and 0 <= b < config.n_nodes):
                raise SimError(f"bad edge {a}-{b}")
            out[a].append(b)
        return Topology(out)
    rng = random.Random(f"{config.seed}:topology")
    honest = config.honest()
    everyone = list(range(config.n_nodes))
    for _ in range(100):
        out = {n: [] for n in everyone}
        for n in honest:
            out[n] = sorted(rng.sample([m for m in everyone if m != n], config.out_degree))
        topo = Topology(out)
        if topo.connected(honest):
            return topo
    raise UnconnectableConfig(f"no connected honest graph after 100 samples (seed {config.seed})")


@dataclass
class Node:
    id: int
    role: str
    store: EnhancedChainStore
    db: ThreatDatabase
    out_peers: list[int]
    bad_enabled: bool
    matchers: dict[int, MatcherState] = field(default_factory=dict)
    orphans: dict[bytes, list[tuple[Block, int]]] = field(default_factory=dict)
    seen_intel: set[bytes] = field(default_factory=set)
    refused: set[bytes] = field(default_factory=set)
    deferred: list[tuple] = field(default_factory=list)

    def matcher(self, peer: int, backend: str | None = None) -> MatcherState:
        if peer not in self.matchers:
            self.matchers[peer] = MatcherState(backend)
        return self.matchers[peer]

    @property
    def max_step_work(self) -> int:
        return max((m.max_step_work for m in self.matchers.values()), default=0)


@dataclass(frozen=True)
class Message:
    kind: str
    src: int
    dst: int
    payload: object
    size_bytes: int
    sent_at: int


def message_size(kind: str, payload) -> int:
    if kind == BLOCK:
        return len(payload.encoded)
    if kind == FORK_INTEL:
        record, seq = payload
        return len(encode_fork_record(record)) + len(seq.encode())
    if kind == GET_BLOCKS:
        return len(varint(len(payload))) + 32 * len(payload)
    raise ValueError(kind)


class TraceLog:
    """Append-only list of node events and bandwidth entries."""

    LEVELS = ("quiet", "info", "debug")

    def __init__(self):
        self.records: list[dict] = []

    def event(self, tick: int, node: int, kind: str, **detail) -> None:
        self.records.append({"tick": tick, "node": node, "kind": kind, "detail": detail})

    def bandwidth(self, entry) -> None:
        self.records.append(entry.as_dict())

    def events(self, kind: str | None = None, node: int | None = None) -> list[dict]:
        return [r for r in self.records if "status" not in r
                and (kind is None or r["kind"] == kind) and (node is None or r["node"] == node)]

    def lines(self, level: str = "debug"):
        if level not in self.LEVELS:
            raise ValueError(f"unknown trace level {level!r}")
        for r in self.records:
            if "status" in r:
                if level != "debug":
                    continue
            elif level == "quiet" and r["kind"] not in SECURITY_KINDS:
                continue
            yield json.dumps(r, sort_keys=True, separators=(",", ":"))

    def to_jsonl(self, level: str = "debug") -> str:
        return "".join(line + "\n" for line in self.lines(level))


class Simulator:
    def __init__(self, config: SimConfig, backend: str | None = None):
        config.validate()
        self.config = config
        self.backend = backend
        self.topology = build_topology(config)
        self._rng = random.Random(f"{config.seed}:latency")
        self._eclipse_rng = random.Random(f"{config.seed}:eclipse")
        self.now = 0
        self._queue: list = []
        self._seq = 0
        self.trace = TraceLog()
        self.ledger = BandwidthLedger()
        self.sent: dict[tuple[int, int], int] = defaultdict(int)
        self.in_flight = 0
        self._link_clock: dict[tuple[int, int], int] = {}
        self.active: dict[int, EclipseWindow] = {}
        self.nodes: list[Node] = []
        for n in range(config.n_nodes):
            role = config.role(n)
            store = EnhancedChainStore(owner=n, validate=(role == FULL), genesis=config.genesis)
            for b in config.initial_chain:
                store.append_block(b, 0)
            db = ThreatDatabase(capacity=config.db_capacity, threshold=config.threshold)
            self.nodes.append(Node(n, role, store, db, list(self.topology.out_edges.get(n, [])),
                                   bad_enabled=(role != ATTACKER and n not in config.bad_disabled)))
        for n, seq in config.preload:
            node = self.nodes[n]
            node.db.add(AttackSequence(node.db.new_id(), seq.hashes, seq.label, seq.first_seen))
        for w in config.eclipses:
            self.eclipse(w)
        for action in config.actions:
            self.schedule_action(action)

    # -- scheduling

    def _push(self, tick: int, kind: str, *args) -> None:
        heapq.heappush(self._queue, (tick, self._seq, kind, args))
        self._seq += 1

    def schedule_action(self, action) -> None:
        kinds = {MineAction: "mine", InjectAction: "inject", EdgeAction: "edge", ProbeAction: "probe"}
        self._push(action.tick, kinds[type(action)], action)

    def eclipse(self, window: EclipseWindow) -> None:
        """Schedule an eclipse window; rejects overlap with a known window."""
        check_window(self.config, window)
        for kind_tick in self._queue:
            if kind_tick[2] == "eclipse-start":
                other = kind_tick[3][0]
                if other.victim == window.victim and other.start < window.end and window.start < other.end:
                    raise OverlappingWindow(f"windows for node {window.victim} overlap")
        self._push(window.start, "eclipse-start", window)

    def run(self, until: int) -> TraceLog:
        while self._queue and self._queue[0][0] < until:
            tick, _, kind, args = heapq.heappop(self._queue)
            self.now = tick
            getattr(self, "_on_" + kind.replace("-", "_"))(*args)
        self.now = max(self.now, until)
        return self.trace

    # -- network

    def peers(self, node: int) -> list[int]:
        w = self.active.get(node)
        if w is not None:
            return list(w.controlled_peers)
        return self.topology.neighbors(node)

    def _blocked(self, src: int, dst: int) -> bool:
        w = self.active.get(dst)
        if w is not None and src not in w.controlled_peers:
            return True
        w = self.active.get(src)
        return w is not None and dst not in w.controlled_peers

    def send(self, src: int, dst: int, kind: str, payload) -> None:
        size = message_size(kind, payload)
        self.sent[(src, dst)] += 1
        if self._blocked(src, dst) and not (kind == FORK_INTEL and dst in self.active):
            self.trace.bandwidth(self.ledger.record(self.now, src, dst, kind, size, SUPPRESSED))
            return
        lo, hi = self.config.latency
        t = max(self.now + self._rng.randint(lo, hi), self._link_clock.get((src, dst), 0))
        self._link_clock[(src, dst)] = t
        self.in_flight += 1
        self._push(t, "deliver", Message(kind, src, dst, payload, size, self.now))

    def broadcast(self, src: int, kind: str, payload, exclude: int | None = None) -> None:
        for p in self.peers(src):
            if p != exclude:
                self.send(src, p, kind, payload)

    def _on_deliver(self, msg: Message) -> None:
        dst = msg.dst
        if self._blocked(msg.src, dst):
            if msg.kind == FORK_INTEL and dst in self.active:
                self.nodes[dst].deferred.append(msg)
                self.trace.event(self.now, dst, "intel-deferred", src=msg.src)
                return
            self.in_flight -= 1
            self.trace.bandwidth(self.ledger.record(msg.sent_at, msg.src, dst, msg.kind,
                                                    msg.size_bytes, SUPPRESSED))
            return
        self._deliver(msg)

    def _deliver(self, msg: Message) -> None:
        self.in_flight -= 1
        self.trace.bandwidth(self.ledger.record(msg.sent_at, msg.src, msg.dst, msg.kind,
                                                msg.size_bytes, DELIVERED))
        node = self.nodes[msg.dst]
        if msg.kind == BLOCK:
            self.on_receive_block(node, msg.payload, msg.src)
        elif msg.kind == FORK_INTEL:
            record, seq = msg.payload
            self.on_receive_fork_intel(node, record, seq, msg.src)
        elif msg.kind == GET_BLOCKS:
            self._on_get_blocks(node, msg.payload, msg.src)

    # -- handlers

    def on_receive_block(self, node: Node, block: Block, src: int) -> None:
        h = block.hash
        if h in node.store or h in node.refused:
            return
        if block.prev not in node.store:
            first_gap = block.prev not in node.orphans
            waiting = node.orphans.setdefault(block.prev, [])
            if all(b.hash != h for b, _ in waiting):
                waiting.append((block, src))
                self.trace.event(self.now, node.id, "orphan", block=h.hex(), height=block.height)
                self._push(self.now + self.config.orphan_timeout, "orphan-expiry", node.id, h, block.prev)
                # a relayed reorg tip arrives without its branch; pull the gap from the sender
                if first_gap and src != node.id:
                    self.request_sync(node.id, src)
            return
        pending = [(block, src)]
        while pending:
            b, from_peer = pending.pop()
            if self._connect(node, b, from_peer):
                pending.extend(reversed(node.orphans.pop(b.hash, [])))

    def _connect(self, node: Node, block: Block, src: int) -> bool:
        h = block.hash
        if node.role == ATTACKER:
            try:
                node.store.append_block(block, self.now)
            except InvalidBlock:
                return False
            return True
        if node.bad_enabled:
            outcome = filter_block(node.matcher(src, self.backend), node.db, block, self.now)
            matcher = node.matchers[src]
            for v in outcome.alerts:
                self.trace.event(self.now, node.id, "alert", block=h.hex(), verdict=v.kind,
                                 pairs=[list(p) for p in v.pairs], detected=list(v.detected))
            if block.txs[1:]:
                self.trace.event(self.now, node.id, "filter", block=h.hex(), peer=src,
                                 steps=len(block.txs) - 1, max_step_work=matcher.max_step_work,
                                 db_total_length=node.db.total_length())
            if outcome.refused:
                node.refused.add(h)
                self.trace.event(self.now, node.id, "refused", block=h.hex(), height=block.height, peer=src,
                                 rejected=[tx.txid.hex() for tx in outcome.rejected])
                return False
        try:
            event = node.store.append_block(block, self.now)
        except InvalidBlock as exc:
            self.trace.event(self.now, node.id, "invalid", block=h.hex(), reason=str(exc))
            return False
        self.trace.event(self.now, node.id, "block", block=h.hex(), height=block.height,
                         result=event.kind.value, peer=src)
        if event.kind in (EventKind.EXTENDED_TIP, EventKind.REORG):
            self.broadcast(node.id, BLOCK, block, exclude=src)
        if event.kind == EventKind.REORG:
            if src in node.matchers:
                node.matchers[src].clear()
            self._handle_fork(node, event.fork_record)
        return True

    def _handle_fork(self, node: Node, record: ForkRecord) -> None:
        self.trace.event(self.now, node.id, "reorg", fork_head=record.fork_head.hex(),
                         branch=[b.hash.hex() for b in record.branch_blocks],
                         new_tip=node.store.tip.hex(), height=node.store.height)
        self.trace.event(self.now, node.id, "fork-record", branch_blocks=len(record.branch_blocks),
                         start_time=record.start_time, detect_time=record.detect_time,
                         suspicious=[h.hex() for h in record.suspicious_txs])
        if not node.bad_enabled:
            return
        for cand in inspect_fork(record, node.db):
            conf = confirm_threat(node.db, cand, self.config.policy, self.now)
            self.trace.event(self.now, node.id, "threat", status=conf.status, reason=conf.reason,
                             length=cand.sequence.length, label=cand.sequence.label,
                             recurrence=cand.recurrence, evicted=list(conf.evicted))
            node.seen_intel.add(cand.sequence.digest)
            self.broadcast(node.id, FORK_INTEL, (record, cand.sequence))

    def on_receive_fork_intel(self, node: Node, record: ForkRecord, seq: AttackSequence, src: int) -> None:
        if not node.bad_enabled:
            return
        digest = seq.digest
        if digest in node.seen_intel:
            return
        node.seen_intel.add(digest)
        conf = confirm_threat(node.db, seq, self.config.policy, self.now)
        self.trace.event(self.now, node.id, "intel", src=src, origin=record.origin_node,
                         status=conf.status, reason=conf.reason, length=seq.length, label=seq.label)
        if conf.inserted:
            self.broadcast(node.id, FORK_INTEL, (record, seq), exclude=src)

    def _on_get_blocks(self, node: Node, locator: list[bytes], src: int) -> None:
        if node.role == ATTACKER:
            return
        for b in node.store.blocks_after(locator):
            self.send(node.id, src, BLOCK, b)

    def request_sync(self, node: int, peer: int) -> None:
        self.send(node, peer, GET_BLOCKS, self.nodes[node].store.locator())

    # -- scheduled events

    def _on_orphan_expiry(self, node_id: int, h: bytes, prev: bytes) -> None:
        node = self.nodes[node_id]
        waiting = node.orphans.get(prev)
        if not waiting:
            return
        kept = [(b, s) for b, s in waiting if b.hash != h]
        if len(kept) != len(waiting):
            self.trace.event(self.now, node_id, "orphan-dropped", block=h.hex())
        if kept:
            node.orphans[prev] = kept
        else:
            del node.orphans[prev]

    def _on_mine(self, action: MineAction) -> None:
        node = self.nodes[action.node]
        block = node.store.mine_block(node.store.tip, action.txs, miner=miner_tag(node.id))
        self.trace.event(self.now, node.id, "mined", block=block.hash.hex(), height=block.height)
        self._connect(node, block, node.id)

    def _on_inject(self, action: InjectAction) -> None:
        attacker = self.nodes[action.attacker]
        victim = self.nodes[action.victim]
        # the adversary controls the victim's view, so it knows the victim's tip
        missing = []
        for b in victim.store.ancestors(victim.store.tip):
            if b.hash in attacker.store:
                break
            missing.append(b)
        for b in reversed(missing):
            attacker.store.append_block(b, self.now)
        parent = victim.store.tip
        hashes = []
        for txs in action.blocks:
            block = attacker.store.mine_block(parent, txs, miner=miner_tag(attacker.id))
            attacker.store.append_block(block, self.now)
            self.send(attacker.id, victim.id, BLOCK, block)
            hashes.append(block.hash.hex())
            parent = block.hash
        self.trace.event(self.now, attacker.id, "inject", victim=victim.id, blocks=hashes,
                         txs=[tx.txid.hex() for txs in action.blocks for tx in txs])

    def _on_edge(self, action: EdgeAction) -> None:
        if action.add:
            self.topology.connect(action.a, action.b)
            self.trace.event(self.now, action.a, "edge-added", peer=action.b)
            self.request_sync(action.a, action.b)
            self.request_sync(action.b, action.a)
        else:
            self.topology.disconnect(action.a, action.b)
            self.trace.event(self.now, action.a, "edge-removed", peer=action.b)

    def _on_probe(self, action: ProbeAction) -> None:
        node = self.nodes[action.node]
        tip = node.store.tip_block
        self.trace.event(self.now, node.id, "probe", tip=tip.hash.hex(), height=tip.height,
                         miner=tip.miner_tag.decode(errors="replace"),
                         fork_records=len(node.store.fork_records), db_k=node.db.k)

    def _on_eclipse_start(self, window: EclipseWindow) -> None:
        prob = self.config.eclipse_success_prob
        if prob < 1.0 and self._eclipse_rng.random() >= prob:
            self.trace.event(self.now, window.victim, "eclipse-failed", start=window.start, end=window.end)
            return
        self.active[window.victim] = window
        self.trace.event(self.now, window.victim, "eclipse-start",
                         controlled=list(window.controlled_peers), end=window.end)
        self._push(window.end, "eclipse-end", window)

    def _on_eclipse_end(self, window: EclipseWindow) -> None:
        if self.active.get(window.victim) is not window:
            return
        del self.active[window.victim]
        victim = self.nodes[window.victim]
        self.trace.event(self.now, victim.id, "eclipse-end", deferred=len(victim.deferred))
        deferred, victim.deferred = victim.deferred, []
        for msg in deferred:
            self._deliver(msg)
        for p in self.topology.neighbors(victim.id):
            if self.config.role(p) != ATTACKER:
                self.request_sync(victim.id, p)

    # -- inspection helpers

    def honest_tips(self) -> dict[int, bytes]:
        return {n.id: n.store.tip for n in self.nodes if n.role != ATTACKER}


def periodic_mining(node: int, start: int, count: int, interval: int) -> list[MineAction]:
    return [MineAction(start + i * interval, node) for i in range(count)]


def build_initial_chain(length: int, miner: int = 0, genesis: Block = GENESIS) -> tuple[Block, ...]:
    """The shared pre-synchronised chain every node starts from."""
    store = EnhancedChainStore(owner=miner, genesis=genesis)
    blocks = []
    for _ in range(length):
        b = store.mine_block(store.tip, miner=miner_tag(miner))
        store.append_block(b, 0)
        blocks.append(b)
    return tuple(blocks)


def run(sim: Simulator, until: int) -> TraceLog:
    return sim.run(until)
