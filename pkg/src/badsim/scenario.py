"""Declarative TOML scenarios: topology, adversary script and assertions.

A scenario file starts with ``format = "badsim-scenario/1"``. Nodes are
declared as ``[[node]]`` tables and referenced by name everywhere else.
Malicious transactions are built from labelled payload strings so their
hashes are identical across runs and across attackers.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .chain import Block, Input, OutPoint, Output, Transaction
from .metrics import annual_fork_broadcast, measured_overhead, overhead_report
from .sim import (
    ATTACKER,
    ROLES,
    EclipseWindow,
    EdgeAction,
    InjectAction,
    MineAction,
    ProbeAction,
    SimConfig,
    Simulator,
    TraceLog,
    build_initial_chain,
    miner_tag,
)
from .threat import AttackSequence, ThreatPolicy, prevention_threshold

FORMAT = "badsim-scenario/1"
ATTACKER_CONDITION = b"attacker"


class ScenarioError(Exception):
    """The scenario file does not parse or is inconsistent."""


def malicious_transactions(initial_chain: tuple[Block, ...], fund_height: int,
                           payloads: list[str]) -> dict[str, Transaction]:
    """Chain of payload-bearing transactions funded by an initial coinbase.

    Each transaction spends the previous one's single output, so the set
    only depends on the shared initial chain and the payload labels.
    """
    if not 1 <= fund_height <= len(initial_chain):
        raise ScenarioError(f"fund_height {fund_height} outside the initial chain")
    coinbase = initial_chain[fund_height - 1].txs[0]
    prev = OutPoint(coinbase.txid, 0)
    witness = coinbase.outputs[0].spending_condition
    amount = coinbase.outputs[0].amount
    out = {}
    for label in payloads:
        if label in out:
            raise ScenarioError(f"duplicate malicious payload {label!r}")
        tx = Transaction(inputs=(Input(prev, witness),),
                         outputs=(Output(amount, ATTACKER_CONDITION),),
                         payload=label.encode())
        out[label] = tx
        prev, witness = OutPoint(tx.txid, 0), ATTACKER_CONDITION
    return out


@dataclass
class Scenario:
    name: str
    sim: SimConfig
    until: int
    names: list[str]
    malicious: dict[str, Transaction]
    assertions: list[dict]
    overhead: dict = field(default_factory=dict)
    initial_chain_length: int = 0

    def node_id(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ScenarioError(f"unknown node {name!r}") from None


@dataclass
class ScenarioResult:
    scenario: Scenario
    simulator: Simulator
    failures: list[str]
    passed: list[str]
    report: dict

    @property
    def trace(self) -> TraceLog:
        return self.simulator.trace

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0

    def summary(self) -> str:
        sim = self.simulator
        lines = [f"scenario {self.scenario.name}: seed={sim.config.seed} until={self.scenario.until}"]
        for node in sim.nodes:
            lines.append(
                f"  {self.scenario.names[node.id]:>6} role={node.role:<8} height={node.store.height:<4}"
                f" forks={len(node.store.fork_records)} threats={node.db.k}"
                f" refused={len(node.refused)} max_step_work={node.max_step_work}")
        for p in self.passed:
            lines.append(f"  PASS {p}")
        for f in self.failures:
            lines.append(f"  FAIL {f}")
        lines.append("result: " + ("ok" if not self.failures else f"{len(self.failures)} assertion(s) failed"))
        return "\n".join(lines) + "\n"


def _get(table: dict, key: str, kind, default=None, required=False):
    if key not in table:
        if required:
            raise ScenarioError(f"missing key {key!r}")
        return default
    value = table[key]
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ScenarioError(f"key {key!r} has wrong type {type(value).__name__}")
    return value


def load_scenario(path: str | os.PathLike, seed: int | None = None) -> Scenario:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    return parse_scenario(doc, seed=seed, default_name=Path(path).stem)


def parse_scenario(doc: dict, seed: int | None = None, default_name: str = "scenario") -> Scenario:
    if doc.get("format") != FORMAT:
        raise ScenarioError(f"expected format = {FORMAT!r}")
    nodes = _get(doc, "node", list, required=True)
    names = []
    roles = {}
    bad_disabled = []
    for n, entry in enumerate(nodes):
        name = _get(entry, "name", str, default=str(n))
        if name in names:
            raise ScenarioError(f"duplicate node name {name!r}")
        names.append(name)
        role = _get(entry, "role", str, default="full")
        if role not in ROLES:
            raise ScenarioError(f"node {name}: unknown role {role!r}")
        roles[n] = role
        if not _get(entry, "bad", bool, default=True):
            bad_disabled.append(n)

    def ref(name) -> int:
        if not isinstance(name, str) or name not in names:
            raise ScenarioError(f"unknown node {name!r}")
        return names.index(name)

    sim_t = _get(doc, "sim", dict, default={})
    init_len = _get(doc, "initial_chain_length", int, default=0)
    initial_miner = ref(_get(doc, "initial_miner", str, default=names[0]))
    initial_chain = build_initial_chain(init_len, initial_miner)

    mal_t = _get(doc, "malicious", dict, default={})
    payloads = _get(mal_t, "payloads", list, default=[])
    malicious = malicious_transactions(initial_chain, _get(mal_t, "fund_height", int, default=1),
                                       payloads) if payloads else {}

    def txs_for(tags) -> tuple[Transaction, ...]:
        try:
            return tuple(malicious[t] for t in tags)
        except (KeyError, TypeError):
            raise ScenarioError(f"unknown payload in {tags!r}") from None

    pol_t = _get(doc, "policy", dict, default={})
    policy = ThreatPolicy(
        min_length=_get(pol_t, "min_length", int, default=1),
        label_prefixes=tuple(_get(pol_t, "label_prefixes", list, default=[])),
        skip_recurrences=_get(pol_t, "skip_recurrences", bool, default=True),
    )

    eclipses, actions = [], []
    last_at = -1
    for a in _get(doc, "action", list, default=[]):
        kind = _get(a, "type", str, required=True)
        at = _get(a, "at", int, required=True)
        if at < last_at:
            raise ScenarioError(f"actions not time-ordered at {kind}@{at}")
        last_at = at
        if kind == "eclipse":
            try:
                eclipses.append(EclipseWindow(ref(a.get("victim")),
                                              tuple(ref(c) for c in _get(a, "controlled", list, required=True)),
                                              at, _get(a, "until", int, required=True)))
            except ValueError as exc:
                raise ScenarioError(str(exc)) from exc
        elif kind == "inject":
            blocks = tuple(txs_for(b) for b in _get(a, "blocks", list, required=True))
            repeat = _get(a, "repeat", int, default=1)
            blocks = tuple(tuple(tx for tx in b for _ in range(repeat)) for b in blocks)
            actions.append(InjectAction(at, ref(a.get("attacker")), ref(a.get("victim")), blocks))
        elif kind == "mine":
            node = ref(a.get("node"))
            count = _get(a, "count", int, default=1)
            interval = _get(a, "interval", int, default=1)
            txs = txs_for(_get(a, "payloads", list, default=[]))
            actions += [MineAction(at + i * interval, node, txs if i == 0 else ()) for i in range(count)]
        elif kind == "probe":
            actions.append(ProbeAction(at, ref(a.get("node"))))
        elif kind == "edge":
            actions.append(EdgeAction(at, ref(a.get("a")), ref(a.get("b")), _get(a, "add", bool, default=True)))
        else:
            raise ScenarioError(f"unknown action type {kind!r}")

    preload = []
    for t in _get(doc, "threat", list, default=[]):
        tags = _get(t, "payloads", list, required=True)
        seq = AttackSequence(0, tuple(tx.txid for tx in txs_for(tags)), _get(t, "label", str, default="preload"), 0)
        preload.append((ref(t.get("node")), seq))

    edges = sim_t.get("edges")
    if edges is not None:
        edges = [(ref(a), ref(b)) if isinstance(a, str) else (a, b) for a, b in edges]
    latency = _get(sim_t, "latency", list, default=[1, 60])
    cfg = SimConfig(
        seed=seed if seed is not None else _get(doc, "seed", int, default=0),
        n_nodes=len(names),
        out_degree=_get(sim_t, "out_degree", int, default=min(8, len(names) - 1)),
        latency=(latency[0], latency[1]),
        roles=roles,
        bad_disabled=tuple(bad_disabled),
        edges=edges,
        eclipses=eclipses,
        actions=actions,
        eclipse_success_prob=float(sim_t.get("eclipse_success_prob", 1.0)),
        orphan_timeout=_get(sim_t, "orphan_timeout", int, default=600),
        threshold=_get(sim_t, "threshold", str, default="scaled"),
        db_capacity=sim_t.get("db_capacity"),
        policy=policy,
        initial_chain=initial_chain,
        preload=preload,
    )
    try:
        cfg.validate()
    except Exception as exc:
        raise ScenarioError(str(exc)) from exc
    assertions = _get(doc, "assert", list, default=[])
    for a in assertions:
        if _get(a, "type", str, required=True) not in CHECKS:
            raise ScenarioError(f"unknown assertion type {a['type']!r}")
    return Scenario(
        name=_get(doc, "name", str, default=default_name),
        sim=cfg,
        until=_get(doc, "until", int, required=True),
        names=names,
        malicious=malicious,
        assertions=assertions,
        overhead=_get(doc, "overhead", dict, default={}),
        initial_chain_length=init_len,
    )


# -- assertions ---------------------------------------------------------------
# Each check returns (ok, description).

def _check_probe_miner(sc: Scenario, sim: Simulator, a: dict):
    node, want = sc.node_id(a["node"]), sc.node_id(a["miner"])
    probes = [e for e in sim.trace.events("probe", node) if e["tick"] == a["at"]]
    got = probes[0]["detail"]["miner"] if probes else None
    return got == "miner:" + miner_tag(want).decode(), f"{a['node']} tip mined by {a['miner']} at t={a['at']} (got {got})"


def _check_fork_records(sc: Scenario, sim: Simulator, a: dict):
    node = sim.nodes[sc.node_id(a["node"])]
    records = node.store.fork_records
    ok = len(records) == a["count"]
    desc = f"{a['node']} has {a['count']} fork record(s) (got {len(records)})"
    if "branch_blocks" in a:
        sizes = [len(r.branch_blocks) for r in records]
        ok = ok and all(s == a["branch_blocks"] for s in sizes)
        desc += f" with {a['branch_blocks']} branch blocks (got {sizes})"
    return ok, desc


def _check_intel_received(sc: Scenario, sim: Simulator, a: dict):
    node, origin = sc.node_id(a["node"]), sc.node_id(a["origin"])
    hits = [e for e in sim.trace.events("intel", node)
            if e["detail"]["origin"] == origin and e["detail"]["status"] == "inserted"]
    return bool(hits), f"{a['node']} stored fork intel from {a['origin']}"


def _theta_bound(sc: Scenario, a: dict) -> int:
    bound = a["max"]
    if isinstance(bound, int):
        return bound
    if bound != "theta-1":
        raise ScenarioError(f"bad bound {bound!r}")
    return prevention_threshold(len(a["payloads"]), sc.sim.threshold) - 1


def _check_malicious_accepted(sc: Scenario, sim: Simulator, a: dict):
    node = sim.nodes[sc.node_id(a["node"])]
    wanted = {sc.malicious[p].txid for p in a["payloads"]}
    accepted = {tx.txid for b in node.store.blocks.values() for tx in b.txs} & wanted
    bound = _theta_bound(sc, a)
    ok = len(accepted) <= bound
    desc = f"{a['node']} accepted {len(accepted)} of {len(wanted)} malicious txs (max {bound})"
    if "min" in a:
        ok = ok and len(accepted) >= a["min"]
        desc += f" (min {a['min']})"
    return ok, desc


def _check_refused(sc: Scenario, sim: Simulator, a: dict):
    node = sim.nodes[sc.node_id(a["node"])]
    n = len(node.refused)
    return n >= a.get("min", 1), f"{a['node']} refused {n} block(s) (min {a.get('min', 1)})"


def _check_count(sc: Scenario, sim: Simulator, a: dict):
    n = len(sim.trace.events(a["event"]))
    return n == a["equals"], f"{a['event']} events = {a['equals']} (got {n})"


def _check_max_step_work(sc: Scenario, sim: Simulator, a: dict):
    node = sc.node_id(a["node"])
    events = sim.trace.events("filter", node)
    if not events:
        return False, f"{a['node']} ran no filter steps"
    worst = max(e["detail"]["max_step_work"] for e in events)
    bound = max(e["detail"]["db_total_length"] for e in events)
    return worst == bound, f"{a['node']} max step work {worst} == sum of lengths {bound}"


def _check_converged(sc: Scenario, sim: Simulator, a: dict):
    tips = set(sim.honest_tips().values())
    return len(tips) == 1, f"honest nodes share one tip (got {len(tips)} distinct)"


CHECKS = {
    "converged": _check_converged,
    "probe_miner": _check_probe_miner,
    "fork_records": _check_fork_records,
    "intel_received": _check_intel_received,
    "malicious_accepted": _check_malicious_accepted,
    "refused": _check_refused,
    "count": _check_count,
    "max_step_work": _check_max_step_work,
}


def execute(scenario: Scenario, backend: str | None = None) -> ScenarioResult:
    sim = Simulator(scenario.sim, backend=backend)
    sim.run(scenario.until)
    failures, passed = [], []
    for a in scenario.assertions:
        try:
            ok, desc = CHECKS[a["type"]](scenario, sim, a)
        except (KeyError, ScenarioError) as exc:
            ok, desc = False, f"{a['type']}: malformed assertion ({exc})"
        (passed if ok else failures).append(desc)
    ov = scenario.overhead
    annual = annual_fork_broadcast(ov.get("orphans", 141), ov.get("block_mb", 0.993201), ov.get("degree", 32))
    report = overhead_report(annual, ov.get("m", 150)).__dict__.copy()
    report["measured_overhead"] = {
        scenario.names[n.id]: measured_overhead(sim.ledger, n.id, scenario.until)
        for n in sim.nodes if n.role != ATTACKER
    }
    return ScenarioResult(scenario, sim, failures, passed, report)


def run_scenario(path, seed: int | None = None, out_dir=None, backend: str | None = None,
                 trace_level: str | None = None) -> ScenarioResult:
    """Load, run and (optionally) write trace.jsonl, report.json and summary.txt."""
    result = execute(load_scenario(path, seed=seed), backend=backend)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        level = trace_level or os.environ.get("BADSIM_LOG", "info")
        (out / "trace.jsonl").write_text(result.trace.to_jsonl(level))
        (out / "report.json").write_text(json.dumps(result.report, indent=2, sort_keys=True) + "\n")
        (out / "summary.txt").write_text(result.summary())
    return result


def bundled(name: str) -> Path:
    """Path of a scenario shipped with the package."""
    return Path(__file__).parent / "scenarios" / name


BUNDLED = ("two_domain.toml", "no_adversary.toml", "worst_case_matcher.toml")
