from collections import Counter

import pytest

from badsim.chain import ForkRecord
from badsim.metrics import DELIVERED, FORK_INTEL, SUPPRESSED, measured_overhead
from badsim.scenario import bundled, execute, load_scenario, malicious_transactions
from badsim.sim import (
    ATTACKER,
    EclipseWindow,
    EdgeAction,
    InjectAction,
    MineAction,
    OverlappingWindow,
    SimConfig,
    SimError,
    Simulator,
    build_initial_chain,
    build_topology,
    periodic_mining,
)
from badsim.threat import AttackSequence

from .conftest import H


# -- topology

def test_topology_same_seed_same_edges():
    cfg = SimConfig(seed=5, n_nodes=20, out_degree=4)
    assert build_topology(cfg).edge_set() == build_topology(cfg).edge_set()
    assert build_topology(cfg).edge_set() != build_topology(SimConfig(seed=6, n_nodes=20, out_degree=4)).edge_set()


@pytest.mark.parametrize("n,d", [(6, 2), (40, 32), (12, 8)])
def test_topology_out_degree(n, d):
    topo = build_topology(SimConfig(seed=1, n_nodes=n, out_degree=d))
    for a in range(n):
        outs = topo.out_edges[a]
        assert len(outs) == len(set(outs)) == d and a not in outs
    assert topo.connected(range(n))


def test_attackers_do_not_dial():
    cfg = SimConfig(seed=3, n_nodes=8, out_degree=3, roles={7: ATTACKER})
    topo = build_topology(cfg)
    assert topo.out_edges[7] == []
    assert all(len(topo.out_edges[n]) == 3 for n in range(7))


@pytest.mark.parametrize("bad", [dict(out_degree=8, n_nodes=8), dict(latency=(0, 601)), dict(latency=(5, 1))])
def test_config_validation(bad):
    with pytest.raises(SimError):
        Simulator(SimConfig(**bad))


# -- plain gossip

def single_miner(seed=0, n=10, degree=3, blocks=5):
    cfg = SimConfig(seed=seed, n_nodes=n, out_degree=degree, actions=periodic_mining(0, 10, blocks, 200))
    sim = Simulator(cfg)
    sim.run(10 + 200 * blocks + 2000)
    return sim


def test_single_miner_converges():
    sim = single_miner()
    tips = set(sim.honest_tips().values())
    assert len(tips) == 1
    assert all(n.store.height == 5 for n in sim.nodes)
    assert all(not n.store.fork_records for n in sim.nodes)


def test_fast_mining_without_adversary_never_forks():
    cfg = SimConfig(seed=4, n_nodes=12, out_degree=3, actions=periodic_mining(0, 0, 30, 5))
    sim = Simulator(cfg)
    sim.run(5000)
    assert all(not n.store.fork_records for n in sim.nodes)
    assert len(set(sim.honest_tips().values())) == 1


def test_same_seed_identical_trace():
    a, b = single_miner(seed=9), single_miner(seed=9)
    assert a.trace.to_jsonl() == b.trace.to_jsonl()
    assert a.trace.to_jsonl() != single_miner(seed=10).trace.to_jsonl()


def test_partition_then_bridge():
    edges = [(0, 1), (2, 3)]
    actions = periodic_mining(0, 10, 3, 50) + periodic_mining(2, 20, 2, 50)
    sim = Simulator(SimConfig(n_nodes=4, edges=edges, actions=actions + [EdgeAction(1000, 1, 2)]))
    sim.run(900)
    tips = sim.honest_tips()
    assert tips[0] == tips[1] != tips[2] == tips[3]
    sim.run(3000)
    tips = sim.honest_tips()
    assert len(set(tips.values())) == 1
    assert sim.nodes[3].store.height == 3
    assert len(sim.nodes[3].store.fork_records) == 1


# -- eclipse

def eclipse_sim(window=(10, 1000), inject_at=20, honest_blocks=4, threshold="full"):
    """0 miner, 1 victim, 2 bystander, 3 attacker wired to the victim only."""
    chain = build_initial_chain(1)
    mal = malicious_transactions(chain, 1, ["m1", "m2", "m3"])
    txs = list(mal.values())
    cfg = SimConfig(
        seed=7, n_nodes=4, edges=[(0, 1), (1, 2), (0, 2), (1, 3)], roles={3: ATTACKER},
        initial_chain=chain, threshold=threshold,
        eclipses=[EclipseWindow(1, (3,), *window)],
        actions=[InjectAction(inject_at, 3, 1, tuple((t,) for t in txs))]
        + periodic_mining(0, 50, honest_blocks, 100),
    )
    return Simulator(cfg), txs


def test_honest_block_never_reaches_victim_during_window():
    sim, _ = eclipse_sim()
    sim.run(1000)
    assert not [e for e in sim.trace.events("block", 1) if e["detail"]["peer"] in (0, 2)]
    suppressed = [e for e in sim.ledger.entries if e.dst == 1 and e.status == SUPPRESSED]
    assert suppressed and all(e.src in (0, 2) for e in suppressed)
    assert not [e for e in sim.ledger.entries if e.dst == 1 and e.src != 3 and e.status == DELIVERED]


def test_victim_follows_attacker_then_reorgs():
    sim, txs = eclipse_sim()
    sim.run(999)
    victim = sim.nodes[1]
    assert victim.store.tip_block.miner_tag == b"miner:3"
    assert victim.store.height == 4
    sim.run(3000)
    assert victim.store.tip == sim.nodes[0].store.tip and victim.store.height == 5
    (record,) = victim.store.fork_records
    assert len(record.branch_blocks) == 3
    assert record.suspicious_txs == tuple(t.txid for t in txs)
    intel = [e for e in sim.ledger.entries if e.src == 1 and e.kind == FORK_INTEL]
    assert {e.dst for e in intel} == {0, 2, 3}
    for n in (0, 2):
        assert [s.hashes for s in sim.nodes[n].db] == [tuple(t.txid for t in txs)]


def test_overlapping_windows_rejected():
    cfg = SimConfig(n_nodes=3, edges=[(0, 1), (1, 2)], roles={2: ATTACKER},
                    eclipses=[EclipseWindow(1, (2,), 0, 100), EclipseWindow(1, (2,), 50, 200)])
    with pytest.raises(OverlappingWindow):
        Simulator(cfg)
    ok = SimConfig(n_nodes=3, edges=[(0, 1), (1, 2)], roles={2: ATTACKER},
                   eclipses=[EclipseWindow(1, (2,), 0, 100)])
    sim = Simulator(ok)
    sim.eclipse(EclipseWindow(1, (2,), 100, 200))
    with pytest.raises(OverlappingWindow):
        sim.eclipse(EclipseWindow(1, (2,), 150, 160))


def test_window_needs_attacker_peers():
    with pytest.raises(ValueError):
        EclipseWindow(1, (2,), 5, 5)
    with pytest.raises(SimError):
        Simulator(SimConfig(n_nodes=3, edges=[(0, 1)], eclipses=[EclipseWindow(1, (2,), 0, 10)]))


def test_known_attack_block_refused_and_not_relayed():
    sim, txs = eclipse_sim(window=(10, 1000))
    for node in sim.nodes[:3]:
        node.db.add(AttackSequence(1, tuple(t.txid for t in txs)))
    sim.run(3000)
    victim = sim.nodes[1]
    assert len(victim.refused) == 1
    (bad,) = victim.refused
    assert bad not in victim.store
    assert all(bad not in sim.nodes[n].store for n in (0, 2))
    assert not [e for e in sim.trace.events("block", 1) if e["detail"]["block"] == bad.hex()]


# -- fork intel

def intel_payload(origin=1):
    chain = build_initial_chain(1)
    record = ForkRecord(chain[0].prev, chain, 0, 5, (H("a"),), origin)
    return record, AttackSequence(0, (H("a"), H("b")), "fork:1:0")


def test_intel_first_receipt_regossips_second_dropped():
    sim = Simulator(SimConfig(n_nodes=4, edges=[(0, 1), (1, 2), (1, 3)]))
    record, seq = intel_payload()
    sim.on_receive_fork_intel(sim.nodes[1], record, seq, 0)
    assert sim.nodes[1].db.k == 1
    assert sim.sent == {(1, 2): 1, (1, 3): 1}
    sim.on_receive_fork_intel(sim.nodes[1], record, seq, 2)
    assert sim.nodes[1].db.k == 1 and sum(sim.sent.values()) == 2
    sim.run(1000)
    assert [n.db.k for n in sim.nodes] == [0, 1, 1, 1]  # never echoed back to the sender
    # flood terminates: each node forwards the candidate at most once per neighbour
    per_src = Counter(e.src for e in sim.ledger.entries if e.kind == FORK_INTEL)
    assert all(per_src[n] <= len(sim.topology.neighbors(n)) for n in per_src)


def test_intel_deferred_while_eclipsed():
    cfg = SimConfig(n_nodes=3, edges=[(0, 1), (1, 2)], roles={2: ATTACKER},
                    eclipses=[EclipseWindow(1, (2,), 5, 500)])
    sim = Simulator(cfg)
    sim.run(10)
    record, seq = intel_payload()
    sim.send(0, 1, FORK_INTEL, (record, seq))
    sim.run(400)
    assert sim.nodes[1].db.k == 0
    assert sim.trace.events("intel-deferred", 1)
    sim.run(1000)
    (ev,) = sim.trace.events("intel", 1)
    assert ev["tick"] == 500 and ev["detail"]["status"] == "inserted"


def test_gossip_completeness_random_graph():
    cfg = SimConfig(seed=11, n_nodes=20, out_degree=3)
    sim = Simulator(cfg)
    record, seq = intel_payload(origin=5)
    sim.nodes[5].seen_intel.add(seq.digest)
    sim.broadcast(5, FORK_INTEL, (record, seq))
    sim.run(5000)
    assert all(n.db.k == 1 for i, n in enumerate(sim.nodes) if i != 5)


# -- accounting

def test_ledger_accounting_per_link():
    sim, _ = eclipse_sim()
    sim.run(600)  # mid-window: some messages are still in flight
    assert sum(sim.sent.values()) == len(sim.ledger.entries) + sim.in_flight
    sim.run(5000)
    assert sim.in_flight == 0
    counts = sim.ledger.link_counts()
    assert set(counts) == set(sim.sent)
    for link, n in sim.sent.items():
        assert counts[link][DELIVERED] + counts[link][SUPPRESSED] == n


def test_ledger_totals_match_entries():
    sim, _ = eclipse_sim()
    sim.run(5000)
    for n in range(4):
        assert sim.ledger.sent_bytes(n) == sum(e.bytes for e in sim.ledger.entries if e.src == n)


def test_measured_overhead_bounds():
    sim, _ = eclipse_sim()
    sim.run(5000)
    vals = [measured_overhead(sim.ledger, n, 5000) for n in range(4)]
    assert all(0 <= v <= 1 for v in vals) and vals[1] > 0


def test_measured_overhead_zero_without_bad():
    chain = build_initial_chain(1)
    mal = list(malicious_transactions(chain, 1, ["m1", "m2"]).values())
    cfg = SimConfig(seed=7, n_nodes=4, edges=[(0, 1), (1, 2), (0, 2), (1, 3)], roles={3: ATTACKER},
                    initial_chain=chain, bad_disabled=(0, 1, 2),
                    eclipses=[EclipseWindow(1, (3,), 10, 1000)],
                    actions=[InjectAction(20, 3, 1, ((mal[0],), (mal[1],)))] + periodic_mining(0, 50, 4, 100))
    sim = Simulator(cfg)
    sim.run(5000)
    assert len(sim.nodes[1].store.fork_records) == 1
    assert all(measured_overhead(sim.ledger, n, 5000) == 0 for n in range(4))


def test_step_work_within_db_size():
    sim, _ = eclipse_sim()
    for node in sim.nodes[:3]:
        node.db.add(AttackSequence(1, (H("x"),) * 3))
    sim.run(5000)
    for e in sim.trace.events("filter"):
        assert e["detail"]["max_step_work"] <= e["detail"]["db_total_length"]


# -- bundled two-domain run

@pytest.fixture(scope="module")
def two_domain():
    return execute(load_scenario(bundled("two_domain.toml")))


def test_two_domain_assertions(two_domain):
    assert two_domain.failures == []


def test_two_domain_every_honest_node_learns(two_domain):
    sc, sim = two_domain.scenario, two_domain.simulator
    want = tuple(sc.malicious[p].txid for p in ("mal-1", "mal-2", "mal-3"))
    for n in sim.nodes:
        if n.role != ATTACKER:
            assert want in [s.hashes for s in n.db]


def test_two_domain_measured_overhead_by_hand(two_domain):
    sim = two_domain.simulator
    a2 = two_domain.scenario.node_id("A2")
    lines = [r for r in two_domain.trace.records if r.get("from") == a2 and r["tick"] < 4000]
    intel = sum(r["bytes"] for r in lines if r["kind"] == "fork-intel")
    total = sum(r["bytes"] for r in lines)
    assert two_domain.report["measured_overhead"]["A2"] == pytest.approx(intel / total)
    assert 0 < intel < total
