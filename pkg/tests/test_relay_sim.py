import random
from collections import defaultdict

import pytest
from helpers import synchronized

from petes import crypto_core as cc
from petes.chain_core import Ledger, Transaction, validate_chain
from petes.gor_packet import Chunk, IncompleteMessage, PacketError, Terminal, peel, reassemble
from petes.pam import Policy, PolicyUnsatisfiable, evaluate
from petes.relay_sim import (
    CORE,
    Scenario,
    Simulator,
    TraceLog,
    TxRequest,
    make_user,
    return_path,
    run_direct,
    run_scenario,
)
from petes.topology import full_mesh, line, random_topology


def one_tx(topo=None, **kw) -> Scenario:
    topo = topo or full_mesh(2)
    users = {"a": make_user("a", 50), "b": make_user("b", 0)}
    return Scenario(topo, users, [TxRequest(0, "a", "b", 7, "COIN", b"hi")], **kw)


def test_single_tx_pipeline():
    res = run_scenario(one_tx(), Policy(n_paths=1, min_relays_per_path=2))
    assert len(res.delivered) == 1
    tx = res.delivered[0]
    assert tx.pseudonymized
    assert tx.receiver == make_user("b").address
    found = res.core.find_tx(tx.tx_id)
    assert found is not None and res.core.balance(tx.receiver) == 7
    assert validate_chain(res.core) and validate_chain(res.side)
    assert res.metrics["delivered"] == res.metrics["submitted"] == 1


def test_core_sees_one_broadcast_per_tx():
    res = run_scenario(synchronized(4, n_relays=8), Policy(n_paths=2))
    sinks = [e for e in res.trace.events if e.dst == CORE]
    assert len(sinks) == 4 == len(res.pam.broadcasts)
    assert len({cc.hash(e.packet_bytes) for e in sinks}) == 4


def test_same_seed_same_trace():
    a = run_scenario(synchronized(3, seed=5), Policy())
    b = run_scenario(synchronized(3, seed=5), Policy())
    assert a.trace.digest() == b.trace.digest()
    assert a.artifacts() == b.artifacts()
    c = run_scenario(synchronized(3, seed=6), Policy())
    assert c.trace.digest() != a.trace.digest()


def test_rerun_does_not_mutate_scenario():
    sc = synchronized(2)
    before = dict(sc.topology.contracts)
    run_scenario(sc, Policy())
    assert sc.topology.contracts == before


def test_times_non_decreasing():
    res = run_scenario(synchronized(4, acks=True), Policy(n_paths=2))
    times = [e.time for e in res.trace.events]
    assert times == sorted(times)


def test_multipath_each_path_insufficient():
    res = run_scenario(synchronized(1, n_relays=8), Policy(n_paths=3))
    dec = res.decisions[0]
    keys = {n: node.keypair.secret_key for n, node in res.topology.nodes.items()}
    by_exit = defaultdict(list)
    for e in res.trace.events:
        if e.overlay and e.dst in res.topology.exits:
            assert len(e.packet_bytes) == 2048
            out = peel(e.packet_bytes, keys[e.dst])
            assert isinstance(out, Terminal)
            by_exit[e.src].extend(Chunk.from_bytes(c.payload) for c in out.bulb.cloves)
    assert len(by_exit) == 3 == len(dec.paths)
    for last_relay, chunks in by_exit.items():
        with pytest.raises(IncompleteMessage):
            reassemble(chunks)
    assert reassemble([c for cs in by_exit.values() for c in cs]) == res.delivered[0].to_bytes()


def test_replay_suppressed():
    sim = Simulator(one_tx(), Policy())
    sim.submit_all()
    while sim.step():
        first = next((e for e in sim.trace.events if e.overlay and not e.src.startswith("@")), None)
        if first:
            break
    sim.inject(sim.now, first.src, first.dst, first.packet_bytes)
    sim.inject(sim.now, first.src, first.dst, first.packet_bytes)
    sim.run()
    res = sim.result()
    assert res.metrics["drops"].get("replay", 0) >= 1
    assert len(res.delivered) == 1
    assert len([e for e in res.trace.events if e.dst == CORE]) == 1


def test_unknown_next_hop_counted():
    t = full_mesh(2)
    del t.links[("r0", "exit0")], t.links[("r1", "exit0")]
    t.add_link("r0", "exit0", 1)
    res = run_scenario(one_tx(t, seed=0), Policy(n_paths=1, min_relays_per_path=1))
    assert res.metrics["drops_total"] == 0
    sim = Simulator(one_tx(full_mesh(2)), Policy())
    sim._send("r0", "nowhere", b"x" * 2048)
    assert sim.drops == {"unknown_next_hop": 1}


def test_undecryptable_dropped_not_fatal():
    sim = Simulator(one_tx(), Policy())
    sim.inject(0, "entry0", "r0", bytes(2048))
    sim.submit_all()
    sim.run()
    res = sim.result()
    assert res.metrics["drops"]["undecryptable"] == 1
    assert len(res.delivered) == 1


def test_empty_queue_fixpoint():
    sim = Simulator(one_tx(), Policy())
    assert sim.step() is False


def test_packet_loss_never_corrupts_core():
    for s in range(5):
        res = run_scenario(synchronized(4, seed=s, packet_loss=0.3), Policy(n_paths=2))
        assert validate_chain(res.core)
        assert len(res.delivered) <= 4


def test_unsatisfiable_policy_raises():
    with pytest.raises(PolicyUnsatisfiable):
        run_scenario(one_tx(line(2)), Policy(n_paths=2))


def test_insufficient_deposit_rejected_not_fatal():
    sc = one_tx()
    sc.txs.append(TxRequest(0, "a", "b", 500))
    res = run_scenario(sc, Policy())
    assert res.metrics["drops"].get("rejected") == 1
    assert len(res.delivered) == 1


def test_return_path_line_suppressed(caplog):
    t = line(3)
    dec = evaluate(Policy(min_relays_per_path=1), Transaction(cc.hash(b"a"), cc.hash(b"b"), 1), t)
    assert return_path(dec, t) is None
    assert "ack suppressed" in caplog.text
    res = run_scenario(one_tx(line(3), acks=True), Policy(min_relays_per_path=1))
    assert res.metrics["acks_suppressed"] == 1 and res.metrics["acks_delivered"] == 0


def test_return_path_full_mesh():
    t = full_mesh(4)
    dec = evaluate(Policy(), Transaction(cc.hash(b"a"), cc.hash(b"b"), 1), t)
    ret = return_path(dec, t)
    assert ret is not None
    assert not set(ret.relays) & set(dec.paths[0].relays)
    assert (ret.entry, ret.exit) == (dec.paths[0].exit, dec.paths[0].entry)


def test_return_path_disjoint_random_topologies():
    checked = 0
    for s in range(200):
        rng = random.Random(s)
        t = random_topology(rng, rng.randint(3, 7), 0.6)
        try:
            dec = evaluate(Policy(min_relays_per_path=1, n_paths=rng.randint(1, 2)),
                           Transaction(cc.hash(b"a"), cc.hash(b"b"), s), t, s)
        except PolicyUnsatisfiable:
            continue
        ret = return_path(dec, t)
        if ret is not None:
            checked += 1
            assert not set(ret.relays) & {r for p in dec.paths for r in p.relays}
    assert checked > 50


def test_acks_delivered_to_clients():
    res = run_scenario(synchronized(3, acks=True), Policy())
    assert res.metrics["acks_delivered"] == 3
    acks = [e for e in res.trace.events if e.dst.startswith("@")]
    assert len(acks) == 3 and all(len(e.packet_bytes) == 2048 for e in acks)
    for fwd, ret in res.ack_paths:
        assert not set(fwd.relays) & set(ret.relays)


def test_crash_keeps_core_valid():
    res = run_scenario(synchronized(4, crash_sidechain_at=2), Policy())
    assert res.metrics["drops"]["crashed"] >= 1
    assert validate_chain(res.core)
    assert res.delivered == []


def test_trace_export_roundtrip():
    res = run_scenario(synchronized(2), Policy())
    text = res.trace.export()
    assert TraceLog.from_export(text).export() == text
    assert TraceLog.from_export(text).digest() == res.trace.digest()


def test_trace_vantage_views():
    res = run_scenario(synchronized(2), Policy())
    at = res.trace.at_node("entry0")
    assert at and all("entry0" in (e.src, e.dst) for e in at)
    for link in res.trace.links():
        assert all((e.src, e.dst) == link for e in res.trace.on_link(*link))


def test_direct_control_arm():
    res = run_direct(synchronized(3))
    assert len(res.delivered) == 3
    assert all(not t.pseudonymized for t in res.delivered)
    assert all(e.dst == CORE for e in res.trace.events)
    assert validate_chain(res.core)


def test_pseudonymize_off_keeps_sender():
    res = run_scenario(one_tx(), Policy(pseudonymize=False))
    tx = res.delivered[0]
    assert not tx.pseudonymized and tx.sender == make_user("a").address
    assert validate_chain(res.core)


def test_exported_ledgers_reload():
    res = run_scenario(synchronized(2, peg_float=10), Policy())
    for led in (res.core, res.side):
        again = Ledger.from_export(led.export())
        assert validate_chain(again) and again.balances == led.balances
    assert res.side.total_free() <= res.core.total_locked()


def test_submission_too_big_for_cell():
    sc = one_tx()
    sc.txs[0] = TxRequest(0, "a", "b", 1, "COIN", b"x" * 4000)
    with pytest.raises(PacketError):
        run_scenario(sc, Policy())
