"""Deterministic discrete-event simulation of the PETES pipeline.

A client never broadcasts; it seals its signed transaction to its entry
node (operated by PAM) over an access link.  The entry runs PAM: policy
decision, field recording, pseudonymization, chunking, one garlic bulb and
one onion per path.  All chunk packets leave the entry in the same tick.
Relays peel and forward, exits hand chunks back to PAM, which reassembles
and broadcasts the final transaction to the core mempool.

Events sharing a tick are processed in an order drawn from the scenario
seed, so identical inputs give byte-identical results.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import logging
import random
import struct
from dataclasses import dataclass, field
from typing import Iterable

from . import crypto_core
from .chain_core import Ledger, LedgerError, Transaction, TxKind
from .gor_packet import (
    MAX_PATH_LEN,
    Chunk,
    Clove,
    Forward,
    OnionPacket,
    PacketError,
    PathSpec,
    PeelError,
    build_onion,
    bundle,
    peel,
)
from .pam import PAM, Policy, PolicyDecision, allocate_relays, evaluate, path_keys, vet_contracts
from .topology import Topology, enumerate_paths

log = logging.getLogger(__name__)

CORE = "core"
ACCESS_LATENCY = 1
_SUBMIT_HEAD = struct.Struct("<I")


def client_id(label: str) -> str:
    return "@" + label


def is_client(node_id: str) -> bool:
    return node_id.startswith("@")


@dataclass(frozen=True)
class Event:
    time: int
    src: str
    dst: str
    packet_bytes: bytes

    @property
    def overlay(self) -> bool:
        return CORE not in (self.src, self.dst)

    def to_dict(self, seq: int) -> dict:
        return {
            "seq": seq,
            "time": self.time,
            "from": self.src,
            "to": self.dst,
            "len": len(self.packet_bytes),
            "bytes": self.packet_bytes.hex(),
        }


class TraceLog:
    """Every delivery, in processing order.  A vantage is a node id or a (from, to) link."""

    def __init__(self, events: Iterable[Event] = ()):
        self.events: list[Event] = list(events)

    def append(self, ev: Event) -> int:
        self.events.append(ev)
        return len(self.events) - 1

    def __len__(self) -> int:
        return len(self.events)

    def at_node(self, node: str) -> list[Event]:
        return [e for e in self.events if node in (e.src, e.dst)]

    def on_link(self, src: str, dst: str) -> list[Event]:
        return [e for e in self.events if e.src == src and e.dst == dst]

    def links(self) -> set[tuple[str, str]]:
        return {(e.src, e.dst) for e in self.events}

    def export(self) -> str:
        return "".join(json.dumps(e.to_dict(i), sort_keys=True) + "\n" for i, e in enumerate(self.events))

    @classmethod
    def from_export(cls, text: str) -> TraceLog:
        evs = []
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                evs.append(Event(d["time"], d["from"], d["to"], bytes.fromhex(d["bytes"])))
        return cls(evs)

    def digest(self) -> str:
        return hashlib.sha256(self.export().encode()).hexdigest()


@dataclass(frozen=True)
class TxRequest:
    time: int
    sender: str
    receiver: str
    amount: int
    asset: str = "COIN"
    payload: bytes = b"payload"


@dataclass
class User:
    label: str
    keypair: crypto_core.KeyPair
    balance: int = 0
    entry: str | None = None

    @property
    def address(self) -> bytes:
        return crypto_core.address_of(self.keypair.verify_key)


def make_user(label: str, balance: int = 0, seed: bytes = b"", entry: str | None = None) -> User:
    kp = crypto_core.keygen(crypto_core.hash(b"petes/user/" + seed + b"/" + label.encode()))
    return User(label, kp, balance, entry)


@dataclass
class Scenario:
    topology: Topology
    users: dict[str, User]
    txs: list[TxRequest]
    seed: int = 0
    acks: bool = False
    packet_loss: float = 0.0
    crash_sidechain_at: int | None = None
    peg_float: int = 0
    policy_path: str | None = None


@dataclass(frozen=True)
class Flow:
    sender: str  # client id
    receiver: bytes  # receiver address


@dataclass
class ScenarioResult:
    core: Ledger
    side: Ledger
    trace: TraceLog
    metrics: dict
    delivered: list[Transaction]
    # simulator-private state: never exported
    ground_truth: dict[int, Flow] = field(default_factory=dict)
    directory: dict[bytes, str] = field(default_factory=dict)
    pam: PAM | None = None
    decisions: list[PolicyDecision] = field(default_factory=list)
    ack_paths: list[tuple[PathSpec, PathSpec | None]] = field(default_factory=list)
    policy: Policy | None = None
    updated_policy: Policy | None = None
    topology: Topology | None = None

    def artifacts(self) -> dict[str, bytes]:
        """Exported files, by name."""
        return {
            "core.ledger": self.core.export().encode(),
            "side.ledger": self.side.export().encode(),
            "trace.ndjson": self.trace.export().encode(),
            "metrics.ndjson": (json.dumps(self.metrics, sort_keys=True) + "\n").encode(),
        }


def return_path(decision: PolicyDecision, topology: Topology, from_exit: str | None = None
                ) -> PathSpec | None:
    """Acknowledgement path exit -> entry avoiding every forward relay, or None."""
    fwd = decision.paths[0]
    start = from_exit if from_exit is not None else fwd.exit
    forward_relays = {r for p in decision.paths for r in p.relays}
    usable = topology.routable_relays() - forward_relays
    for length in range(1, min(MAX_PATH_LEN, len(usable)) + 1):
        for p in enumerate_paths(topology, start, [fwd.entry], length, usable):
            return p
    log.warning("no relay-disjoint return path from %s to %s; ack suppressed", start, fwd.entry)
    return None


def pad_cell(data: bytes, cell_size: int) -> bytes:
    plain = _SUBMIT_HEAD.pack(len(data)) + data
    room = cell_size - crypto_core.SEAL_OVERHEAD
    if len(plain) > room:
        raise PacketError("submission does not fit a cell")
    return plain + bytes(room - len(plain))


def unpad_cell(plain: bytes) -> bytes:
    (n,) = _SUBMIT_HEAD.unpack_from(plain)
    return plain[_SUBMIT_HEAD.size : _SUBMIT_HEAD.size + n]


class Simulator:
    """Event loop plus all per-scenario state.  Use :func:`run_scenario` normally."""

    def __init__(self, scenario: Scenario, policy: Policy):
        self.sc = scenario
        # contracts are vetted per run; copy so a scenario can be re-run unchanged
        src = scenario.topology
        self.topo = Topology(src.nodes, src.links, dict(src.contracts))
        self.topo.validate()
        self.policy = policy
        self.cell_size = policy.cell_size
        seed = scenario.seed
        self.seed_bytes = struct.pack("<q", seed)
        self.rng = random.Random(crypto_core.hash(b"petes/sim/" + self.seed_bytes))
        self.loss_rng = random.Random(crypto_core.hash(b"petes/loss/" + self.seed_bytes))
        self._counter = 0
        self._seal_counter = 0
        self.queue: list = []
        self.trace = TraceLog()
        self.now = 0
        self.crashed: set[str] = set()
        self.seen: dict[str, set[bytes]] = {}
        self.drops: dict[str, int] = {}
        self.metrics = {"seed": seed, "submitted": 0, "delivered": 0, "packets": 0,
                        "acks_sent": 0, "acks_delivered": 0, "acks_suppressed": 0}
        self.ground_truth: dict[int, Flow] = {}
        self.decisions: list[PolicyDecision] = []
        self.ack_paths: list[tuple[PathSpec, PathSpec | None]] = []
        self.msg_origin: dict[bytes, tuple[str, PolicyDecision]] = {}
        self._pending_truth: dict[int, Flow] = {}
        self.users = scenario.users
        self.by_address = {u.address: u for u in self.users.values()}

        pam_kp = crypto_core.keygen(crypto_core.hash(b"petes/pam/" + self.seed_bytes))
        self.pam = PAM(policy, pam_kp)
        changed = vet_contracts(policy, self.topo)

        genesis: dict[bytes, int] = {}
        accounts = []
        pool = scenario.peg_float
        for u in self.users.values():
            if u.balance <= 0:
                continue
            if policy.pseudonymize:
                self.pam.deposit(u.address, u.balance)
                pool += u.balance
            else:
                genesis[u.address] = u.balance
                accounts.append(u.keypair.verify_key)
        if pool:
            genesis[self.pam.pool_address] = pool
        self.core = Ledger("core", genesis, accounts, custodian=pam_kp.verify_key)
        self.side = Ledger("side", {}, [pam_kp.verify_key])
        self._side_nonce = 0
        for sc in changed:
            self._side_record(sc.to_bytes())
        if scenario.peg_float:
            from .peg import lock_on_core, mint_on_side

            proof = lock_on_core(self.core, pam_kp, scenario.peg_float, self.pam.pool_address, 0)
            mint_on_side(self.side, proof, self.core, 0)
        self.side_dirty = bool(self.side.mempool)

    # -- queue -----------------------------------------------------------

    def schedule(self, time: int, kind: str, src: str, dst: str, data: bytes) -> None:
        self._counter += 1
        heapq.heappush(self.queue, (time, self.rng.random(), self._counter, kind, src, dst, data))

    def inject(self, time: int, src: str, dst: str, data: bytes) -> None:
        """Put a raw overlay packet on the link src -> dst (tests, replay experiments)."""
        self.schedule(time, "onion", src, dst, data)

    def _drop(self, reason: str) -> None:
        self.drops[reason] = self.drops.get(reason, 0) + 1

    def _next_seed(self) -> bytes:
        self._seal_counter += 1
        return crypto_core.hash(b"petes/eph/" + self.seed_bytes + struct.pack("<Q", self._seal_counter))

    def _side_record(self, payload: bytes) -> None:
        self._side_nonce += 1
        tx = Transaction(self.pam.pool_address, self.pam.pool_address, 0, payload=payload,
                         nonce=self._side_nonce).signed(self.pam.keypair)
        self.side.submit(tx)

    # -- workload ----------------------------------------------------------

    def submit_all(self) -> None:
        for i, req in enumerate(self.sc.txs):
            self.schedule_client(i, req)

    def client_tx(self, i: int, req: TxRequest) -> Transaction:
        sender, receiver = self.users[req.sender], self.users[req.receiver]
        sealed = crypto_core.seal(req.payload, receiver.keypair.public_key, self._next_seed())
        tx = Transaction(sender.address, receiver.address, req.amount, req.asset,
                         sealed.to_bytes(), TxKind.TRANSFER, nonce=i + 1)
        return tx.signed(sender.keypair)

    def schedule_client(self, i: int, req: TxRequest) -> None:
        user = self.users[req.sender]
        entry = user.entry or self.topo.entries[0]
        tx = self.client_tx(i, req)
        cell = crypto_core.seal(pad_cell(tx.to_bytes(), self.cell_size),
                                self.topo.nodes[entry].public_key, self._next_seed()).to_bytes()
        self.metrics["submitted"] += 1
        self._counter += 1
        heapq.heappush(self.queue, (req.time + ACCESS_LATENCY, self.rng.random(), self._counter,
                                    "submit", client_id(req.sender), entry, cell))
        self._pending_truth[self._counter] = Flow(client_id(req.sender), self.users[req.receiver].address)

    # -- event handling ----------------------------------------------------

    def step(self) -> bool:
        """Process the earliest event.  Returns False at the fixpoint (empty queue)."""
        if not self.queue:
            return False
        time, _, counter, kind, src, dst, data = heapq.heappop(self.queue)
        if time > self.now:
            self._close_tick()
            self.now = time
        if self.sc.crash_sidechain_at is not None and time >= self.sc.crash_sidechain_at:
            self.crashed = set(self.topo.nodes)
        seq = self.trace.append(Event(time, src, dst, data))
        if kind == "submit":
            truth = self._pending_truth.pop(counter)
            self.ground_truth[seq] = truth
            self._on_submit(src, dst, data)
        elif kind == "onion":
            self.metrics["packets"] += 1
            self._on_onion(src, dst, data)
        return True

    def _close_tick(self) -> None:
        if self.core.mempool:
            self.core.seal_block(self.now)
        if self.side.mempool and not self.crashed:
            self.side.seal_block(self.now)

    def _send(self, src: str, dst: str, data: bytes) -> None:
        if (src, dst) not in self.topo.links:
            self._drop("unknown_next_hop")
            return
        if self.sc.packet_loss and self.loss_rng.random() < self.sc.packet_loss:
            self._drop("loss")
            return
        self.schedule(self.now + self.topo.latency(src, dst), "onion", src, dst, data)

    def _on_submit(self, client: str, entry: str, cell: bytes) -> None:
        if entry in self.crashed:
            self._drop("crashed")
            return
        node = self.topo.nodes[entry]
        try:
            tx = Transaction.from_bytes(unpad_cell(crypto_core.open(cell, node.keypair.secret_key)))
        except (crypto_core.CryptoError, LedgerError, struct.error):
            self._drop("undecryptable")
            return
        decision = evaluate(self.policy, tx, self.topo, self.sc.seed, entry=entry)
        allocation = allocate_relays(self.topo, decision)
        try:
            final = self.pam.prepare(tx, decision)
        except LedgerError as exc:
            log.warning("PAM refused submission from %s: %s", client, exc)
            self._drop("rejected")
            return
        message = final.to_bytes()
        self.decisions.append(decision)
        self.msg_origin[crypto_core.hash(message)] = (client, decision)
        keys = path_keys(self.topo, decision, allocation)
        for i, (chunk, path) in enumerate(zip(decision.chunk_plan(message), decision.paths)):
            clove = Clove(path.exit, i, chunk.to_bytes(), self.now)
            pkt = build_onion(bundle([clove]), path, keys[i], self.cell_size, self._next_seed())
            self._send(entry, path.hops[0], pkt.data)

    def _on_onion(self, src: str, node_id: str, data: bytes) -> None:
        if node_id in self.crashed:
            self._drop("crashed")
            return
        node = self.topo.nodes.get(node_id)
        if node is None:
            self._drop("unknown_next_hop")
            return
        digest = crypto_core.hash(data)
        seen = self.seen.setdefault(node_id, set())
        if digest in seen:
            self._drop("replay")
            return
        seen.add(digest)
        try:
            out = peel(OnionPacket(data), node.keypair.secret_key)
        except PeelError:
            self._drop("undecryptable")
            return
        if isinstance(out, Forward):
            self._send(node_id, out.next_hop, out.packet.data)
            return
        for clove in out.bulb.cloves:
            if is_client(clove.destination):
                self._deliver_ack(node_id, clove)
            elif node.role == "exit":
                self._exit_chunk(node_id, clove)
            else:
                self._drop("misrouted")

    def _exit_chunk(self, exit_id: str, clove: Clove) -> None:
        try:
            chunk = Chunk.from_bytes(clove.payload)
        except PacketError:
            self._drop("malformed")
            return
        try:
            tx = self.pam.receive_chunk(chunk, self.core)
        except LedgerError as exc:
            log.warning("core rejected final transaction: %s", exc)
            self._drop("rejected")
            return
        if tx is None:
            return
        self.metrics["delivered"] += 1
        self.trace.append(Event(self.now, exit_id, CORE, tx.to_bytes()))
        self._side_record(b"receipt:" + tx.tx_id)
        if self.sc.acks:
            self._send_ack(exit_id, chunk.message_id)

    def _send_ack(self, exit_id: str, message_id: bytes) -> None:
        client, decision = self.msg_origin[message_id]
        ret = return_path(decision, self.topo, from_exit=exit_id)
        self.ack_paths.append((decision.paths[0], ret))
        if ret is None:
            self.metrics["acks_suppressed"] += 1
            return
        keys = self.topo.public_keys()
        clove = Clove(client, 0, b"ack:" + message_id, self.now)
        pkt = build_onion(bundle([clove]), ret, keys, self.cell_size, self._next_seed())
        self.metrics["acks_sent"] += 1
        self._send(exit_id, ret.hops[0], pkt.data)

    def _deliver_ack(self, entry_id: str, clove: Clove) -> None:
        label = clove.destination[1:]
        user = self.users.get(label)
        if user is None:
            self._drop("misrouted")
            return
        cell = crypto_core.seal(pad_cell(clove.payload, self.cell_size),
                                user.keypair.public_key, self._next_seed()).to_bytes()
        self.trace.append(Event(self.now, entry_id, clove.destination, cell))
        self.metrics["acks_delivered"] += 1

    def run(self) -> None:
        while self.step():
            pass
        self._close_tick()

    def result(self) -> ScenarioResult:
        m = dict(self.metrics)
        m["drops"] = dict(sorted(self.drops.items()))
        m["drops_total"] = sum(self.drops.values())
        m["trace_events"] = len(self.trace)
        m["trace_digest"] = self.trace.digest()
        m["core_height"] = self.core.height
        m["side_height"] = self.side.height
        return ScenarioResult(
            core=self.core, side=self.side, trace=self.trace, metrics=m,
            delivered=list(self.pam.broadcasts), ground_truth=dict(self.ground_truth),
            directory={u.address: client_id(u.label) for u in self.users.values()},
            pam=self.pam, decisions=list(self.decisions), ack_paths=list(self.ack_paths),
            policy=self.policy, topology=self.topo,
        )


def run_scenario(scenario: Scenario, policy: Policy) -> ScenarioResult:
    """Run every transaction of *scenario* through the pipeline under *policy*."""
    sim = Simulator(scenario, policy)
    sim.submit_all()
    sim.run()
    return sim.result()


def run_direct(scenario: Scenario) -> ScenarioResult:
    """Control arm: clients broadcast plaintext signed transactions straight to the core."""
    users = scenario.users
    genesis = {u.address: u.balance for u in users.values() if u.balance > 0}
    accounts = [u.keypair.verify_key for u in users.values() if u.balance > 0]
    core = Ledger("core", genesis, accounts)
    side = Ledger("side")
    trace = TraceLog()
    truth: dict[int, Flow] = {}
    seed_bytes = struct.pack("<q", scenario.seed)
    rng = random.Random(crypto_core.hash(b"petes/sim/" + seed_bytes))
    order = sorted(
        ((req.time + ACCESS_LATENCY, rng.random(), i, req) for i, req in enumerate(scenario.txs)),
        key=lambda t: t[:3],
    )
    delivered = []
    now = None
    for time, _, i, req in order:
        if now is not None and time > now and core.mempool:
            core.seal_block(now)
        now = time
        s, r = users[req.sender], users[req.receiver]
        tx = Transaction(s.address, r.address, req.amount, req.asset, req.payload,
                         nonce=i + 1).signed(s.keypair)
        core.submit(tx)
        seq = trace.append(Event(time, client_id(req.sender), CORE, tx.to_bytes()))
        truth[seq] = Flow(client_id(req.sender), r.address)
        delivered.append(tx)
    if core.mempool:
        core.seal_block(now)
    metrics = {"seed": scenario.seed, "submitted": len(order), "delivered": len(delivered),
               "packets": 0, "drops": {}, "drops_total": 0, "trace_events": len(trace),
               "trace_digest": trace.digest(), "core_height": core.height, "side_height": 0}
    return ScenarioResult(core, side, trace, metrics, delivered, truth,
                          {u.address: client_id(u.label) for u in users.values()},
                          topology=scenario.topology)
