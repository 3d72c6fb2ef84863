"""Passive traffic analysis against simulator traces.

The adversary sees the events at its vantage points plus every broadcast
to the core mempool (the core chain is public).  A compromised node also
hands over its secret key, which lets the adversary peel what that node
received.

Each observed submission (a client-to-entry or client-to-core event) is
guessed independently: candidate sinks are the broadcasts within
``window`` ticks after it, narrowed by whatever exact evidence the vantage
yields, and the earliest candidate (time, then trace position) is taken.
Extra vantage only adds observations and narrows candidate sets that
always contain the true sink, so the score never drops as vantage grows.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from . import crypto_core
from .chain_core import LedgerError, Transaction
from .gor_packet import MAX_PATH_LEN, Chunk, Forward, PacketError, PeelError, peel
from .pam import Policy, topology_limits, update_policy
from .relay_sim import CORE, Event, Flow, ScenarioResult, TraceLog, is_client, unpad_cell
from .topology import Topology


@dataclass(frozen=True)
class VantageSet:
    nodes: frozenset[str] = frozenset()
    links: frozenset[tuple[str, str]] = frozenset()

    def __or__(self, other: VantageSet) -> VantageSet:
        return VantageSet(self.nodes | other.nodes, self.links | other.links)

    def sees(self, ev: Event) -> bool:
        return ev.src in self.nodes or ev.dst in self.nodes or (ev.src, ev.dst) in self.links

    def check(self, topology: Topology, trace: TraceLog) -> None:
        unknown = self.nodes - set(topology.nodes)
        known_links = set(topology.links) | trace.links()
        unknown_links = self.links - known_links
        if unknown or unknown_links:
            raise ValueError(f"vantage outside topology: {sorted(unknown)} {sorted(unknown_links)}")

    @classmethod
    def everything(cls, topology: Topology) -> VantageSet:
        return cls(frozenset(topology.nodes))

    @classmethod
    def entry_exit_links(cls, topology: Topology, trace: TraceLog) -> VantageSet:
        """Every link touching an entry or exit node (no node compromise)."""
        edge = set(topology.entries) | set(topology.exits)
        links = {l for l in set(topology.links) | trace.links() if l[0] in edge or l[1] in edge}
        return cls(frozenset(), frozenset(links))


@dataclass
class TraceView:
    events: list[tuple[int, Event]]
    secrets: dict[str, bytes]
    latencies: dict[tuple[str, str], int]
    entries: frozenset[str]
    directory: dict[bytes, str] = field(default_factory=dict)


def observe(trace: TraceLog, vantage: VantageSet, topology: Topology | None = None,
            directory: Mapping[bytes, str] | None = None) -> TraceView:
    """Restrict *trace* to what *vantage* sees, plus the public mempool."""
    events = [(i, e) for i, e in enumerate(trace.events) if e.dst == CORE or vantage.sees(e)]
    secrets, lat, entries = {}, {}, frozenset()
    if topology is not None:
        secrets = {n: topology.nodes[n].keypair.secret_key for n in vantage.nodes if n in topology.nodes}
        lat = dict(topology.links)
        entries = frozenset(topology.entries)
    return TraceView(events, secrets, lat, entries, dict(directory or {}))


@dataclass
class LinkageGuess:
    guesses: dict[int, tuple[str, bytes]] = field(default_factory=dict)
    confidence: dict[int, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.guesses)


def _match_key(tx: Transaction) -> tuple:
    return (tx.receiver, tx.amount, tx.asset, tx.payload)


def _chain_origins(view: TraceView, sinks: dict[int, Transaction]) -> dict[int, set[tuple[int, str]]]:
    """sink seq -> {(first-hop departure time, entry)} proven by compromised relays and exits."""
    by_digest: dict[bytes, int] = {}
    for seq, e in view.events:
        if e.overlay and not is_client(e.src) and not is_client(e.dst):
            by_digest.setdefault(crypto_core.hash(e.packet_bytes), seq)
    parent: dict[int, int] = {}  # downstream event seq -> upstream event seq
    sink_of_mid = {crypto_core.hash(tx.to_bytes()): seq for seq, tx in sinks.items()}
    sink_inputs: dict[int, list[int]] = {}
    events = dict(view.events)
    for seq, e in view.events:
        key = view.secrets.get(e.dst)
        if key is None or not e.overlay or is_client(e.src):
            continue
        try:
            out = peel(e.packet_bytes, key)
        except PeelError:
            continue
        if isinstance(out, Forward):
            nxt = by_digest.get(crypto_core.hash(out.packet.data))
            if nxt is not None:
                parent[nxt] = seq
            continue
        for clove in out.bulb.cloves:
            try:
                mid = Chunk.from_bytes(clove.payload).message_id
            except PacketError:
                continue
            if mid in sink_of_mid:
                sink_inputs.setdefault(sink_of_mid[mid], []).append(seq)
    origins: dict[int, set[tuple[int, str]]] = {}
    for sink, inputs in sink_inputs.items():
        found = set()
        for seq in inputs:
            while seq in parent:
                seq = parent[seq]
            e = events[seq]
            if e.src in view.entries:
                found.add((e.time - view.latencies.get((e.src, e.dst), 0), e.src))
        if found:
            origins[sink] = found
    return origins


def timing_correlate(view: TraceView, window: int) -> LinkageGuess:
    sources = [(seq, e) for seq, e in view.events if is_client(e.src)]
    sinks: dict[int, Transaction] = {}
    for seq, e in view.events:
        if e.dst == CORE:
            try:
                sinks[seq] = Transaction.from_bytes(e.packet_bytes)
            except LedgerError:
                continue
    if not sources or not sinks:
        return LinkageGuess()
    times = {seq: e.time for seq, e in view.events}
    origins = _chain_origins(view, sinks) if view.secrets else {}
    owner = {
        seq: view.directory[tx.sender]
        for seq, tx in sinks.items()
        if not tx.pseudonymized and tx.sender in view.directory
    }
    guess = LinkageGuess()
    for seq, e in sources:
        client = e.src
        if seq in sinks:  # direct broadcast: the submission is the sink
            cands = [seq]
        else:
            cands = [x for x in sinks if e.time <= times[x] <= e.time + window]
            cands = [x for x in cands if owner.get(x, client) == client]
            key = view.secrets.get(e.dst)
            if key is not None:
                try:
                    sub = Transaction.from_bytes(unpad_cell(crypto_core.open(e.packet_bytes, key)))
                    want = _match_key(sub)
                    cands = [x for x in cands if _match_key(sinks[x]) == want]
                except (crypto_core.CryptoError, LedgerError, ValueError):
                    pass
            cands = [x for x in cands if x not in origins or (e.time, e.dst) in origins[x]]
        if not cands:
            continue
        best = min(cands, key=lambda x: (times[x], x))
        guess.guesses[seq] = (client, sinks[best].receiver)
        guess.confidence[seq] = 1.0 / len(cands)
    return guess


def score(guess: LinkageGuess, ground_truth: Mapping[int, Flow]) -> float:
    """Fraction of true flows whose (sender, receiver) pair is guessed exactly."""
    if not ground_truth:
        return 0.0
    hits = sum(1 for k, f in ground_truth.items() if guess.guesses.get(k) == (f.sender, f.receiver))
    return hits / len(ground_truth)


def default_window(topology: Topology) -> int:
    return max(1, topology.max_latency()) * (MAX_PATH_LEN + 1)


def linkability(result: ScenarioResult, vantage: VantageSet, window: int | None = None) -> float:
    topo = result.topology
    view = observe(result.trace, vantage, topo, result.directory)
    w = default_window(topo) if window is None else window
    return score(timing_correlate(view, w), result.ground_truth)


def ab_comparison(scenario, policy: Policy, vantage: VantageSet | None = None,
                  window: int | None = None) -> tuple[float, float]:
    """(GOR score, direct-broadcast score) for the same workload, seed and vantage.

    With no vantage given, every link touching an entry or exit is watched.
    """
    from .relay_sim import run_direct, run_scenario

    gor = run_scenario(scenario, policy)
    direct = run_direct(scenario)
    if vantage is None:
        vantage = VantageSet.entry_exit_links(scenario.topology, gor.trace)
    return linkability(gor, vantage, window), linkability(direct, vantage, window)


def feedback(result: ScenarioResult, vantage: VantageSet) -> Policy:
    """Measure linkability at *vantage* and let PAM update its policy."""
    measured = linkability(result, vantage)
    max_paths, max_relays = topology_limits(result.topology)
    return update_policy(result.policy, measured, max_paths, max_relays)


def random_vantage_chain(rng: random.Random, topology: Topology, trace: TraceLog,
                         steps: int) -> list[VantageSet]:
    """Nested vantage sets, each adding one random node or link to the previous."""
    atoms: list = [("n", n) for n in sorted(topology.nodes)]
    atoms += [("l", l) for l in sorted(set(topology.links) | trace.links())]
    rng.shuffle(atoms)
    chain, cur = [], VantageSet()
    for kind, atom in atoms[:steps]:
        if kind == "n":
            cur = VantageSet(cur.nodes | {atom}, cur.links)
        else:
            cur = VantageSet(cur.nodes, cur.links | {atom})
        chain.append(cur)
    return chain


def metrics_records(seed: int, arm: str, vantage_name: str, value: float, result: ScenarioResult) -> dict:
    return {
        "seed": seed,
        "arm": arm,
        "vantage": vantage_name,
        "score": value,
        "delivered": result.metrics.get("delivered", 0),
        "drops": result.metrics.get("drops_total", 0),
    }


def dump_records(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
