"""Overlay topology: entry, relay (smart-contract) and exit nodes plus directed links."""

from __future__ import annotations

import functools
import random
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from . import crypto_core
from .chain_core import SmartContract
from .gor_packet import MAX_PATH_LEN, PathSpec

ROLES = ("entry", "relay", "exit")
DEFAULT_CONTRACT_FIELDS = frozenset({"tx_id"})
PATH_ENUMERATION_CAP = 20000


class TopologyError(ValueError):
    pass


@dataclass
class Node:
    node_id: str
    role: str
    keypair: crypto_core.KeyPair
    contract_id: bytes | None = None

    @property
    def public_key(self) -> bytes:
        return self.keypair.public_key


def node_keypair(seed: bytes, node_id: str) -> crypto_core.KeyPair:
    return crypto_core.keygen(crypto_core.hash(b"petes/node/" + seed + b"/" + node_id.encode()))


@dataclass
class Topology:
    nodes: dict[str, Node] = field(default_factory=dict)
    links: dict[tuple[str, str], int] = field(default_factory=dict)
    contracts: dict[bytes, SmartContract] = field(default_factory=dict)

    def add_node(self, node_id: str, role: str, seed: bytes = b"",
                 allowed_fields: Iterable[str] = DEFAULT_CONTRACT_FIELDS) -> Node:
        if role not in ROLES:
            raise TopologyError(f"unknown role {role!r}")
        if node_id in self.nodes:
            raise TopologyError(f"duplicate node {node_id!r}")
        if len(node_id.encode()) > 32 or not node_id or ":" in node_id:
            raise TopologyError(f"bad node id {node_id!r}")
        kp = node_keypair(seed, node_id)
        node = Node(node_id, role, kp)
        if role == "relay":
            cid = crypto_core.hash(b"petes/contract/" + node_id.encode())
            node.contract_id = cid
            self.contracts[cid] = SmartContract(cid, kp.public_key, frozenset(allowed_fields))
        self.nodes[node_id] = node
        return node

    def add_link(self, a: str, b: str, latency: int = 1, both: bool = False) -> None:
        for n in (a, b):
            if n not in self.nodes:
                raise TopologyError(f"link endpoint {n!r} is not a node")
        if a == b:
            raise TopologyError("self links are not allowed")
        if latency < 0:
            raise TopologyError("latency must be >= 0")
        self.links[(a, b)] = latency
        if both:
            self.links[(b, a)] = latency

    def ids(self, role: str) -> list[str]:
        return sorted(n for n, node in self.nodes.items() if node.role == role)

    @property
    def entries(self) -> list[str]:
        return self.ids("entry")

    @property
    def exits(self) -> list[str]:
        return self.ids("exit")

    @property
    def relays(self) -> list[str]:
        return self.ids("relay")

    def successors(self, a: str) -> list[str]:
        cache = self.__dict__.get("_succ")
        if cache is None or cache[0] != len(self.links):
            adj: dict[str, list[str]] = {}
            for (x, b) in self.links:
                adj.setdefault(x, []).append(b)
            cache = (len(self.links), {k: sorted(v) for k, v in adj.items()})
            self.__dict__["_succ"] = cache
        return cache[1].get(a, [])

    def latency(self, a: str, b: str) -> int:
        return self.links[(a, b)]

    def max_latency(self) -> int:
        return max(self.links.values(), default=0)

    def public_keys(self) -> dict[str, bytes]:
        return {n: node.public_key for n, node in self.nodes.items()}

    def contract_of(self, node_id: str) -> SmartContract | None:
        cid = self.nodes[node_id].contract_id
        return self.contracts.get(cid) if cid is not None else None

    def routable_relays(self) -> set[str]:
        out = set()
        for r in self.relays:
            sc = self.contract_of(r)
            if sc is not None and sc.trusted and sc.routable and sc.relay_public_key:
                out.add(r)
        return out

    def validate(self) -> None:
        if not self.entries or not self.exits:
            raise TopologyError("topology needs at least one entry and one exit")

    def path_latency(self, path: PathSpec) -> int:
        nodes = path.nodes
        return sum(self.latency(a, b) for a, b in zip(nodes, nodes[1:]))


def full_mesh(n_relays: int, n_entries: int = 1, n_exits: int = 1, latency: int = 1,
              seed: bytes = b"") -> Topology:
    """Every relay linked both ways to every other overlay node (no entry-exit shortcut)."""
    topo = Topology()
    entries = [topo.add_node(f"entry{i}", "entry", seed).node_id for i in range(n_entries)]
    relays = [topo.add_node(f"r{i}", "relay", seed).node_id for i in range(n_relays)]
    exits = [topo.add_node(f"exit{i}", "exit", seed).node_id for i in range(n_exits)]
    for r in relays:
        for other in entries + relays + exits:
            if other != r:
                topo.add_link(r, other, latency, both=True)
    return topo


def line(n_relays: int, latency: int = 1, seed: bytes = b"") -> Topology:
    """entry0 - r0 - ... - r{n-1} - exit0, links in both directions."""
    topo = Topology()
    chain = [topo.add_node("entry0", "entry", seed).node_id]
    chain += [topo.add_node(f"r{i}", "relay", seed).node_id for i in range(n_relays)]
    chain.append(topo.add_node("exit0", "exit", seed).node_id)
    for a, b in zip(chain, chain[1:]):
        topo.add_link(a, b, latency, both=True)
    return topo


def random_topology(rng: random.Random, n_relays: int, density: float = 0.5,
                    latency_range: tuple[int, int] = (1, 1), seed: bytes = b"") -> Topology:
    """Random bidirectional relay graph with one entry and one exit."""
    topo = Topology()
    topo.add_node("entry0", "entry", seed)
    relays = [topo.add_node(f"r{i}", "relay", seed).node_id for i in range(n_relays)]
    topo.add_node("exit0", "exit", seed)
    lo, hi = latency_range
    for i, a in enumerate(relays):
        for b in relays[i + 1 :]:
            if rng.random() < density:
                topo.add_link(a, b, rng.randint(lo, hi), both=True)
        if rng.random() < density:
            topo.add_link("entry0", a, rng.randint(lo, hi), both=True)
        if rng.random() < density:
            topo.add_link(a, "exit0", rng.randint(lo, hi), both=True)
    return topo


def enumerate_paths(topo: Topology, entry: str, exits: Sequence[str], n_relays: int,
                    usable: set[str], cap: int = PATH_ENUMERATION_CAP) -> Iterator[PathSpec]:
    """Simple paths ``entry -> n_relays relays -> exit`` over *usable* relays, in sorted order."""
    exit_set = set(exits)
    count = 0

    def walk(prefix: list[str]):
        nonlocal count
        last = prefix[-1]
        if len(prefix) - 1 == n_relays:
            for x in topo.successors(last):
                if x in exit_set:
                    count += 1
                    yield PathSpec(entry, tuple(prefix[1:]), x)
            return
        for nxt in topo.successors(last):
            if nxt in usable and nxt not in prefix:
                yield from walk(prefix + [nxt])
                if count >= cap:
                    return

    for p in walk([entry]):
        yield p
        if count >= cap:
            return


def find_disjoint(paths: Sequence[PathSpec], k: int, forbidden: frozenset[str] = frozenset()
                  ) -> list[PathSpec] | None:
    """First *k* pairwise relay-disjoint paths in *paths* order (backtracking), or None."""
    chosen: list[PathSpec] = []
    dead: set[tuple[int, frozenset[str], int]] = set()  # states already shown to fail

    def search(start: int, used: frozenset[str]) -> bool:
        if len(chosen) == k:
            return True
        state = (start, used, len(chosen))
        if state in dead:
            return False
        for i in range(start, len(paths)):
            if len(paths) - i < k - len(chosen):
                return False
            p = paths[i]
            rs = set(p.relays)
            if rs & used:
                continue
            chosen.append(p)
            if search(i + 1, used | rs):
                return True
            chosen.pop()
        dead.add(state)
        return False

    return list(chosen) if search(0, frozenset(forbidden)) else None


def max_path_len(topo: Topology) -> int:
    return min(MAX_PATH_LEN, len(topo.relays))


def max_disjoint_paths(topo: Topology, entry: str, usable: set[str]) -> int:
    """Upper bound on relay-disjoint entry->exit paths (max-flow, ignores length)."""
    exits = frozenset(topo.exits)
    return _max_flow(entry, frozenset(usable), exits, frozenset(topo.links))


@functools.lru_cache(maxsize=256)
def _max_flow(entry: str, usable: frozenset[str], exits: frozenset[str],
              links: frozenset[tuple[str, str]]) -> int:
    import networkx as nx

    g = nx.DiGraph()
    sink = ("sink",)
    for r in usable:
        g.add_edge((r, "in"), (r, "out"), capacity=1)
    for (a, b) in links:
        src = entry if a == entry else ((a, "out") if a in usable else None)
        if src is None:
            continue
        if b in usable:
            g.add_edge(src, (b, "in"))
        elif b in exits and a != entry:
            g.add_edge(src, sink)
    if entry not in g or sink not in g:
        return 0
    return int(nx.maximum_flow_value(g, entry, sink))
