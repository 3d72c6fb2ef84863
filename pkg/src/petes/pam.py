"""Privacy Assurance Module.

PAM owns the privacy policy and a private store (audit records, pseudonym
reverse map, pooled sender deposits).  The store never leaves this object:
nothing in it is written to ledgers, traces or exported files.

Policy file format: one ``key = value`` per line, ``#`` starts a comment::

    n_paths = 2
    min_relays_per_path = 2
    cell_size = 2048
    recorded_fields = amount, asset
    pseudonymize = true
    untrusted_action = strip_fields      # or quarantine
    linkability_threshold = 0.5
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field, replace
from typing import Mapping

from . import crypto_core
from .chain_core import TX_FIELDS, Ledger, LedgerError, SmartContract, Transaction
from .gor_packet import DEFAULT_CELL_SIZE, MAX_PATH_LEN, Chunk, PacketError, PathSpec
from .gor_packet import chunk_message, reassemble
from .topology import Topology, enumerate_paths, find_disjoint, max_disjoint_paths

ROUTING_FIELDS = frozenset({"tx_id"})
UNTRUSTED_ACTIONS = ("quarantine", "strip_fields")


class PolicyError(ValueError):
    pass


class PolicyUnsatisfiable(PolicyError):
    pass


class InsufficientRelays(PolicyError):
    pass


@dataclass(frozen=True)
class Policy:
    n_paths: int = 1
    min_relays_per_path: int = 2
    cell_size: int = DEFAULT_CELL_SIZE
    recorded_fields: frozenset[str] = frozenset({"amount", "asset"})
    pseudonymize: bool = True
    untrusted_action: str = "strip_fields"
    linkability_threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "recorded_fields", frozenset(self.recorded_fields))
        if self.n_paths < 1:
            raise PolicyError("n_paths must be >= 1")
        if not 1 <= self.min_relays_per_path <= MAX_PATH_LEN:
            raise PolicyError(f"min_relays_per_path must be in 1..{MAX_PATH_LEN}")
        if self.cell_size < 512:
            raise PolicyError("cell_size must be >= 512")
        unknown = self.recorded_fields - TX_FIELDS
        if unknown:
            raise PolicyError(f"unknown transaction fields {sorted(unknown)}")
        if self.pseudonymize and "payload" in self.recorded_fields:
            raise PolicyError("payload cannot be recorded when pseudonymize is on")
        if self.untrusted_action not in UNTRUSTED_ACTIONS:
            raise PolicyError(f"untrusted_action must be one of {UNTRUSTED_ACTIONS}")
        if not 0.0 <= self.linkability_threshold <= 1.0:
            raise PolicyError("linkability_threshold must be in [0, 1]")

    def to_text(self) -> str:
        return "".join(
            [
                f"n_paths = {self.n_paths}\n",
                f"min_relays_per_path = {self.min_relays_per_path}\n",
                f"cell_size = {self.cell_size}\n",
                f"recorded_fields = {', '.join(sorted(self.recorded_fields))}\n",
                f"pseudonymize = {str(self.pseudonymize).lower()}\n",
                f"untrusted_action = {self.untrusted_action}\n",
                f"linkability_threshold = {self.linkability_threshold}\n",
            ]
        )


def _parse_bool(v: str) -> bool:
    low = v.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


_POLICY_KEYS = {
    "n_paths": int,
    "min_relays_per_path": int,
    "cell_size": int,
    "recorded_fields": lambda v: frozenset(f.strip() for f in v.split(",") if f.strip()),
    "pseudonymize": _parse_bool,
    "untrusted_action": str,
    "linkability_threshold": float,
}


def parse_policy(text: str, source: str = "<policy>") -> Policy:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise PolicyError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _POLICY_KEYS:
            raise PolicyError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise PolicyError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _POLICY_KEYS[key](value)
        except ValueError as exc:
            raise PolicyError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    try:
        return Policy(**values)
    except PolicyError as exc:
        raise PolicyError(f"{source}: {exc}") from None


def load_policy(path) -> Policy:
    with open(path, encoding="utf-8") as fh:
        return parse_policy(fh.read(), str(path))


@dataclass(frozen=True)
class PolicyDecision:
    paths: tuple[PathSpec, ...]
    session_nonce: bytes

    @property
    def n_chunks(self) -> int:
        return len(self.paths)

    def chunk_plan(self, message: bytes) -> list[Chunk]:
        """Chunk ``i`` travels ``paths[i]``."""
        return chunk_message(message, len(self.paths))


@dataclass
class AuditRecord:
    tx_id: bytes
    recorded: dict[str, object]
    pseudonym_map: dict[bytes, bytes] = field(default_factory=dict)


def _field_value(tx: Transaction, name: str):
    v = tx.tx_id if name == "tx_id" else getattr(tx, name)
    if name == "signature":
        return v.bytes.hex() if v is not None else ""
    if isinstance(v, bytes):
        return v.hex()
    return v


def record_fields(policy: Policy, tx: Transaction) -> AuditRecord:
    recorded = {name: _field_value(tx, name) for name in sorted(policy.recorded_fields)}
    return AuditRecord(tx.tx_id, recorded)


def hide_identity(tx: Transaction, session_nonce: bytes) -> tuple[Transaction, tuple[bytes, bytes]]:
    """Replace the sender with ``hash(sender || nonce)`` and drop the signature."""
    pseudonym = crypto_core.hash(tx.sender + session_nonce)
    hidden = replace(tx, sender=pseudonym, signature=None, pseudonymized=True)
    return hidden, (pseudonym, tx.sender)


def check_contract(policy: Policy, sc: SmartContract) -> bool:
    """True when *sc* may relay under *policy*."""
    if not sc.routable or not sc.relay_public_key:
        return False
    return sc.allowed_fields <= (policy.recorded_fields | ROUTING_FIELDS)


def modify_contract(policy: Policy, sc: SmartContract) -> SmartContract:
    if check_contract(policy, sc):
        return replace(sc, trusted=True)
    if policy.untrusted_action == "quarantine":
        return replace(sc, trusted=False, routable=False)
    stripped = replace(sc, allowed_fields=sc.allowed_fields & (policy.recorded_fields | ROUTING_FIELDS),
                       trusted=False)
    return replace(stripped, trusted=check_contract(policy, stripped))


def vet_contracts(policy: Policy, topology: Topology) -> list[SmartContract]:
    """Check every contract, modify the untrusted ones in place; returns the modified."""
    changed = []
    for cid, sc in sorted(topology.contracts.items()):
        trusted = check_contract(policy, sc)
        if trusted and sc.trusted:
            continue
        new = modify_contract(policy, sc) if not trusted else replace(sc, trusted=True)
        topology.contracts[cid] = new
        changed.append(new)
    return changed


def _decision_rng(seed: int | bytes, tx: Transaction, policy: Policy) -> tuple[random.Random, bytes]:
    seed_bytes = seed if isinstance(seed, bytes) else struct.pack("<q", seed)
    material = crypto_core.hash(b"petes/decision/" + seed_bytes + tx.tx_id + policy.to_text().encode())
    return random.Random(material), crypto_core.hash(b"petes/nonce/" + material)


def evaluate(policy: Policy, tx: Transaction, topology: Topology, seed: int | bytes = 0,
             entry: str | None = None) -> PolicyDecision:
    """Pick ``n_paths`` relay-disjoint paths entry -> exit.

    Path lengths are tried from ``min_relays_per_path`` upwards; for each
    length all simple paths are enumerated, shuffled with the decision seed
    and searched (with backtracking) for a disjoint set.
    """
    topology.validate()
    rng, nonce = _decision_rng(seed, tx, policy)
    entry = entry if entry is not None else topology.entries[0]
    usable = topology.routable_relays()
    k, lo = policy.n_paths, policy.min_relays_per_path
    bound = max_disjoint_paths(topology, entry, usable)
    if k <= bound:
        for length in range(lo, min(MAX_PATH_LEN, len(usable)) + 1):
            if k * length > len(usable):
                break
            paths = list(enumerate_paths(topology, entry, topology.exits, length, usable))
            rng.shuffle(paths)
            found = find_disjoint(paths, k)
            if found is not None:
                return PolicyDecision(tuple(found), nonce)
    raise PolicyUnsatisfiable(
        f"policy unsatisfiable: need {k} disjoint paths of >= {lo} relays from {entry}"
    )


HopKey = tuple[int, int]


def allocate_relays(topology: Topology, decision: PolicyDecision,
                    allow_reuse: bool = False) -> dict[HopKey, SmartContract]:
    """Bind hop ``(path index, relay index)`` to the trusted contract hosted there."""
    out: dict[HopKey, SmartContract] = {}
    used: set[bytes] = set()
    for pi, path in enumerate(decision.paths):
        for hi, relay in enumerate(path.relays):
            sc = topology.contract_of(relay)
            if sc is None or not (sc.trusted and sc.routable and sc.relay_public_key):
                raise InsufficientRelays(f"no trusted contract on relay {relay!r}")
            if sc.contract_id in used and not allow_reuse:
                raise InsufficientRelays(f"contract on {relay!r} already allocated")
            used.add(sc.contract_id)
            out[(pi, hi)] = sc
    return out


def path_keys(topology: Topology, decision: PolicyDecision,
              allocation: Mapping[HopKey, SmartContract]) -> list[dict[str, bytes]]:
    """Per-path node id -> layer key map (relay keys come from their contracts)."""
    keys = []
    for pi, path in enumerate(decision.paths):
        k = {r: allocation[(pi, hi)].relay_public_key for hi, r in enumerate(path.relays)}
        k[path.exit] = topology.nodes[path.exit].public_key
        keys.append(k)
    return keys


def update_policy(policy: Policy, measured_linkability: float, max_paths: int,
                  max_relays: int = MAX_PATH_LEN) -> Policy:
    """Escalate path count and length by one when linkability exceeds the threshold."""
    if measured_linkability <= policy.linkability_threshold:
        return policy
    return replace(
        policy,
        n_paths=max(policy.n_paths, min(policy.n_paths + 1, max_paths)),
        min_relays_per_path=max(policy.min_relays_per_path,
                                min(policy.min_relays_per_path + 1, max_relays, MAX_PATH_LEN)),
    )


def topology_limits(topology: Topology) -> tuple[int, int]:
    """(max n_paths, max relays per path) the escalation rule may reach."""
    relays = topology.routable_relays()
    entry = topology.entries[0]
    return max(1, max_disjoint_paths(topology, entry, relays)), max(1, min(MAX_PATH_LEN, len(relays)))


class PAM:
    """Single logical PAM actor with its private store.

    Pseudonymized transactions are debited from the PAM pool account on the
    core ledger (the ledger's custodian) and re-signed by PAM; each real
    sender's share of the pool is tracked only in :attr:`deposits`.
    """

    def __init__(self, policy: Policy, keypair: crypto_core.KeyPair):
        self.policy = policy
        self.keypair = keypair
        self.audit: dict[bytes, AuditRecord] = {}
        self.deposits: dict[bytes, int] = {}
        self.broadcast_ids: set[bytes] = set()
        self.pending: dict[bytes, dict[int, Chunk]] = {}
        self.broadcasts: list[Transaction] = []
        self.suppressed = 0

    @property
    def pool_address(self) -> bytes:
        return crypto_core.address_of(self.keypair.verify_key)

    def deposit(self, address: bytes, amount: int) -> None:
        self.deposits[address] = self.deposits.get(address, 0) + amount

    def prepare(self, tx: Transaction, decision: PolicyDecision) -> Transaction:
        """Record fields, pseudonymize (per policy) and return the final transaction."""
        record = record_fields(self.policy, tx)
        if not self.policy.pseudonymize:
            self.audit[tx.tx_id] = record
            return tx
        if self.deposits.get(tx.sender, 0) < tx.amount:
            raise LedgerError("sender deposit with PAM does not cover the amount")
        hidden, (pseudonym, real) = hide_identity(tx, decision.session_nonce)
        final = hidden.signed(self.keypair)
        self.deposits[real] = self.deposits.get(real, 0) - tx.amount
        record.pseudonym_map[pseudonym] = real
        self.audit[tx.tx_id] = record
        return final

    def receive_chunk(self, chunk: Chunk, core: Ledger) -> Transaction | None:
        """Collect a chunk handed over by an exit; broadcast once the message is whole."""
        if chunk.message_id in self.broadcast_ids:
            self.suppressed += 1
            return None
        parts = self.pending.setdefault(chunk.message_id, {})
        parts[chunk.index] = chunk
        if len(parts) < chunk.total:
            return None
        try:
            message = reassemble(list(parts.values()))
        except PacketError:
            return None
        del self.pending[chunk.message_id]
        return self.broadcast_final(core, message)

    def broadcast_final(self, core: Ledger, message: bytes) -> Transaction | None:
        """Submit the reassembled transaction to the core mempool, once per message_id."""
        mid = crypto_core.hash(message)
        if mid in self.broadcast_ids:
            self.suppressed += 1
            return None
        tx = Transaction.from_bytes(message)
        core.submit(tx)
        self.broadcast_ids.add(mid)
        self.broadcasts.append(tx)
        return tx
