"""Append-only account-model ledgers for the core chain and the sidechain.

One sequencer per ledger, no consensus.  Balances are always the
deterministic replay of the block list; :meth:`Ledger.replay` recomputes
them from genesis and :func:`validate_chain` compares.

Canonical transaction encoding (little-endian), hashed for ``tx_id`` and
signed by the sender::

    kind u8 | sender 32 | receiver 32 | amount u64 | asset_len u8 | asset
    | nonce u64 | pseudonymized u8 | payload_len u32 | payload

The wire form appends ``sig_len u8 | signature``.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable

from . import crypto_core
from .crypto_core import DIGEST_SIZE, Signature

ZERO_DIGEST = bytes(DIGEST_SIZE)
PEG_VAULT = crypto_core.hash(b"petes/peg-vault")

TX_FIELDS = frozenset(
    {"tx_id", "sender", "receiver", "amount", "asset", "payload", "signature", "pseudonymized"}
)


class LedgerError(Exception):
    pass


class InvalidSignature(LedgerError):
    pass


class InsufficientFunds(LedgerError):
    pass


class DuplicateTransaction(LedgerError):
    pass


class TxKind(enum.IntEnum):
    GENESIS = 0
    TRANSFER = 1
    LOCK = 2
    MINT = 3
    BURN = 4
    RELEASE = 5


@dataclass(frozen=True)
class Transaction:
    sender: bytes
    receiver: bytes
    amount: int
    asset: str = "COIN"
    payload: bytes = b""
    kind: TxKind = TxKind.TRANSFER
    nonce: int = 0
    pseudonymized: bool = False
    signature: Signature | None = None

    def __post_init__(self):
        if self.amount < 0:
            raise LedgerError("amount must be non-negative")
        if len(self.sender) != DIGEST_SIZE or len(self.receiver) != DIGEST_SIZE:
            raise LedgerError("addresses must be 32 bytes")
        if not 0 < len(self.asset.encode()) <= 16:
            raise LedgerError("asset tag must be 1..16 bytes")

    def canonical(self) -> bytes:
        asset = self.asset.encode()
        return (
            struct.pack("<B", self.kind)
            + self.sender
            + self.receiver
            + struct.pack("<QB", self.amount, len(asset))
            + asset
            + struct.pack("<QBI", self.nonce, self.pseudonymized, len(self.payload))
            + self.payload
        )

    @property
    def tx_id(self) -> bytes:
        return crypto_core.hash(self.canonical())

    def signed(self, key: crypto_core.KeyPair) -> Transaction:
        return replace(self, signature=crypto_core.sign(self.canonical(), key))

    def to_bytes(self) -> bytes:
        sig = self.signature.bytes if self.signature else b""
        return self.canonical() + struct.pack("<B", len(sig)) + sig

    @classmethod
    def from_bytes(cls, data: bytes) -> Transaction:
        try:
            kind = TxKind(data[0])
            sender, receiver = bytes(data[1:33]), bytes(data[33:65])
            amount, alen = struct.unpack_from("<QB", data, 65)
            pos = 74
            asset = bytes(data[pos : pos + alen]).decode()
            pos += alen
            nonce, pseud, plen = struct.unpack_from("<QBI", data, pos)
            pos += 13
            payload = bytes(data[pos : pos + plen])
            pos += plen
            (slen,) = struct.unpack_from("<B", data, pos)
            sig = bytes(data[pos + 1 : pos + 1 + slen])
        except (IndexError, ValueError, struct.error) as exc:
            raise LedgerError("malformed transaction") from exc
        if len(payload) != plen or len(sig) != slen or pos + 1 + slen != len(data):
            raise LedgerError("malformed transaction")
        return cls(sender, receiver, amount, asset, payload, kind, nonce, bool(pseud),
                   Signature(sig) if sig else None)

    def to_dict(self) -> dict:
        return {
            "tx_id": self.tx_id.hex(),
            "kind": self.kind.name.lower(),
            "sender": self.sender.hex(),
            "receiver": self.receiver.hex(),
            "amount": self.amount,
            "asset": self.asset,
            "nonce": self.nonce,
            "pseudonymized": self.pseudonymized,
            "payload": self.payload.hex(),
            "signature": self.signature.bytes.hex() if self.signature else "",
        }

    @classmethod
    def from_dict(cls, d: dict) -> Transaction:
        sig = bytes.fromhex(d["signature"])
        return cls(
            sender=bytes.fromhex(d["sender"]),
            receiver=bytes.fromhex(d["receiver"]),
            amount=int(d["amount"]),
            asset=d["asset"],
            payload=bytes.fromhex(d["payload"]),
            kind=TxKind[d["kind"].upper()],
            nonce=int(d["nonce"]),
            pseudonymized=bool(d["pseudonymized"]),
            signature=Signature(sig) if sig else None,
        )


def tx_root(txs: Iterable[Transaction]) -> bytes:
    return crypto_core.hash(b"".join(tx.tx_id for tx in txs))


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    tx_root: bytes
    timestamp: int
    txs: tuple[Transaction, ...] = ()
    accounts: tuple[bytes, ...] = ()  # verify keys registered in this block

    @property
    def hash(self) -> bytes:
        return crypto_core.hash(
            struct.pack("<Q", self.height)
            + self.prev_hash
            + self.tx_root
            + struct.pack("<Q", self.timestamp)
            + crypto_core.hash(b"".join(self.accounts))
        )

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "prev_hash": self.prev_hash.hex(),
            "tx_root": self.tx_root.hex(),
            "timestamp": self.timestamp,
            "accounts": [a.hex() for a in self.accounts],
            "txs": [tx.to_dict() for tx in self.txs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Block:
        return cls(
            height=int(d["height"]),
            prev_hash=bytes.fromhex(d["prev_hash"]),
            tx_root=bytes.fromhex(d["tx_root"]),
            timestamp=int(d["timestamp"]),
            txs=tuple(Transaction.from_dict(t) for t in d["txs"]),
            accounts=tuple(bytes.fromhex(a) for a in d["accounts"]),
        )


@dataclass
class SmartContract:
    """Declarative GOR relay descriptor hosted on a sidechain relay node."""

    contract_id: bytes
    relay_public_key: bytes | None
    allowed_fields: frozenset[str]
    trusted: bool = True
    routable: bool = True

    def __post_init__(self):
        self.allowed_fields = frozenset(self.allowed_fields)
        unknown = self.allowed_fields - TX_FIELDS
        if unknown:
            raise LedgerError(f"unknown transaction fields {sorted(unknown)}")
        if self.trusted and not self.relay_public_key:
            raise LedgerError("a trusted contract must expose a relay key")

    def to_bytes(self) -> bytes:
        return json.dumps(
            {
                "contract_id": self.contract_id.hex(),
                "relay_public_key": self.relay_public_key.hex() if self.relay_public_key else "",
                "allowed_fields": sorted(self.allowed_fields),
                "trusted": self.trusted,
                "routable": self.routable,
            },
            sort_keys=True,
        ).encode()


@dataclass(frozen=True)
class Violation:
    height: int
    kind: str
    message: str

    def __bool__(self) -> bool:  # a violation is a falsy validation result
        return False

    def __str__(self) -> str:
        return f"block {self.height}: {self.kind}: {self.message}"


class _Ok:
    def __bool__(self) -> bool:
        return True

    def __repr__(self) -> str:
        return "OK"

    __str__ = __repr__


OK = _Ok()


class _State:
    """Replayable ledger state: balances, peg vault, registry, consumed proofs."""

    def __init__(self, chain_id: str, custodian: bytes | None):
        self.chain_id = chain_id
        self.custodian = custodian
        self.balances: dict[bytes, int] = {}
        self.locked: dict[bytes, int] = {}
        self.keys: dict[bytes, bytes] = {}
        self.consumed: set[bytes] = set()
        self.seen: set[bytes] = set()
        if custodian is not None:
            self.keys[crypto_core.address_of(custodian)] = custodian

    def debit_account(self, tx: Transaction) -> bytes:
        if tx.pseudonymized:
            if self.custodian is None:
                raise InvalidSignature("ledger accepts no pseudonymized transactions")
            return crypto_core.address_of(self.custodian)
        return tx.sender

    def check_signature(self, tx: Transaction) -> None:
        if tx.kind in (TxKind.GENESIS, TxKind.MINT, TxKind.RELEASE):
            return
        payer = self.debit_account(tx)
        vk = self.custodian if tx.pseudonymized else self.keys.get(payer)
        if vk is None or tx.signature is None:
            raise InvalidSignature("unknown sender or missing signature")
        if not crypto_core.verify(tx.canonical(), tx.signature, vk):
            raise InvalidSignature("signature does not verify")

    def apply(self, tx: Transaction) -> None:
        amt = tx.amount
        if tx.kind == TxKind.GENESIS:
            self.balances[tx.receiver] = self.balances.get(tx.receiver, 0) + amt
        elif tx.kind in (TxKind.TRANSFER, TxKind.LOCK, TxKind.BURN):
            payer = self.debit_account(tx)
            if self.balances.get(payer, 0) < amt:
                raise InsufficientFunds(f"balance {self.balances.get(payer, 0)} < {amt}")
            self.balances[payer] = self.balances.get(payer, 0) - amt
            if tx.kind == TxKind.TRANSFER:
                self.balances[tx.receiver] = self.balances.get(tx.receiver, 0) + amt
            elif tx.kind == TxKind.LOCK:
                self.locked[PEG_VAULT] = self.locked.get(PEG_VAULT, 0) + amt
        elif tx.kind == TxKind.MINT:
            self._consume(tx)
            self.balances[tx.receiver] = self.balances.get(tx.receiver, 0) + amt
        elif tx.kind == TxKind.RELEASE:
            self._consume(tx)
            if self.locked.get(PEG_VAULT, 0) < amt:
                raise InsufficientFunds("release exceeds locked value")
            self.locked[PEG_VAULT] -= amt
            self.balances[tx.receiver] = self.balances.get(tx.receiver, 0) + amt
        self.seen.add(tx.tx_id)

    def _consume(self, tx: Transaction) -> None:
        ref = crypto_core.hash(tx.payload)
        if ref in self.consumed:
            raise DuplicateTransaction("peg proof already consumed")
        self.consumed.add(ref)


class Ledger:
    """Single-writer ledger.  ``chain_id`` is ``"core"`` or ``"side"``."""

    def __init__(
        self,
        chain_id: str,
        genesis: dict[bytes, int] | None = None,
        accounts: Iterable[bytes] = (),
        custodian: bytes | None = None,
        timestamp: int = 0,
    ):
        if chain_id not in ("core", "side"):
            raise LedgerError(f"chain_id must be 'core' or 'side', not {chain_id!r}")
        self.chain_id = chain_id
        self.custodian = custodian
        self.mempool: list[Transaction] = []
        self.blocks: list[Block] = []
        self._state = _State(chain_id, custodian)
        txs = tuple(
            Transaction(ZERO_DIGEST, addr, amt, kind=TxKind.GENESIS, nonce=i)
            for i, (addr, amt) in enumerate(sorted((genesis or {}).items()))
        )
        accounts = tuple(accounts)
        blk = Block(0, ZERO_DIGEST, tx_root(txs), timestamp, txs, accounts)
        self._append(blk)

    # state views
    @property
    def balances(self) -> dict[bytes, int]:
        return self._state.balances

    @property
    def locked(self) -> dict[bytes, int]:
        return self._state.locked

    @property
    def keys(self) -> dict[bytes, bytes]:
        return self._state.keys

    @property
    def consumed(self) -> set[bytes]:
        return self._state.consumed

    @property
    def height(self) -> int:
        return self.blocks[-1].height

    def total_free(self) -> int:
        return sum(self.balances.values())

    def total_locked(self) -> int:
        return sum(self.locked.values())

    def balance(self, address: bytes) -> int:
        return self.balances.get(address, 0)

    def find_tx(self, tx_id: bytes) -> tuple[Block, Transaction] | None:
        for blk in self.blocks:
            for tx in blk.txs:
                if tx.tx_id == tx_id:
                    return blk, tx
        return None

    def register(self, verify_key: bytes) -> bytes:
        """Queue a signing key for registration in the next block; returns its address."""
        addr = crypto_core.address_of(verify_key)
        self._pending_accounts.append(verify_key)
        self._state.keys.setdefault(addr, verify_key)
        return addr

    def _append(self, blk: Block) -> None:
        for vk in blk.accounts:
            self._state.keys[crypto_core.address_of(vk)] = vk
        for tx in blk.txs:
            self._state.apply(tx)
        self.blocks.append(blk)
        self._pending_accounts: list[bytes] = []

    def submit(self, tx: Transaction, authorized: bool = False) -> Transaction:
        """Queue *tx* in the mempool after signature, funds and duplicate checks.

        Mint and release transactions are only accepted with ``authorized``
        (the peg verifier's path).
        """
        st = self._state
        tid = tx.tx_id
        if tid in st.seen or any(m.tx_id == tid for m in self.mempool):
            raise DuplicateTransaction(f"tx {tid.hex()[:16]} already known")
        if tx.kind == TxKind.GENESIS:
            raise LedgerError("genesis transactions only appear in block 0")
        if tx.kind in (TxKind.MINT, TxKind.RELEASE) and not authorized:
            raise InvalidSignature("peg transactions need the peg verifier")
        st.check_signature(tx)
        if tx.kind in (TxKind.TRANSFER, TxKind.LOCK, TxKind.BURN):
            payer = st.debit_account(tx)
            pending = sum(
                m.amount for m in self.mempool
                if m.kind in (TxKind.TRANSFER, TxKind.LOCK, TxKind.BURN)
                and st.debit_account(m) == payer
            )
            if st.balances.get(payer, 0) < pending + tx.amount:
                raise InsufficientFunds(
                    f"balance {st.balances.get(payer, 0)} < {pending + tx.amount}"
                )
        self.mempool.append(tx)
        return tx

    def seal_block(self, time: int) -> Block:
        """Move the whole mempool into a new block; empty blocks are allowed."""
        txs = tuple(self.mempool)
        parent = self.blocks[-1]
        blk = Block(parent.height + 1, parent.hash, tx_root(txs), time, txs,
                    tuple(self._pending_accounts))
        # apply into a scratch replay first so a bad tx cannot half-update balances
        scratch = _State(self.chain_id, self.custodian)
        scratch.balances = dict(self._state.balances)
        scratch.locked = dict(self._state.locked)
        scratch.keys = dict(self._state.keys)
        scratch.consumed = set(self._state.consumed)
        scratch.seen = set(self._state.seen)
        for tx in txs:
            scratch.apply(tx)
        self._state = scratch
        self.blocks.append(blk)
        self._pending_accounts = []
        self.mempool = []
        return blk

    @classmethod
    def replay(cls, chain_id: str, blocks: list[Block], custodian: bytes | None = None) -> _State:
        st = _State(chain_id, custodian)
        for blk in blocks:
            for vk in blk.accounts:
                st.keys[crypto_core.address_of(vk)] = vk
            for tx in blk.txs:
                st.apply(tx)
        return st

    # -- export / import -------------------------------------------------

    def export_lines(self) -> list[str]:
        lines = []
        for blk in self.blocks:
            d = blk.to_dict()
            if blk.height == 0:
                d["chain_id"] = self.chain_id
                d["custodian"] = self.custodian.hex() if self.custodian else ""
            lines.append(json.dumps(d, sort_keys=True))
        return lines

    def export(self) -> str:
        return "\n".join(self.export_lines()) + "\n"

    @classmethod
    def from_export(cls, text: str) -> Ledger:
        """Rebuild a ledger from NDJSON.  Structure is not validated here; call
        :func:`validate_chain` on the result."""
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not records:
            raise LedgerError("empty ledger export")
        head = records[0]
        custodian = bytes.fromhex(head.get("custodian", "")) or None
        led = cls.__new__(cls)
        led.chain_id = head.get("chain_id", "core")
        led.custodian = custodian
        led.mempool = []
        led._pending_accounts = []
        led.blocks = [Block.from_dict(r) for r in records]
        try:
            led._state = cls.replay(led.chain_id, led.blocks, custodian)
        except LedgerError:
            led._state = _State(led.chain_id, custodian)
        return led


def submit_transaction(ledger: Ledger, tx: Transaction) -> Ledger:
    ledger.submit(tx)
    return ledger


def seal_block(ledger: Ledger, time: int) -> Block:
    return ledger.seal_block(time)


def validate_chain(ledger: Ledger) -> _Ok | Violation:
    """First structural or accounting violation in *ledger*, or ``OK``."""
    blocks = ledger.blocks
    if not blocks:
        return Violation(0, "empty", "ledger has no genesis block")
    st = _State(ledger.chain_id, ledger.custodian)
    prev = None
    for pos, blk in enumerate(blocks):
        if prev is None:
            if blk.height != 0 or blk.prev_hash != ZERO_DIGEST:
                return Violation(blk.height, "genesis", "genesis must be height 0 with zero prev_hash")
        else:
            if blk.prev_hash != prev.hash:
                return Violation(blk.height, "prev_hash", f"block at position {pos} does not link to its parent")
            if blk.height != prev.height + 1:
                return Violation(blk.height, "height", f"expected height {prev.height + 1}")
        if tx_root(blk.txs) != blk.tx_root:
            return Violation(blk.height, "tx_root", "tx_root does not match transactions")
        for vk in blk.accounts:
            st.keys[crypto_core.address_of(vk)] = vk
        for tx in blk.txs:
            if (tx.kind == TxKind.GENESIS) != (blk.height == 0):
                return Violation(blk.height, "genesis", "genesis transaction outside block 0")
            if tx.tx_id in st.seen:
                return Violation(blk.height, "duplicate", f"tx {tx.tx_id.hex()[:16]} appears twice")
            try:
                st.check_signature(tx)
                st.apply(tx)
            except InsufficientFunds as exc:
                return Violation(blk.height, "negative_balance", str(exc))
            except LedgerError as exc:
                return Violation(blk.height, "transaction", str(exc))
        prev = blk
    if st.balances != {k: v for k, v in ledger.balances.items()} or st.locked != ledger.locked:
        return Violation(prev.height, "balances", "stored balances differ from replay")
    return OK
