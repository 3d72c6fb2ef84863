"""Two-way peg between the core ledger and the sidechain.

This is a trusted-verifier peg: a :class:`PegProof` is a digest commitment
to a sealed source transaction, checked directly against the source ledger.
It is valid at confirmation depth 1 and can be consumed at most once.

Text form, used to move a proof between ledgers (fields in this order,
colon-separated, hex where binary)::

    direction:source_tx:source_block:amount:beneficiary:proof_digest
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from . import crypto_core
from .chain_core import PEG_VAULT, Ledger, LedgerError, Transaction, TxKind

CORE_TO_SIDE = "core->side"
SIDE_TO_CORE = "side->core"


class PegError(LedgerError):
    pass


class InvalidProof(PegError):
    pass


class ProofReused(PegError):
    pass


@dataclass(frozen=True)
class PegProof:
    direction: str
    source_tx: bytes
    source_block: int
    amount: int
    beneficiary: bytes
    proof_digest: bytes

    def to_text(self) -> str:
        return ":".join(
            [
                self.direction,
                self.source_tx.hex(),
                str(self.source_block),
                str(self.amount),
                self.beneficiary.hex(),
                self.proof_digest.hex(),
            ]
        )

    @classmethod
    def from_text(cls, text: str) -> PegProof:
        parts = text.strip().split(":")
        if len(parts) != 6:
            raise InvalidProof("peg proof needs 6 fields")
        d, tx, blk, amt, ben, dig = parts
        try:
            return cls(d, bytes.fromhex(tx), int(blk), int(amt), bytes.fromhex(ben), bytes.fromhex(dig))
        except ValueError as exc:
            raise InvalidProof("malformed peg proof") from exc


def _digest(direction, source_tx, source_block, amount, beneficiary, block_hash) -> bytes:
    return crypto_core.hash(
        direction.encode()
        + source_tx
        + struct.pack("<QQ", source_block, amount)
        + beneficiary
        + block_hash
    )


def _issue(ledger: Ledger, tx: Transaction, direction: str) -> PegProof:
    found = ledger.find_tx(tx.tx_id)
    assert found is not None
    blk, _ = found
    return PegProof(
        direction, tx.tx_id, blk.height, tx.amount, tx.receiver,
        _digest(direction, tx.tx_id, blk.height, tx.amount, tx.receiver, blk.hash),
    )


def verify_proof(proof: PegProof, source: Ledger, direction: str) -> None:
    """Raise :class:`InvalidProof` unless *proof* commits to a sealed source tx."""
    if proof.direction != direction:
        raise InvalidProof(f"expected direction {direction}, got {proof.direction}")
    if proof.amount <= 0:
        raise InvalidProof("peg amount must be positive")
    if not 0 <= proof.source_block < len(source.blocks):
        raise InvalidProof("source block not found")
    blk = source.blocks[proof.source_block]
    want = _digest(direction, proof.source_tx, proof.source_block, proof.amount,
                   proof.beneficiary, blk.hash)
    if want != proof.proof_digest:
        raise InvalidProof("proof digest mismatch")
    kind = TxKind.LOCK if direction == CORE_TO_SIDE else TxKind.BURN
    for tx in blk.txs:
        if tx.tx_id == proof.source_tx:
            if tx.kind != kind or tx.amount != proof.amount or tx.receiver != proof.beneficiary:
                raise InvalidProof("source transaction does not match proof")
            return
    raise InvalidProof(f"no {kind.name.lower()} transaction {proof.source_tx.hex()[:16]}")


def _next_nonce(ledger: Ledger) -> int:
    return ledger.height + 1 + len(ledger.mempool)


def lock_on_core(core: Ledger, owner: crypto_core.KeyPair, amount: int, beneficiary: bytes,
                 time: int = 0) -> PegProof:
    """Move *amount* of *owner*'s free core balance into the peg vault."""
    if core.chain_id != "core":
        raise PegError("lock_on_core needs the core ledger")
    if amount <= 0:
        raise PegError("lock amount must be positive")
    sender = crypto_core.address_of(owner.verify_key)
    tx = Transaction(sender, beneficiary, amount, kind=TxKind.LOCK, nonce=_next_nonce(core)).signed(owner)
    core.submit(tx)
    core.seal_block(time)
    return _issue(core, tx, CORE_TO_SIDE)


def burn_on_side(side: Ledger, owner: crypto_core.KeyPair, amount: int, beneficiary: bytes,
                 time: int = 0) -> PegProof:
    if side.chain_id != "side":
        raise PegError("burn_on_side needs the side ledger")
    if amount <= 0:
        raise PegError("burn amount must be positive")
    sender = crypto_core.address_of(owner.verify_key)
    tx = Transaction(sender, beneficiary, amount, kind=TxKind.BURN, nonce=_next_nonce(side)).signed(owner)
    side.submit(tx)
    side.seal_block(time)
    return _issue(side, tx, SIDE_TO_CORE)


def _redeem(target: Ledger, proof: PegProof, kind: TxKind, time: int) -> Transaction:
    tx = Transaction(PEG_VAULT, proof.beneficiary, proof.amount, kind=kind,
                     payload=proof.to_text().encode())
    if crypto_core.hash(tx.payload) in target.consumed or any(
        m.payload == tx.payload for m in target.mempool
    ):
        raise ProofReused("peg proof already consumed")
    target.submit(tx, authorized=True)
    target.seal_block(time)
    return tx


def mint_on_side(side: Ledger, proof: PegProof, core: Ledger, time: int = 0) -> Transaction:
    verify_proof(proof, core, CORE_TO_SIDE)
    return _redeem(side, proof, TxKind.MINT, time)


def release_on_core(core: Ledger, proof: PegProof, side: Ledger, time: int = 0) -> Transaction:
    verify_proof(proof, side, SIDE_TO_CORE)
    return _redeem(core, proof, TxKind.RELEASE, time)

