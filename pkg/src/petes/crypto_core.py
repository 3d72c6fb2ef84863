"""Elliptic-curve primitives shared by every GOR layer and ledger transaction.

Sealing is ECIES-style: an ephemeral X25519 key agreement feeds HKDF-SHA256,
which derives a ChaCha20-Poly1305 key and nonce.  Signatures are Ed25519.
Both keys of a :class:`KeyPair` are derived from one 32-byte seed.

Sealed-box wire layout (all sizes in bytes)::

    ephemeral_public (32) | nonce (12) | ciphertext (len(plaintext)) | tag (16)

so ``len(seal(m).to_bytes()) == len(m) + SEAL_OVERHEAD`` with
``SEAL_OVERHEAD == 60``.
"""

from __future__ import annotations

import builtins
import functools
import hashlib
import os
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

SEED_SIZE = 32
KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16
SEAL_OVERHEAD = KEY_SIZE + NONCE_SIZE + TAG_SIZE
DIGEST_SIZE = 32

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw
_RAW_PRIV = serialization.PrivateFormat.Raw
_NO_ENC = serialization.NoEncryption()


class CryptoError(Exception):
    """Base class for crypto failures."""


class AuthenticationError(CryptoError):
    """A sealed box failed to authenticate (wrong key, tampering, truncation)."""


class KeyFormatError(CryptoError, ValueError):
    """A key or seed has the wrong encoding or length."""


def hash(data: bytes) -> bytes:  # noqa: A001 - domain name, shadows builtin on purpose
    """SHA-256 digest of *data*."""
    return hashlib.sha256(data).digest()


def _tagged(tag: bytes, data: bytes) -> bytes:
    return hashlib.sha256(tag + b"\x00" + data).digest()


@dataclass(frozen=True)
class KeyPair:
    """X25519 sealing key plus Ed25519 signing key derived from one seed.

    ``public_key``/``secret_key`` are the X25519 pair used for sealed boxes;
    ``verify_key``/``signing_key`` are the Ed25519 pair used for signatures.
    """

    public_key: bytes
    secret_key: bytes
    verify_key: bytes
    signing_key: bytes

    def __hash__(self) -> int:  # the generated one would call this module's hash()
        return builtins.hash((self.public_key, self.verify_key))

    def __repr__(self) -> str:
        return f"KeyPair(public_key={self.public_key.hex()[:16]}...)"


def keygen(seed: bytes) -> KeyPair:
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != SEED_SIZE:
        raise KeyFormatError(f"seed must be exactly {SEED_SIZE} bytes")
    return _keygen(bytes(seed))


@functools.lru_cache(maxsize=4096)  # pure; simulations re-derive the same node keys per run
def _keygen(seed: bytes) -> KeyPair:
    x_secret = _tagged(b"petes/x25519", seed)
    ed_secret = _tagged(b"petes/ed25519", seed)
    x_priv = X25519PrivateKey.from_private_bytes(x_secret)
    ed_priv = Ed25519PrivateKey.from_private_bytes(ed_secret)
    return KeyPair(
        public_key=x_priv.public_key().public_bytes(_RAW, _RAW_PUB),
        secret_key=x_priv.private_bytes(_RAW, _RAW_PRIV, _NO_ENC),
        verify_key=ed_priv.public_key().public_bytes(_RAW, _RAW_PUB),
        signing_key=ed_secret,
    )


def derive_public(secret_key: bytes) -> bytes:
    """X25519 public key for *secret_key*."""
    if len(secret_key) != KEY_SIZE:
        raise KeyFormatError("secret key must be 32 bytes")
    priv = X25519PrivateKey.from_private_bytes(secret_key)
    return priv.public_key().public_bytes(_RAW, _RAW_PUB)


def address_of(verify_key: bytes) -> bytes:
    """Ledger address: the digest of a signing public key."""
    return hash(verify_key)


@dataclass(frozen=True)
class SealedBox:
    ephemeral_public: bytes
    nonce: bytes
    ciphertext: bytes
    auth_tag: bytes

    def __hash__(self) -> int:
        return builtins.hash(self.to_bytes())

    def to_bytes(self) -> bytes:
        return self.ephemeral_public + self.nonce + self.ciphertext + self.auth_tag

    @classmethod
    def from_bytes(cls, data: bytes) -> SealedBox:
        if len(data) < SEAL_OVERHEAD:
            raise AuthenticationError("sealed box shorter than fixed overhead")
        return cls(
            ephemeral_public=bytes(data[:KEY_SIZE]),
            nonce=bytes(data[KEY_SIZE : KEY_SIZE + NONCE_SIZE]),
            ciphertext=bytes(data[KEY_SIZE + NONCE_SIZE : -TAG_SIZE]),
            auth_tag=bytes(data[-TAG_SIZE:]),
        )

    def __len__(self) -> int:
        return SEAL_OVERHEAD + len(self.ciphertext)


def _load_public(public_key: bytes) -> X25519PublicKey:
    if not isinstance(public_key, (bytes, bytearray)) or len(public_key) != KEY_SIZE:
        raise KeyFormatError("X25519 public key must be 32 bytes")
    return X25519PublicKey.from_public_bytes(bytes(public_key))


def _kdf(shared: bytes, eph_pub: bytes, recipient: bytes, length: int, info: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=length, salt=eph_pub + recipient, info=info
    ).derive(shared)


class _Opener:
    """Key agreement done once, so callers can authenticate several candidate
    ciphertext lengths against the same ephemeral key (see gor_packet)."""

    __slots__ = ("shared", "eph_pub", "recipient", "aead")

    def __init__(self, eph_pub: bytes, secret_key: bytes):
        if len(secret_key) != KEY_SIZE:
            raise KeyFormatError("secret key must be 32 bytes")
        priv = X25519PrivateKey.from_private_bytes(secret_key)
        try:
            shared = priv.exchange(_load_public(eph_pub))
        except ValueError as exc:  # all-zero shared secret from a low-order point
            raise AuthenticationError("invalid ephemeral key") from exc
        self.shared = shared
        self.eph_pub = eph_pub
        self.recipient = priv.public_key().public_bytes(_RAW, _RAW_PUB)
        okm = _kdf(shared, eph_pub, self.recipient, KEY_SIZE, b"petes/seal")
        self.aead = ChaCha20Poly1305(okm)

    def open(self, nonce: bytes, ct_and_tag: bytes) -> bytes:
        try:
            return self.aead.decrypt(nonce, ct_and_tag, self.eph_pub)
        except InvalidTag as exc:
            raise AuthenticationError("sealed box failed to authenticate") from exc

    def stream(self, length: int) -> bytes:
        """Pseudo-random bytes bound to this shared secret (keyed filler)."""
        return _kdf(self.shared, self.eph_pub, self.recipient, length, b"petes/filler")


def seal(plaintext: bytes, recipient: bytes, ephemeral_seed: bytes | None = None) -> SealedBox:
    """Encrypt *plaintext* to the X25519 public key *recipient*.

    A fresh ephemeral key is drawn per call.  Passing *ephemeral_seed*
    (32 bytes) makes the output a pure function of the inputs, which the
    simulator and the golden test vectors rely on.
    """
    if not plaintext:
        raise ValueError("plaintext must be non-empty")
    peer = _load_public(recipient)
    if ephemeral_seed is None:
        ephemeral_seed = os.urandom(SEED_SIZE)
    elif len(ephemeral_seed) != SEED_SIZE:
        raise KeyFormatError(f"ephemeral seed must be {SEED_SIZE} bytes")
    eph = X25519PrivateKey.from_private_bytes(_tagged(b"petes/ephemeral", ephemeral_seed))
    eph_pub = eph.public_key().public_bytes(_RAW, _RAW_PUB)
    try:
        shared = eph.exchange(peer)
    except ValueError as exc:
        raise KeyFormatError("recipient key is a low-order point") from exc
    okm = _kdf(shared, eph_pub, bytes(recipient), KEY_SIZE, b"petes/seal")
    nonce = _kdf(shared, eph_pub, bytes(recipient), NONCE_SIZE, b"petes/nonce")
    sealed = ChaCha20Poly1305(okm).encrypt(nonce, bytes(plaintext), eph_pub)
    return SealedBox(eph_pub, nonce, sealed[:-TAG_SIZE], sealed[-TAG_SIZE:])


def open(box: SealedBox | bytes, secret: bytes) -> bytes:  # noqa: A001
    """Decrypt a sealed box; raises :class:`AuthenticationError` on any mismatch."""
    if not isinstance(box, SealedBox):
        box = SealedBox.from_bytes(box)
    if len(box.ephemeral_public) != KEY_SIZE or len(box.nonce) != NONCE_SIZE:
        raise AuthenticationError("malformed sealed box")
    if len(box.auth_tag) != TAG_SIZE:
        raise AuthenticationError("malformed sealed box")
    opener = _Opener(box.ephemeral_public, secret)
    return opener.open(box.nonce, box.ciphertext + box.auth_tag)


@dataclass(frozen=True)
class Signature:
    bytes: bytes

    def __hash__(self) -> int:
        return builtins.hash(self.bytes)


def sign(message: bytes, secret: bytes | KeyPair) -> Signature:
    """Ed25519 signature; *secret* is a KeyPair or its ``signing_key``."""
    if isinstance(secret, KeyPair):
        secret = secret.signing_key
    priv = Ed25519PrivateKey.from_private_bytes(secret)
    return Signature(priv.sign(message))


def verify(message: bytes, sig: Signature | bytes, public: bytes) -> bool:
    raw = sig.bytes if isinstance(sig, Signature) else sig
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(raw, message)
    except (InvalidSignature, ValueError):
        return False
    return True
