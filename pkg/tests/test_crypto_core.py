import hashlib
import json
from pathlib import Path

import pytest
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from hypothesis import given
from hypothesis import strategies as st

from petes import crypto_core as cc

VECTORS = json.loads((Path(__file__).parent / "vectors" / "crypto.json").read_text())
EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"

seeds = st.binary(min_size=32, max_size=32)
messages = st.binary(min_size=1, max_size=512)


def _reference_open(box: bytes, secret: bytes) -> bytes:
    """Independent decoder for the sealed-box layout, straight from primitives."""
    eph, nonce, body = box[:32], box[32:44], box[44:]
    priv = X25519PrivateKey.from_private_bytes(secret)
    shared = priv.exchange(X25519PublicKey.from_public_bytes(eph))
    me = priv.public_key().public_bytes_raw()
    key = HKDF(hashes.SHA256(), 32, eph + me, b"petes/seal").derive(shared)
    return ChaCha20Poly1305(key).decrypt(nonce, body, eph)


def test_hash_of_empty_string():
    assert cc.hash(b"").hex() == EMPTY_SHA256


@pytest.mark.parametrize("v", VECTORS["hash"])
def test_hash_vectors(v):
    data = bytes.fromhex(v["input"])
    assert cc.hash(data).hex() == v["digest"] == hashlib.sha256(data).hexdigest()


@pytest.mark.parametrize("v", VECTORS["keygen"])
def test_keygen_vectors(v):
    kp = cc.keygen(bytes.fromhex(v["seed"]))
    assert kp.public_key.hex() == v["public_key"]
    assert kp.secret_key.hex() == v["secret_key"]
    assert kp.verify_key.hex() == v["verify_key"]
    assert cc.address_of(kp.verify_key).hex() == v["address"]
    assert cc.derive_public(kp.secret_key) == kp.public_key


@pytest.mark.parametrize("v", VECTORS["seal"])
def test_seal_vectors(v):
    kp = cc.keygen(bytes.fromhex(v["recipient_seed"]))
    msg = bytes.fromhex(v["plaintext"])
    box = cc.seal(msg, kp.public_key, bytes.fromhex(v["ephemeral_seed"])).to_bytes()
    assert box.hex() == v["box"]
    assert cc.open(box, kp.secret_key) == msg
    assert _reference_open(box, kp.secret_key) == msg


@given(seeds, messages)
def test_seal_open_roundtrip(seed, msg):
    kp = cc.keygen(seed)
    box = cc.seal(msg, kp.public_key)
    assert len(box.to_bytes()) == len(msg) + cc.SEAL_OVERHEAD
    assert cc.open(box, kp.secret_key) == msg
    assert cc.open(box.to_bytes(), kp.secret_key) == msg


@given(seeds, seeds, messages)
def test_wrong_key_fails(a, b, msg):
    if a == b:
        return
    box = cc.seal(msg, cc.keygen(a).public_key)
    with pytest.raises(cc.AuthenticationError):
        cc.open(box, cc.keygen(b).secret_key)


@given(seeds, messages, st.data())
def test_any_bit_flip_fails(seed, msg, data):
    kp = cc.keygen(seed)
    raw = bytearray(cc.seal(msg, kp.public_key).to_bytes())
    i = data.draw(st.integers(0, len(raw) - 1))
    raw[i] ^= 1 << data.draw(st.integers(0, 7))
    with pytest.raises(cc.AuthenticationError):
        cc.open(bytes(raw), kp.secret_key)


def test_fresh_ephemeral_per_call():
    kp = cc.keygen(bytes(32))
    a, b = cc.seal(b"same", kp.public_key), cc.seal(b"same", kp.public_key)
    assert a.ephemeral_public != b.ephemeral_public
    assert a.to_bytes() != b.to_bytes()


def test_truncated_box_rejected():
    kp = cc.keygen(bytes(32))
    with pytest.raises(cc.AuthenticationError):
        cc.open(b"\x00" * (cc.SEAL_OVERHEAD - 1), kp.secret_key)


@pytest.mark.parametrize("bad", [b"", b"\x01" * 31, b"\x01" * 33])
def test_keygen_rejects_bad_seed(bad):
    with pytest.raises(cc.KeyFormatError):
        cc.keygen(bad)


def test_seal_rejects_bad_recipient():
    with pytest.raises(cc.KeyFormatError):
        cc.seal(b"m", b"\x01" * 31)


@given(seeds, st.binary(max_size=256))
def test_sign_verify(seed, msg):
    kp = cc.keygen(seed)
    sig = cc.sign(msg, kp)
    assert cc.verify(msg, sig, kp.verify_key)
    assert not cc.verify(msg + b"!", sig, kp.verify_key)
    other = cc.keygen(cc.hash(seed))
    assert not cc.verify(msg, sig, other.verify_key)


def test_signature_accepts_raw_bytes_and_signing_key():
    kp = cc.keygen(b"\x07" * 32)
    sig = cc.sign(b"m", kp.signing_key)
    assert cc.verify(b"m", sig.bytes, kp.verify_key)
    assert not cc.verify(b"m", b"\x00" * 10, kp.verify_key)
