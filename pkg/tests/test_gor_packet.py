import json
import random
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from petes import crypto_core as cc
from petes.gor_packet import (
    LAYER_STEP,
    MAX_PATH_LEN,
    Chunk,
    Clove,
    DigestMismatch,
    Forward,
    GarlicBulb,
    IncompleteMessage,
    OnionPacket,
    PacketError,
    PathSpec,
    PeelError,
    Terminal,
    build_onion,
    bulb_capacity,
    bundle,
    chunk_message,
    peel,
    reassemble,
    unbundle,
)

GOLDEN = json.loads((Path(__file__).parent / "vectors" / "onion.json").read_text())
KEYS = {f"n{i}": cc.keygen(cc.hash(b"gor/%d" % i)) for i in range(MAX_PATH_LEN + 2)}
PUB = {k: v.public_key for k, v in KEYS.items()}


def make_path(n_relays: int) -> PathSpec:
    return PathSpec("entry", tuple(f"n{i}" for i in range(n_relays)), f"n{n_relays}")


def walk(pkt: OnionPacket, path: PathSpec):
    """Peel along *path*; returns (intermediate cells, terminal bulb)."""
    cells = []
    for hop in path.hops:
        out = peel(pkt, KEYS[hop].secret_key)
        if isinstance(out, Terminal):
            assert hop == path.exit
            return cells, out.bulb
        assert out.next_hop == path.hops[path.hops.index(hop) + 1]
        pkt = out.packet
        cells.append(pkt.data)
    raise AssertionError("no terminal layer")


# -- chunks ------------------------------------------------------------------


@given(st.binary(min_size=1, max_size=2000), st.integers(1, 16))
def test_chunk_reassemble_roundtrip(msg, n):
    n = min(n, len(msg))
    chunks = chunk_message(msg, n)
    assert len(chunks) == n
    assert sum(c.length for c in chunks) == len(msg)
    assert max(c.length for c in chunks) - min(c.length for c in chunks) <= 1
    random.Random(len(msg)).shuffle(chunks)
    assert reassemble(chunks) == msg


def test_chunk_sizes_front_loaded():
    assert [c.length for c in chunk_message(b"abcdefghij", 3)] == [4, 3, 3]


def test_chunk_bytes_roundtrip():
    c = chunk_message(b"hello world", 2)[1]
    assert Chunk.from_bytes(c.to_bytes()) == c


def test_chunk_invalid_n():
    with pytest.raises(PacketError):
        chunk_message(b"ab", 3)
    with pytest.raises(PacketError):
        chunk_message(b"ab", 0)


def test_reassemble_reports_missing_indices():
    chunks = chunk_message(b"0123456789", 4)
    with pytest.raises(IncompleteMessage) as ei:
        reassemble([chunks[0], chunks[2]])
    assert ei.value.missing == [1, 3]


def test_reassemble_detects_tampering():
    chunks = chunk_message(b"0123456789", 2)
    bad = Chunk(chunks[1].message_id, 1, 2, chunks[1].length, b"XXXXX")
    with pytest.raises(DigestMismatch):
        reassemble([chunks[0], bad])


def test_reassemble_rejects_conflicting_duplicates():
    chunks = chunk_message(b"0123456789", 2)
    bad = Chunk(chunks[1].message_id, 1, 2, chunks[1].length, b"XXXXX")
    with pytest.raises(PacketError):
        reassemble([chunks[0], chunks[1], bad])


def test_reassemble_tolerates_identical_duplicates():
    chunks = chunk_message(b"0123456789", 2)
    assert reassemble(chunks + chunks[:1]) == b"0123456789"


# -- garlic ------------------------------------------------------------------

cloves = st.builds(
    Clove,
    st.text(alphabet="abcdefghij0123456789@", min_size=1, max_size=32),
    st.integers(0, 2**32 - 1),
    st.binary(min_size=1, max_size=100),
    st.integers(0, 2**40),
)


@given(st.lists(cloves, min_size=1, max_size=8))
def test_bulb_roundtrip_preserves_order(cs):
    bulb = bundle(cs)
    assert unbundle(bulb.to_bytes()) == cs
    assert GarlicBulb.from_bytes(bulb.to_bytes()) == bulb


def test_empty_bulb_rejected():
    with pytest.raises(PacketError):
        bundle([])


def test_bulb_trailing_bytes_rejected():
    raw = bundle([Clove("x", 0, b"p")]).to_bytes()
    with pytest.raises(PacketError):
        GarlicBulb.from_bytes(raw + b"\x00")


def test_clove_id_too_long():
    with pytest.raises(PacketError):
        Clove("x" * 33, 0, b"p").to_bytes()


# -- onions ------------------------------------------------------------------


@given(st.integers(0, 5), st.binary(min_size=1, max_size=600), st.sampled_from([1024, 2048]))
def test_onion_roundtrip(n_relays, payload, cell):
    path = make_path(n_relays)
    bulb = bundle([Clove(path.exit, 1, payload)])
    pkt = build_onion(bulb, path, PUB, cell)
    assert len(pkt.data) == cell
    cells, got = walk(pkt, path)
    assert got == bulb
    assert all(len(c) == cell for c in cells)


def test_golden_onion():
    path = PathSpec(GOLDEN["path"]["entry"], tuple(GOLDEN["path"]["relays"]), GOLDEN["path"]["exit"])
    keys = {n: cc.derive_public(bytes.fromhex(s)) for n, s in GOLDEN["node_secrets"].items()}
    bulb = GarlicBulb.from_bytes(bytes.fromhex(GOLDEN["bulb"]))
    pkt = build_onion(bulb, path, keys, GOLDEN["cell_size"], bytes.fromhex(GOLDEN["build_seed"]))
    assert pkt.data.hex() == GOLDEN["packet"]
    data = pkt
    for hop in path.hops:
        out = peel(data, bytes.fromhex(GOLDEN["node_secrets"][hop]))
        if isinstance(out, Forward):
            data = out.packet
    assert out.bulb == bulb


def test_deterministic_with_seed():
    path = make_path(3)
    bulb = bundle([Clove(path.exit, 0, b"m")])
    a = build_onion(bulb, path, PUB, seed=b"\x01" * 32)
    assert a == build_onion(bulb, path, PUB, seed=b"\x01" * 32)
    assert a != build_onion(bulb, path, PUB, seed=b"\x02" * 32)


def test_wrong_key_and_tamper_same_error():
    path = make_path(2)
    pkt = build_onion(bundle([Clove(path.exit, 0, b"m")]), path, PUB)
    with pytest.raises(PeelError) as wrong:
        peel(pkt, KEYS["n5"].secret_key)
    raw = bytearray(pkt.data)
    raw[100] ^= 1
    with pytest.raises(PeelError) as tampered:
        peel(bytes(raw), KEYS["n0"].secret_key)
    assert str(wrong.value) == str(tampered.value)


def test_peel_is_pure_on_replay():
    path = make_path(1)
    pkt = build_onion(bundle([Clove(path.exit, 0, b"m")]), path, PUB)
    assert peel(pkt, KEYS["n0"].secret_key) == peel(pkt, KEYS["n0"].secret_key)


def test_capacity_boundary():
    path = make_path(2)
    cap = bulb_capacity(len(path.hops))
    overhead = len(bundle([Clove(path.exit, 0, b"x")]).to_bytes()) - 1
    fits = bundle([Clove(path.exit, 0, b"x" * (cap - overhead))])
    assert len(fits.to_bytes()) == cap
    _, got = walk(build_onion(fits, path, PUB), path)
    assert got == fits
    with pytest.raises(PacketError):
        build_onion(bundle([Clove(path.exit, 0, b"x" * (cap - overhead + 1))]), path, PUB)


def test_capacity_shrinks_by_layer_step():
    assert bulb_capacity(3) - bulb_capacity(4) == LAYER_STEP


def test_missing_key():
    with pytest.raises(PacketError):
        build_onion(bundle([Clove("n1", 0, b"m")]), make_path(1), {"n0": PUB["n0"]})


def test_path_rejects_repeats_and_length():
    with pytest.raises(PacketError):
        PathSpec("e", ("a", "a"), "x")
    with pytest.raises(PacketError):
        PathSpec("e", tuple(f"r{i}" for i in range(MAX_PATH_LEN + 1)), "x")


def test_max_length_path():
    path = make_path(MAX_PATH_LEN)
    bulb = bundle([Clove(path.exit, 0, b"deep")])
    _, got = walk(build_onion(bulb, path, PUB), path)
    assert got == bulb


def test_relay_cannot_learn_position_from_length():
    path = make_path(4)
    pkt = build_onion(bundle([Clove(path.exit, 0, b"m")]), path, PUB)
    cells, _ = walk(pkt, path)
    assert {len(c) for c in cells} == {len(pkt.data)}
