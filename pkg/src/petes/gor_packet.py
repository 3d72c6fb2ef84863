"""Garlic-Onion-Routing packets: chunking, garlic bulbs and fixed-cell onions.

Wire formats (little-endian throughout)
---------------------------------------

Chunk::

    0   message_id   32 bytes   SHA-256 of the full message
    32  index        u32
    36  total        u32
    40  length       u32        == len(payload)
    44  payload      length bytes

Clove::

    0   dest_len     u8
    1   destination  dest_len bytes (utf-8 node id, 1..32 bytes)
    ..  clove_id     u32
    ..  sent_at      u64        simulation ticks
    ..  payload_len  u32
    ..  payload      payload_len bytes

GarlicBulb::

    0   count        u16        >= 1
    2   repeated ``count`` times: clove_len u32 | clove bytes

Onion layer plaintext (sealed with :func:`crypto_core.seal`)::

    0   kind         u8         1 = forward, 2 = terminal
    1   next_hop     32 bytes   utf-8 node id, zero padded (all zero if terminal)
    33  body_len     u32
    37  body         inner sealed box (forward) or bulb bytes (terminal)
    ..  zero fill    terminal layers only, up to the layer's plaintext size

Every packet on a link is exactly ``cell_size`` bytes.  The box for hop ``j``
(0-based) is ``cell_size - LAYER_STEP * j`` bytes long; the hop that peeled
layer ``j - 1`` appends keyed pseudo-random filler so the inner packet is
again ``cell_size`` bytes.  A hop does not know its position, so it tries the
at most ``MAX_HOPS`` candidate box lengths; only the true one authenticates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

from . import crypto_core
from .crypto_core import SEAL_OVERHEAD, AuthenticationError

DEFAULT_CELL_SIZE = 2048
MAX_PATH_LEN = 8  # relays per path
MAX_HOPS = MAX_PATH_LEN + 1  # relays plus the exit
NODE_ID_SIZE = 32
LAYER_HEADER = 1 + NODE_ID_SIZE + 4
LAYER_STEP = SEAL_OVERHEAD + LAYER_HEADER

_FORWARD = 1
_TERMINAL = 2
_CHUNK_HEAD = struct.Struct("<32sIII")


class PacketError(ValueError):
    """Malformed or inconsistent GOR structure."""


class IncompleteMessage(PacketError):
    def __init__(self, missing: Sequence[int]):
        self.missing = list(missing)
        super().__init__(f"incomplete message: missing chunk index {self.missing}")


class DigestMismatch(PacketError):
    pass


class PeelError(AuthenticationError):
    """Layer could not be removed: wrong key, tampering or bad padding."""


# -- chunks ----------------------------------------------------------------


@dataclass(frozen=True)
class Chunk:
    message_id: bytes
    index: int
    total: int
    length: int
    payload: bytes

    def __post_init__(self):
        if not 0 <= self.index < self.total:
            raise PacketError(f"chunk index {self.index} outside 0..{self.total - 1}")
        if self.length != len(self.payload):
            raise PacketError("chunk length field disagrees with payload")

    def to_bytes(self) -> bytes:
        return _CHUNK_HEAD.pack(self.message_id, self.index, self.total, self.length) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> Chunk:
        if len(data) < _CHUNK_HEAD.size:
            raise PacketError("truncated chunk")
        mid, index, total, length = _CHUNK_HEAD.unpack_from(data)
        payload = bytes(data[_CHUNK_HEAD.size :])
        if len(payload) != length:
            raise PacketError("truncated chunk")
        return cls(mid, index, total, length, payload)


def chunk_message(message: bytes, n: int) -> list[Chunk]:
    """Split *message* into *n* chunks; the first ``len % n`` carry one extra byte."""
    if n < 1:
        raise PacketError("n must be >= 1")
    if len(message) < n:
        raise PacketError(f"message of {len(message)} bytes cannot fill {n} chunks")
    q, r = divmod(len(message), n)
    mid = crypto_core.hash(message)
    chunks = []
    pos = 0
    for i in range(n):
        size = q + 1 if i < r else q
        part = bytes(message[pos : pos + size])
        chunks.append(Chunk(mid, i, n, size, part))
        pos += size
    return chunks


def reassemble(chunks: Sequence[Chunk]) -> bytes:
    if not chunks:
        raise PacketError("no chunks")
    mid, total = chunks[0].message_id, chunks[0].total
    parts: dict[int, bytes] = {}
    for c in chunks:
        if c.message_id != mid or c.total != total:
            raise PacketError("chunks belong to different messages")
        if c.index in parts and parts[c.index] != c.payload:
            raise PacketError(f"conflicting payloads for chunk index {c.index}")
        parts[c.index] = c.payload
    missing = [i for i in range(total) if i not in parts]
    if missing:
        raise IncompleteMessage(missing)
    message = b"".join(parts[i] for i in range(total))
    if crypto_core.hash(message) != mid:
        raise DigestMismatch("reassembled message does not match message_id")
    return message


# -- garlic ----------------------------------------------------------------


def _encode_id(node_id: str) -> bytes:
    raw = node_id.encode()
    if not 1 <= len(raw) <= NODE_ID_SIZE:
        raise PacketError(f"node id {node_id!r} must be 1..{NODE_ID_SIZE} utf-8 bytes")
    return raw


@dataclass(frozen=True)
class Clove:
    destination: str
    clove_id: int
    payload: bytes
    sent_at: int = 0

    def __post_init__(self):
        if not self.payload:
            raise PacketError("clove payload must be non-empty")
        if self.sent_at < 0:
            raise PacketError("sent_at must be >= 0")

    def to_bytes(self) -> bytes:
        dest = _encode_id(self.destination)
        return (
            struct.pack("<B", len(dest))
            + dest
            + struct.pack("<IQI", self.clove_id, self.sent_at, len(self.payload))
            + self.payload
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> Clove:
        try:
            (dlen,) = struct.unpack_from("<B", data, 0)
            dest = bytes(data[1 : 1 + dlen]).decode()
            clove_id, sent_at, plen = struct.unpack_from("<IQI", data, 1 + dlen)
        except (struct.error, UnicodeDecodeError) as exc:
            raise PacketError("malformed clove") from exc
        start = 1 + dlen + 16
        payload = bytes(data[start:])
        if dlen == 0 or len(dest.encode()) != dlen or len(payload) != plen:
            raise PacketError("malformed clove")
        return cls(dest, clove_id, payload, sent_at)


@dataclass(frozen=True)
class GarlicBulb:
    cloves: tuple[Clove, ...]

    def __post_init__(self):
        if not self.cloves:
            raise PacketError("a garlic bulb needs at least one clove")

    def to_bytes(self) -> bytes:
        out = [struct.pack("<H", len(self.cloves))]
        for c in self.cloves:
            raw = c.to_bytes()
            out.append(struct.pack("<I", len(raw)))
            out.append(raw)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> GarlicBulb:
        if len(data) < 2:
            raise PacketError("truncated bulb")
        (count,) = struct.unpack_from("<H", data, 0)
        pos = 2
        cloves = []
        for _ in range(count):
            if pos + 4 > len(data):
                raise PacketError("truncated bulb")
            (size,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + size > len(data):
                raise PacketError("truncated bulb")
            cloves.append(Clove.from_bytes(data[pos : pos + size]))
            pos += size
        if pos != len(data):
            raise PacketError("trailing bytes after bulb")
        return cls(tuple(cloves))


def bundle(cloves: Sequence[Clove]) -> GarlicBulb:
    return GarlicBulb(tuple(cloves))


def unbundle(bulb: GarlicBulb | bytes) -> list[Clove]:
    if not isinstance(bulb, GarlicBulb):
        bulb = GarlicBulb.from_bytes(bulb)
    return list(bulb.cloves)


# -- onions ----------------------------------------------------------------


@dataclass(frozen=True)
class PathSpec:
    """Entry node, ordered relays, exit.  The entry injects; relays and exit peel."""

    entry: str
    relays: tuple[str, ...]
    exit: str

    def __post_init__(self):
        object.__setattr__(self, "relays", tuple(self.relays))
        nodes = self.nodes
        if len(set(nodes)) != len(nodes):
            raise PacketError(f"path repeats a node: {nodes}")
        if len(self.relays) > MAX_PATH_LEN:
            raise PacketError(f"path longer than {MAX_PATH_LEN} relays")

    @property
    def nodes(self) -> tuple[str, ...]:
        return (self.entry, *self.relays, self.exit)

    @property
    def hops(self) -> tuple[str, ...]:
        """Nodes that remove a layer, in order."""
        return (*self.relays, self.exit)

    def to_dict(self) -> dict:
        return {"entry": self.entry, "relays": list(self.relays), "exit": self.exit}


@dataclass(frozen=True)
class OnionPacket:
    """An opaque ``cell_size``-byte cell.  The next hop is only learned by peeling."""

    data: bytes

    @property
    def cell_size(self) -> int:
        return len(self.data)

    def to_bytes(self) -> bytes:
        return self.data


@dataclass(frozen=True)
class Forward:
    next_hop: str
    packet: OnionPacket


@dataclass(frozen=True)
class Terminal:
    bulb: GarlicBulb


def bulb_capacity(n_hops: int, cell_size: int = DEFAULT_CELL_SIZE) -> int:
    """Largest serialized bulb that fits a path with *n_hops* peeling nodes."""
    return cell_size - LAYER_STEP * (n_hops - 1) - SEAL_OVERHEAD - LAYER_HEADER


def _layer_seed(seed: bytes | None, i: int) -> bytes | None:
    if seed is None:
        return None
    return crypto_core.hash(seed + struct.pack("<I", i))


def build_onion(
    bulb: GarlicBulb,
    path: PathSpec,
    keys: Mapping[str, bytes],
    cell_size: int = DEFAULT_CELL_SIZE,
    seed: bytes | None = None,
) -> OnionPacket:
    """Wrap *bulb* in one sealed layer per hop of *path*, innermost first.

    *keys* maps node id to X25519 public key.  *seed* makes every ephemeral
    key deterministic (test vectors, reproducible simulations).
    """
    hops = path.hops
    missing = [h for h in hops if h not in keys]
    if missing:
        raise PacketError(f"no public key for {missing}")
    raw = bulb.to_bytes()
    cap = bulb_capacity(len(hops), cell_size)
    if len(raw) > cap:
        raise PacketError(f"bulb of {len(raw)} bytes exceeds capacity {cap} for {len(hops)} hops")

    last = len(hops) - 1
    plain_size = cell_size - LAYER_STEP * last - SEAL_OVERHEAD
    plain = struct.pack("<B", _TERMINAL) + bytes(NODE_ID_SIZE) + struct.pack("<I", len(raw)) + raw
    plain += bytes(plain_size - len(plain))
    box = crypto_core.seal(plain, keys[hops[last]], _layer_seed(seed, last)).to_bytes()
    for j in range(last - 1, -1, -1):
        nxt = _encode_id(hops[j + 1]).ljust(NODE_ID_SIZE, b"\x00")
        plain = struct.pack("<B", _FORWARD) + nxt + struct.pack("<I", len(box)) + box
        box = crypto_core.seal(plain, keys[hops[j]], _layer_seed(seed, j)).to_bytes()
    assert len(box) == cell_size
    return OnionPacket(box)


def peel(packet: OnionPacket | bytes, secret: bytes) -> Forward | Terminal:
    """Remove one layer with *secret*.

    Wrong keys, tampering and malformed cells all raise :class:`PeelError`
    with the same message.  Peeling is pure: a replayed cell peels to the
    same result, so replay suppression belongs to the relay.
    """
    data = packet.data if isinstance(packet, OnionPacket) else bytes(packet)
    cell_size = len(data)
    if cell_size < LAYER_STEP:
        raise PeelError("layer failed to authenticate")
    try:
        opener = crypto_core._Opener(data[: crypto_core.KEY_SIZE], secret)
    except AuthenticationError:
        raise PeelError("layer failed to authenticate") from None
    nonce = data[crypto_core.KEY_SIZE : crypto_core.KEY_SIZE + crypto_core.NONCE_SIZE]
    body_start = crypto_core.KEY_SIZE + crypto_core.NONCE_SIZE
    plain = None
    for j in range(MAX_HOPS):
        box_len = cell_size - LAYER_STEP * j
        if box_len < LAYER_STEP:
            break
        try:
            plain = opener.open(nonce, data[body_start:box_len])
            break
        except AuthenticationError:
            continue
    if plain is None:
        raise PeelError("layer failed to authenticate")

    kind = plain[0]
    (body_len,) = struct.unpack_from("<I", plain, 1 + NODE_ID_SIZE)
    body = plain[LAYER_HEADER : LAYER_HEADER + body_len]
    if len(body) != body_len:
        raise PeelError("padding violation")
    if kind == _FORWARD:
        next_hop = plain[1 : 1 + NODE_ID_SIZE].rstrip(b"\x00").decode("utf-8", "replace")
        if LAYER_HEADER + body_len != len(plain) or not next_hop:
            raise PeelError("padding violation")
        filler = opener.stream(cell_size - body_len)
        return Forward(next_hop, OnionPacket(body + filler))
    if kind == _TERMINAL:
        if any(plain[1 : 1 + NODE_ID_SIZE]) or any(plain[LAYER_HEADER + body_len :]):
            raise PeelError("padding violation")
        try:
            return Terminal(GarlicBulb.from_bytes(body))
        except PacketError as exc:
            raise PeelError("padding violation") from exc
    raise PeelError("padding violation")
