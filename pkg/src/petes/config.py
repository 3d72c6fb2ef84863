"""Scenario file parser.

Plain text, one statement per line, ``#`` comments.  Settings are
``key = value``; everything else is a directive::

    seed = 7
    policy = policy.txt            # resolved relative to this file
    acks = on
    packet_loss = 0.0
    crash_sidechain_at = 12        # tick at which every overlay node dies
    peg_float = 0

    mesh relays=4 entries=1 exits=1 latency=1
    node r9 relay fields=tx_id,amount
    link r9 exit0 2 both

    user alice 100 entry=entry0
    user bob 0
    tx 0 alice bob 10 COIN hello      # time sender receiver amount [asset] [payload]

A payload written ``hex:...`` is decoded from hex.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

from .relay_sim import Scenario, TxRequest, make_user
from .topology import Topology, TopologyError, full_mesh, line


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioFile:
    scenario: Scenario
    policy_path: str | None


_SETTINGS = ("seed", "policy", "acks", "packet_loss", "crash_sidechain_at", "peg_float")


def _kv(tokens: list[str]) -> dict[str, str]:
    out = {}
    for t in tokens:
        if "=" not in t:
            raise ValueError(f"expected key=value, got {t!r}")
        k, v = t.split("=", 1)
        out[k] = v
    return out


def _bool(v: str) -> bool:
    if v.lower() in ("on", "true", "yes", "1"):
        return True
    if v.lower() in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def parse_scenario(text: str, source: str = "<scenario>", base_dir: str = ".",
                   seed: int | None = None) -> ScenarioFile:
    """Parse scenario *text*; a *seed* overrides the file's ``seed`` setting."""
    settings: dict[str, object] = {}
    gen: tuple[int, str, dict[str, str]] | None = None
    user_lines: list[tuple[int, list[str]]] = []
    tx_lines: list[tuple[int, list[str]]] = []
    pending: list[tuple[int, str, list[str]]] = []

    for lineno, raw in enumerate(text.splitlines(), 1):
        line_ = raw.split("#", 1)[0].strip()
        if not line_:
            continue
        where = f"{source}:{lineno}"
        try:
            if "=" in line_ and line_.split()[0] in _SETTINGS:
                key, _, value = (p.strip() for p in line_.partition("="))
                if key in settings:
                    raise ValueError(f"duplicate setting {key!r}")
                if key == "seed":
                    settings[key] = int(value)
                elif key == "policy":
                    settings[key] = os.path.join(base_dir, value)
                elif key == "acks":
                    settings[key] = _bool(value)
                elif key == "packet_loss":
                    p = float(value)
                    if not 0.0 <= p <= 1.0:
                        raise ValueError("packet_loss must be in [0, 1]")
                    settings[key] = p
                else:
                    settings[key] = int(value)
                continue
            word, *rest = line_.split()
            if word in ("mesh", "line"):
                if gen is not None:
                    raise ValueError("topology generator given twice")
                opts = _kv(rest)
                allowed = {"relays", "entries", "exits", "latency"} if word == "mesh" else {"relays", "latency"}
                if set(opts) - allowed:
                    raise ValueError(f"unknown options {sorted(set(opts) - allowed)}")
                gen = (lineno, word, {k: int(v) for k, v in opts.items()})
            elif word in ("node", "link"):
                pending.append((lineno, word, rest))
            elif word == "user":
                user_lines.append((lineno, rest))
            elif word == "tx":
                tx_lines.append((lineno, rest))
            else:
                raise ValueError(f"unknown statement {word!r}")
        except (ValueError, TopologyError) as exc:
            raise ConfigError(f"{where}: {exc}") from None

    if seed is None:
        seed = int(settings.get("seed", 0))
    seed_bytes = struct.pack("<q", seed)
    topo = Topology()
    if gen is not None:
        lineno, word, opts = gen
        try:
            if word == "mesh":
                topo = full_mesh(opts.get("relays", 4), opts.get("entries", 1),
                                 opts.get("exits", 1), opts.get("latency", 1), seed_bytes)
            else:
                topo = line(opts.get("relays", 3), opts.get("latency", 1), seed_bytes)
        except TopologyError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    for lineno, word, rest in pending:
        try:
            if word == "node":
                if len(rest) < 2:
                    raise ValueError("node needs <id> <role>")
                opts = _kv(rest[2:])
                fields = [f for f in opts.pop("fields", "tx_id").split(",") if f]
                if opts:
                    raise ValueError(f"unknown options {sorted(opts)}")
                topo.add_node(rest[0], rest[1], seed_bytes, fields)
            else:
                if len(rest) < 3 or len(rest) > 4 or (len(rest) == 4 and rest[3] != "both"):
                    raise ValueError("link needs <from> <to> <latency> [both]")
                topo.add_link(rest[0], rest[1], int(rest[2]), both=len(rest) == 4)
        except (ValueError, TopologyError) as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None

    users = {}
    for lineno, rest in user_lines:
        try:
            if len(rest) < 2:
                raise ValueError("user needs <label> <balance>")
            opts = _kv(rest[2:])
            entry = opts.pop("entry", None)
            if opts:
                raise ValueError(f"unknown options {sorted(opts)}")
            if entry is not None and (entry not in topo.nodes or topo.nodes[entry].role != "entry"):
                raise ValueError(f"{entry!r} is not an entry node")
            if rest[0] in users:
                raise ValueError(f"duplicate user {rest[0]!r}")
            users[rest[0]] = make_user(rest[0], int(rest[1]), seed_bytes, entry)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None

    txs = []
    for lineno, rest in tx_lines:
        try:
            if not 4 <= len(rest) <= 6:
                raise ValueError("tx needs <time> <sender> <receiver> <amount> [asset] [payload]")
            time, sender, receiver, amount = int(rest[0]), rest[1], rest[2], int(rest[3])
            for who in (sender, receiver):
                if who not in users:
                    raise ValueError(f"unknown user {who!r}")
            asset = rest[4] if len(rest) > 4 else "COIN"
            payload = rest[5] if len(rest) > 5 else "payload"
            data = bytes.fromhex(payload[4:]) if payload.startswith("hex:") else payload.encode()
            txs.append(TxRequest(time, sender, receiver, amount, asset, data))
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None

    try:
        topo.validate()
    except TopologyError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    sc = Scenario(
        topology=topo,
        users=users,
        txs=txs,
        seed=seed,
        acks=bool(settings.get("acks", False)),
        packet_loss=float(settings.get("packet_loss", 0.0)),
        crash_sidechain_at=settings.get("crash_sidechain_at"),
        peg_float=int(settings.get("peg_float", 0)),
        policy_path=settings.get("policy"),
    )
    return ScenarioFile(sc, sc.policy_path)


def load_scenario(path, seed: int | None = None) -> ScenarioFile:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_scenario(text, str(path), os.path.dirname(os.path.abspath(path)), seed)
