"""Scenario builders shared by the test modules."""

from petes.relay_sim import Scenario, TxRequest, make_user
from petes.topology import full_mesh


def synchronized(m: int, n_relays: int = 4, seed: int = 0, acks: bool = False, **kw) -> Scenario:
    """*m* senders submitting at tick 0 to *m* distinct receivers over a full mesh."""
    topo = full_mesh(n_relays, seed=b"mesh")
    users = {}
    for i in range(m):
        users[f"s{i}"] = make_user(f"s{i}", 100, b"u")
        users[f"d{i}"] = make_user(f"d{i}", 0, b"u")
    txs = [TxRequest(0, f"s{i}", f"d{i}", 1 + i, "COIN", f"memo-{i}".encode()) for i in range(m)]
    return Scenario(topo, users, txs, seed=seed, acks=acks, **kw)


# criterion number -> (ok, detail); printed by the terminal summary hook in conftest
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def verdict(n: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[n] = (ok, detail)
    return ok
