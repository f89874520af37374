"""Workload and scenario generators.

Each branch writes only inside its own primary-key range, which is the
independence precondition replication relies on: no two origins ever touch
the same row, so per-origin in-order replay converges without merging.
"""

from __future__ import annotations

import random

from qsync.topology import generate_topology

SCHEMA = "CREATE TABLE acct (id INT, owner TEXT, balance INT)"
KEY_SPAN = 1_000_000


def branch_key_base(index: int) -> int:
    return index * KEY_SPAN


def generate_statements(owner: str, key_base: int, count: int, rng: random.Random) -> list[str]:
    """``count`` statements for one branch, the first being the schema."""
    out = [SCHEMA]
    live: list[int] = []
    next_key = key_base
    while len(out) < count:
        r = rng.random()
        if not live or r < 0.5:
            out.append(f"INSERT INTO acct VALUES ({next_key}, '{owner}-{next_key}', {rng.randint(0, 10_000)})")
            live.append(next_key)
            next_key += 1
        elif r < 0.85:
            key = rng.choice(live)
            if rng.random() < 0.5:
                out.append(f"UPDATE acct SET balance = {rng.randint(-500, 50_000)} WHERE id = {key}")
            else:
                out.append(
                    f"UPDATE acct SET owner = '{owner} o''{rng.randint(0, 99)}', "
                    f"balance = {rng.randint(0, 9)} WHERE id = {key}"
                )
        else:
            key = live.pop(rng.randrange(len(live)))
            out.append(f"DELETE FROM acct WHERE id = {key}")
    return out


def acceptance_scenario(
    n_branches: int = 5,
    stmts_per_branch: int = 200,
    seed: int = 0,
    *,
    spacing_ms: int = 150,
    loss: float = 0.05,
    dup: float = 0.05,
    outage_every_ms: int = 8000,
    outage_ms: int = 3000,
) -> tuple[str, str]:
    """(topology text, scenario text) for the faulty multi-branch workload."""
    rng = random.Random(f"workload:{seed}")
    topo = generate_topology(n_branches)
    branches = [f"B{i}" for i in range(1, n_branches + 1)]
    lines = ["# generated convergence scenario"]
    for b in branches:
        lines.append(f"at 0 link {b} C loss {loss}")
        lines.append(f"at 0 link {b} C dup {dup}")
        lines.append(f"at 0 link {b} C reorder on")
    end = stmts_per_branch * spacing_ms + 1000
    for i, b in enumerate(branches):
        t = 1000 + i * 1500
        while t < end:
            lines.append(f"at {t} link {b} C offline")
            lines.append(f"at {t + outage_ms} link {b} C online")
            t += outage_every_ms
    for i, b in enumerate(branches, start=1):
        stmts = generate_statements(b, branch_key_base(i), stmts_per_branch, rng)
        for j, sql in enumerate(stmts):
            lines.append(f"at {j * spacing_ms + i * 7} client {b} exec {sql}")
    return topo, "\n".join(lines) + "\n"
