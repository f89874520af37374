import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from qsync.env import ManualEnv  # noqa: E402
from qsync.node import Node  # noqa: E402
from qsync.topology import load_topology  # noqa: E402
from qsync.wal import WAL  # noqa: E402

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

TRIO = """
[node] name=C role=CENTRAL cn=lan
[node] name=B1 role=BRANCH cn=lan
[node] name=B2 role=BRANCH cn=lan
[link] a=B1 b=C
[link] a=B2 b=C
"""


@pytest.fixture
def trio_topo():
    return load_topology(TRIO)


@pytest.fixture
def make_node(trio_topo):
    """Standalone node on a hand-cranked env (no transport)."""

    def make(name="B1", topo=None, wal=None, env=None, **kw):
        return Node(name, topo or trio_topo, wal or WAL(), env or ManualEnv(), **kw)

    return make


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
