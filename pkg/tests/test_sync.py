import pytest

from qsync.env import ManualEnv
from qsync.errors import NotQuiescent, SyncDecodeError
from qsync.frame import decode_frame
from qsync.message import Kind, LinkStatus, Message, MessageId, QueueRef
from qsync.node import Node
from qsync.sim import Simulator
from qsync.sql import parse_statement
from qsync.store import ApplyOutcome, DeadLetterReason, RecordStatus
from qsync.sync import (
    BATCH_SIZE,
    MAX_APPLY_ATTEMPTS,
    PermissionPolicy,
    SyncBody,
    applied_ids,
    check_permission,
    converged,
)
from qsync.topology import generate_topology, load_topology
from qsync.wal import WAL

FIVE = load_topology(generate_topology(5))


def deliver(node, body: bytes, seq=1, origin="C"):
    msg = Message(
        MessageId(origin, seq), Kind.SYNC, body, True, 0,
        QueueRef(node.node_id, "sync_in", True), (origin,),
    )
    node.queues.accept_incoming(msg)


def sync_body(*sqls, origin="C", start=1):
    return SyncBody(origin, tuple((start + i, s) for i, s in enumerate(sqls))).to_bytes()


@pytest.fixture
def b1(make_node):
    return make_node("B1")


# ------------------------------------------------------------------ body


def test_sync_body_canonical_bytes():
    body = SyncBody("B1", ((1, "DELETE FROM t"), (2, "INSERT INTO t VALUES ('é')")))
    raw = body.to_bytes()
    assert raw == (
        '{"origin":"B1","schema_version":1,"records":[{"id":1,"sql":"DELETE FROM t"},'
        '{"id":2,"sql":"INSERT INTO t VALUES (\'é\')"}]}'
    ).encode()
    assert SyncBody.from_bytes(raw) == body


@pytest.mark.parametrize(
    "raw",
    [
        b"\xff\xfe",
        b"[]",
        b'{"origin":"B1","records":[],"schema_version":1}',
        b'{"origin":"B1","schema_version":1,"records":[]}',
        b'{"origin":"B1","schema_version":9,"records":[{"id":1,"sql":"x"}]}',
        b'{"origin":"","schema_version":1,"records":[{"id":1,"sql":"x"}]}',
        b'{"origin":"B1","schema_version":1,"records":[{"id":true,"sql":"x"}]}',
        b'{"origin":"B1","schema_version":1,"records":[{"sql":"x","id":1}]}',
    ],
)
def test_sync_body_strict(raw):
    with pytest.raises(SyncDecodeError):
        SyncBody.from_bytes(raw)


# ------------------------------------------------------------- permission


def test_check_permission():
    insert = parse_statement("INSERT INTO ledger VALUES (1)")
    delete = parse_statement("DELETE FROM acct_1")
    assert check_permission(PermissionPolicy(), "B1", insert)
    assert not check_permission(PermissionPolicy.deny_kinds("DELETE"), "B1", delete)
    assert check_permission(PermissionPolicy.deny_kinds("DELETE"), "B1", insert)
    glob = PermissionPolicy.parse("allow * * acct_*\n")
    assert not check_permission(glob, "B1", insert)
    assert check_permission(glob, "B1", delete)
    per_origin = PermissionPolicy.parse("# only B2 may delete\nallow B2 delete *\nallow * INSERT *")
    assert check_permission(per_origin, "B2", delete)
    assert not check_permission(per_origin, "B1", delete)


def test_policy_parse_errors():
    with pytest.raises(ValueError):
        PermissionPolicy.parse("deny * * *")
    with pytest.raises(ValueError):
        PermissionPolicy.parse("allow * SELECT *")


# ---------------------------------------------------------------- receive


def test_apply_one_insert(b1):
    deliver(b1, sync_body("CREATE TABLE t (id INT)", "INSERT INTO t VALUES (1)"))
    rep = b1.engine.on_arrived()
    assert rep.applied == 2 and rep.messages == 1
    assert b1.store.rows("t") == [(1,)]
    assert [e.outcome for e in b1.store.applied] == [ApplyOutcome.APPLIED] * 2
    assert b1.queues.depth("sync_in") == 0
    # branches do not re-register what they apply
    assert b1.store.pending_records() == []


def test_permission_denied_skips(make_node):
    n = make_node("B1", policy=PermissionPolicy.deny_kinds("DELETE"))
    deliver(n, sync_body("CREATE TABLE t (id INT)", "INSERT INTO t VALUES (1)", "DELETE FROM t"))
    rep = n.engine.on_arrived()
    assert rep.skipped == 1
    assert n.store.rows("t") == [(1,)]
    assert n.store.applied[-1].outcome is ApplyOutcome.SKIPPED_PERMISSION


def test_malformed_body_dead_lettered_and_engine_continues(b1):
    deliver(b1, b"\x00not json", seq=1)
    deliver(b1, sync_body("CREATE TABLE t (id INT)"), seq=2)
    rep = b1.engine.on_arrived()
    assert rep.dead_lettered == 1 and rep.applied == 1
    (dl,) = b1.store.dead_letters
    assert dl.reason is DeadLetterReason.PARSE_FAIL and dl.body == b"\x00not json"
    assert b1.queues.depth("sync_in") == 0
    assert b1.store.table_names() == ["t"]


def test_failed_statement_logged_not_fatal(b1):
    deliver(b1, sync_body("INSERT INTO missing VALUES (1)", "CREATE TABLE t (id INT)"))
    rep = b1.engine.on_arrived()
    assert rep.failed == 1 and rep.applied == 1
    assert [e.outcome for e in b1.store.applied] == [ApplyOutcome.FAILED, ApplyOutcome.APPLIED]
    assert "NoSuchTable" in b1.store.applied[0].detail


def test_poison_dead_lettered_after_retry_budget(b1):
    deliver(b1, sync_body("CREATE TABLE t (id INT)"))
    real = b1.store.prepare
    fails = {"n": 0}

    def flaky(txn):
        if fails["n"] < MAX_APPLY_ATTEMPTS:
            fails["n"] += 1
            return None
        return real(txn)

    b1.store.prepare = flaky
    for _ in range(MAX_APPLY_ATTEMPTS):
        rep = b1.engine.on_arrived()
        assert rep.aborted >= 1
    rep = b1.engine.on_arrived()
    assert rep.dead_lettered == 1
    assert b1.store.dead_letters[0].reason is DeadLetterReason.EXEC_FAIL
    assert b1.queues.depth("sync_in") == 0
    assert b1.store.table_names() == []


def test_echo_batch_consumed_without_apply(b1):
    deliver(b1, sync_body("CREATE TABLE t (id INT)", origin="B1"), origin="C")
    b1.engine.on_arrived()
    assert b1.store.applied == [] and b1.store.table_names() == []
    assert b1.queues.depth("sync_in") == 0


def test_redelivered_statement_not_reapplied(trio_topo):
    wal = WAL()
    n = Node("B1", trio_topo, wal, ManualEnv())
    deliver(n, sync_body("CREATE TABLE t (id INT)", "INSERT INTO t VALUES (1)"))
    n.engine.on_arrived()
    again = Node("B1", trio_topo, wal, ManualEnv())
    deliver(again, sync_body("CREATE TABLE t (id INT)", "INSERT INTO t VALUES (1)"))
    assert again.queues.depth("sync_in") == 0  # duplicate by high-water mark
    assert len(again.store.applied) == 2


# --------------------------------------------------------------- dispatch


def test_branch_dispatch_one_message(make_node):
    env = ManualEnv()
    n = make_node("B1", env=env)
    for sql in ("CREATE TABLE t (id INT)", "INSERT INTO t VALUES (1)", "INSERT INTO t VALUES (2)"):
        n.exec_sql(sql)
    rep = n.engine.dispatch()
    assert rep.messages == 1 and rep.records == 3 and rep.destinations == ["C"]
    assert all(r.status is RecordStatus.DISPATCHED for r in n.store.outbox.values())
    (frame,) = [decode_frame(f) for _, f in env.take_sent()]
    body = SyncBody.from_bytes(frame.body)
    assert body.origin == "B1" and [r for r, _ in body.records] == [1, 2, 3]
    assert n.engine.dispatch().messages == 0


def test_batches_capped(make_node):
    n = make_node("B1")
    n.exec_sql("CREATE TABLE t (id INT)")
    for i in range(2 * BATCH_SIZE):
        n.exec_sql(f"INSERT INTO t VALUES ({i})")
    rep = n.engine.dispatch()
    assert rep.messages == 3 and rep.records == 2 * BATCH_SIZE + 1


def test_central_fans_out_except_origin():
    env = ManualEnv()
    c = Node("C", FIVE, WAL(), env)
    deliver(c, sync_body("CREATE TABLE t (id INT)", origin="B1", start=7), origin="B1")
    c.engine.on_arrived()
    (rec,) = c.store.pending_records()
    assert (rec.origin, rec.origin_record_id) == ("B1", 7)
    rep = c.engine.dispatch()
    assert sorted(rep.destinations) == ["B2", "B3", "B4", "B5"]
    peers = sorted(p for p, _ in env.take_sent())
    assert peers == ["B2", "B3", "B4", "B5"]


def test_notify_coalesces(make_node):
    env = ManualEnv()
    n = make_node("B1", env=env)
    n.exec_sql("CREATE TABLE t (id INT)")
    runs0 = n.engine.dispatch_runs
    for _ in range(100):
        n.engine.notify_dispatch()
    env.run_due()
    assert n.engine.dispatch_runs - runs0 == 1


def test_notify_during_run_gives_one_follow_up(make_node):
    env = ManualEnv()
    n = make_node("B1", env=env)
    real = n.engine.dispatch
    calls = []

    def noisy():
        calls.append(1)
        if len(calls) == 1:
            for _ in range(100):
                n.engine.notify_dispatch()
        return real()

    n.engine.dispatch = noisy
    n.engine.notify_dispatch()
    env.run_due()
    assert len(calls) == 2


def test_notify_with_empty_outbox_sends_nothing(make_node):
    env = ManualEnv()
    n = make_node("B1", env=env)
    n.engine.notify_dispatch()
    env.run_due()
    assert env.take_sent() == []


# ------------------------------------------------------------- end to end


def test_converged_fresh_and_not_quiescent(trio_topo):
    sim = Simulator(trio_topo)
    assert converged(sim.nodes.values())
    sim.update_link("B1", "C", status=LinkStatus.OFFLINE)
    sim.client_exec("B1", "CREATE TABLE t (id INT)")
    sim.run_until(10_000)
    with pytest.raises(NotQuiescent):
        converged(sim.nodes.values())


def test_five_branch_replication_no_echo():
    sim = Simulator(FIVE, seed=5)
    sim.client_exec("B1", "CREATE TABLE t (id INT, v TEXT)")
    for i in range(5):
        sim.client_exec("B1", f"INSERT INTO t VALUES ({i}, 'b1')")
    sim.client_exec("B3", "CREATE TABLE t (id INT, v TEXT)")
    sim.client_exec("B3", "INSERT INTO t VALUES (100, 'b3')")
    sim.run_until_quiet(120_000)
    assert converged(sim.nodes.values())
    for name, node in sim.nodes.items():
        assert all(e.origin != name for e in node.store.applied)
    ids = applied_ids(sim.nodes.values())
    for seq in ids.values():
        assert seq == sorted(seq) and len(set(seq)) == len(seq)
    assert ids[("B2", "B1")] == [1, 2, 3, 4, 5, 6]
