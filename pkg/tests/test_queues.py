import dataclasses

import pytest

from qsync.dtx import TxnMode, TxnState
from qsync.env import ManualEnv
from qsync.errors import (
    AlreadyExists,
    BodyTooLarge,
    NonTransactionalQueue,
    QueueMissing,
    TransactionRequired,
    TxnAborted,
)
from qsync.frame import decode_frame
from qsync.message import MAX_BODY, Kind, LinkStatus, Message, MessageId, QueueRef
from qsync.node import Node
from qsync.queues import (
    HOLD_WINDOW,
    INITIAL_RTO_MS,
    MAX_RTO_MS,
    AcceptResult,
    Direction,
    QueueManager,
    ReceiveMode,
)
from qsync.sim import LinkState, Simulator
from qsync.wal import WAL


@pytest.fixture
def b1(make_node):
    return make_node("B1")


def commit_send(node, dest, body=b"x", mode=TxnMode.INTERNAL):
    txn = node.coordinator.begin(mode)
    mid = node.queues.send(txn, dest, Kind.SYNC, body)
    assert node.coordinator.commit(txn) is TxnState.COMMITTED
    return mid


def incoming(seq, body=b"", origin="C", queue="work", txn=True):
    return Message(
        MessageId(origin, seq), Kind.SYNC, body, txn, 0, QueueRef("B1", queue, txn), (origin,)
    )


# ----------------------------------------------------------------- create


def test_create_queue(b1):
    ref = b1.queues.create_queue("work", True)
    assert ref == QueueRef("B1", "work", True)
    with pytest.raises(AlreadyExists):
        b1.queues.create_queue("work", False)
    with pytest.raises(AlreadyExists):
        b1.queues.create_queue("work", True)


def test_queue_survives_restart(trio_topo):
    wal = WAL()
    n = Node("B1", trio_topo, wal, ManualEnv())
    n.queues.create_queue("work", False)
    again = Node("B1", trio_topo, wal, ManualEnv())
    assert again.queues.queue_ref("work") == QueueRef("B1", "work", False)
    assert again.queues.depth("work") == 0


def test_transactional_flag_is_immutable(b1):
    ref = b1.queues.create_queue("work", True)
    with pytest.raises(dataclasses.FrozenInstanceError):
        ref.transactional = False
    assert not any("transactional" in name for name in dir(QueueManager) if not name.startswith("_"))


# ------------------------------------------------------------------- send


def test_txn_send_to_non_txn_queue(b1):
    ref = b1.queues.create_queue("plain", False)
    txn = b1.coordinator.begin()
    with pytest.raises(NonTransactionalQueue):
        b1.queues.send(txn, ref, Kind.SYNC, b"x")
    with pytest.raises(NonTransactionalQueue):
        b1.queues.send(txn, QueueRef("C", "remote_plain", False), Kind.SYNC, b"x")


def test_plain_send_to_local_plain_queue_is_immediate(b1):
    ref = b1.queues.create_queue("plain", False)
    mid = b1.queues.send(None, ref, Kind.SYNC, b"now")
    msg = b1.queues.receive(None, "plain", ReceiveMode.PEEK)
    assert msg.id == mid and msg.body == b"now"


def test_plain_send_to_txn_queue_refused(b1):
    with pytest.raises(TransactionRequired):
        b1.queues.send(None, QueueRef("B1", "sync_in", True), Kind.SYNC, b"x")


def test_body_limit(b1):
    ref = b1.queues.create_queue("plain", False)
    b1.queues.send(None, ref, Kind.SYNC, b"\0" * MAX_BODY)
    with pytest.raises(BodyTooLarge):
        b1.queues.send(None, ref, Kind.SYNC, b"\0" * (MAX_BODY + 1))


def test_send_on_aborted_txn(b1):
    txn = b1.coordinator.begin()
    b1.coordinator.abort(txn)
    with pytest.raises(TxnAborted):
        b1.queues.send(txn, QueueRef("B1", "sync_in", True), Kind.SYNC, b"x")


def test_sequences_per_stream(b1):
    b1.queues.create_queue("other", True)
    a = commit_send(b1, QueueRef("B1", "sync_in", True))
    b = commit_send(b1, QueueRef("B1", "other", True))
    c = commit_send(b1, QueueRef("B1", "sync_in", True))
    assert (a.seq, b.seq, c.seq) == (1, 1, 2)


def test_same_txn_sends_keep_order(b1):
    ref = QueueRef("B1", "sync_in", True)
    txn = b1.coordinator.begin()
    for i in range(5):
        b1.queues.send(txn, ref, Kind.SYNC, bytes([i]))
    b1.coordinator.commit(txn)
    assert [m.body for m in b1.queues.messages("sync_in")] == [bytes([i]) for i in range(5)]


def test_aborted_txn_sends_never_arrive(trio_topo):
    sim = Simulator(trio_topo, seed=1)
    b1 = sim.node("B1")
    txn = b1.coordinator.begin(TxnMode.INTERNAL)
    for _ in range(3):
        b1.queues.send(txn, QueueRef("C", "mail_in", True), Kind.MAIL, b"{}")
    b1.coordinator.abort(txn)
    sim.run_until_quiet(60_000)
    assert sim.node("C").queues.depth("mail_in") == 0
    assert b1.queues.journal_list(Direction.SENT) == []


# ---------------------------------------------------------------- receive


def test_receive_empty_and_missing(b1):
    assert b1.queues.receive(None, "sync_in", ReceiveMode.REMOVE) is None
    with pytest.raises(QueueMissing):
        b1.queues.receive(None, "nope", ReceiveMode.PEEK)
    with pytest.raises(QueueMissing):
        b1.queues.receive(None, QueueRef("C", "sync_in", True), ReceiveMode.PEEK)


def test_peek_is_non_destructive(b1):
    commit_send(b1, QueueRef("B1", "sync_in", True), b"p")
    first = b1.queues.receive(None, "sync_in", ReceiveMode.PEEK)
    second = b1.queues.receive(None, "sync_in", ReceiveMode.PEEK)
    assert first == second and first.body == b"p"
    assert b1.queues.depth("sync_in") == 1


def test_remove_abort_restores_same_message(b1):
    commit_send(b1, QueueRef("B1", "sync_in", True), b"r")
    txn = b1.coordinator.begin(TxnMode.INTERNAL)
    got = b1.queues.receive(txn, "sync_in", ReceiveMode.REMOVE)
    b1.coordinator.abort(txn)
    txn = b1.coordinator.begin(TxnMode.INTERNAL)
    assert b1.queues.receive(txn, "sync_in", ReceiveMode.REMOVE) == got
    b1.coordinator.commit(txn)
    assert b1.queues.depth("sync_in") == 0
    assert len(b1.queues.journal_list(Direction.RECEIVED)) == 1


# ----------------------------------------------------------------- accept


def test_accept_duplicate(b1):
    b1.queues.create_queue("work", True)
    assert b1.queues.accept_incoming(incoming(1)) is AcceptResult.ACCEPTED
    assert b1.queues.accept_incoming(incoming(1)) is AcceptResult.DUPLICATE
    assert b1.queues.depth("work") == 1


def test_accept_reorder_releases_in_order(b1):
    b1.queues.create_queue("work", True)
    for s in (1, 2, 3):
        b1.queues.accept_incoming(incoming(s))
    assert b1.queues.accept_incoming(incoming(5)) is AcceptResult.OUT_OF_ORDER_HELD
    assert b1.queues.accept_incoming(incoming(5)) is AcceptResult.OUT_OF_ORDER_HELD
    assert b1.queues.depth("work") == 3
    assert b1.queues.accept_incoming(incoming(4)) is AcceptResult.ACCEPTED
    assert [m.id.seq for m in b1.queues.messages("work")] == [1, 2, 3, 4, 5]


def test_held_window_is_bounded(b1):
    b1.queues.create_queue("work", True)
    for s in range(3, 3 + HOLD_WINDOW):
        assert b1.queues.accept_incoming(incoming(s)) is AcceptResult.OUT_OF_ORDER_HELD
    assert b1.queues.accept_incoming(incoming(5000)) is AcceptResult.DROPPED


def test_hwm_is_durable(trio_topo):
    wal = WAL()
    n = Node("B1", trio_topo, wal, ManualEnv())
    n.queues.create_queue("work", True)
    assert n.queues.accept_incoming(incoming(1)) is AcceptResult.ACCEPTED
    again = Node("B1", trio_topo, wal, ManualEnv())
    assert again.queues.accept_incoming(incoming(1)) is AcceptResult.DUPLICATE


def test_mismatched_flag_goes_to_undeliverable(b1):
    b1.queues.create_queue("work", True)
    assert b1.queues.accept_incoming(incoming(1, txn=False)) is AcceptResult.ACCEPTED
    assert b1.queues.depth("work") == 0
    assert b1.queues.depth("undeliverable") == 1


# --------------------------------------------------------------- outgoing


def test_offline_flush_sends_nothing(trio_topo):
    env = ManualEnv()
    n = Node("B1", trio_topo, WAL(), env, default_link=LinkStatus.OFFLINE)
    commit_send(n, QueueRef("C", "sync_in", True))
    assert n.queues.flush_outgoing("C") == 0
    assert env.take_sent() == []
    assert len(n.queues.outgoing("C").pending) == 1


def test_retransmit_backoff(trio_topo):
    env = ManualEnv()
    n = Node("B1", trio_topo, WAL(), env)
    commit_send(n, QueueRef("C", "sync_in", True))
    assert len(env.take_sent()) == 1
    times = []
    for _ in range(160):
        env.advance(250)
        if env.take_sent():
            times.append(env.clock)
    gaps = [b - a for a, b in zip([0] + times, times)]
    assert gaps[:5] == [INITIAL_RTO_MS, 1000, 2000, 4000, MAX_RTO_MS]
    assert set(gaps[4:]) == {MAX_RTO_MS}


def test_ack_removes_and_resets_rto(trio_topo):
    env_b, env_c = ManualEnv(), ManualEnv()
    b = Node("B1", trio_topo, WAL(), env_b)
    c = Node("C", trio_topo, WAL(), env_c)
    commit_send(b, QueueRef("C", "sync_in", True))
    env_b.advance(500)
    env_b.advance(1000)  # two retransmissions
    frames = env_b.take_sent()
    assert len(frames) == 3
    results = [c.on_frame(f) for _, f in frames]
    assert results == [AcceptResult.ACCEPTED, AcceptResult.DUPLICATE, AcceptResult.DUPLICATE]
    acks = env_c.take_sent()
    assert {peer for peer, _ in acks} == {"B1"}
    assert all(decode_frame(a).kind is Kind.ACK for _, a in acks)
    b.on_frame(acks[0][1])
    oq = b.queues.outgoing("C")
    assert oq.pending == [] and oq.rto == INITIAL_RTO_MS
    assert b.queues.idle()


def test_lossy_link_exactly_once(trio_topo):
    sim = Simulator(trio_topo, seed=9, link=LinkState(loss_rate=0.3, dup_rate=0.3, reorder=True))
    b1 = sim.node("B1")
    ref = QueueRef("C", "work", True)
    sim.node("C").queues.create_queue("work", True)
    sent = [commit_send(b1, ref, str(i).encode()) for i in range(60)]
    sim.run_until_quiet(600_000)
    got = sim.node("C").queues.messages("work")
    assert [m.id for m in got] == sent
    assert [m.body for m in got] == [str(i).encode() for i in range(60)]


def test_offline_then_online_drains_in_order(trio_topo):
    sim = Simulator(trio_topo, seed=2)
    sim.update_link("B1", "C", status=LinkStatus.OFFLINE)
    sim.node("C").queues.create_queue("work", True)
    b1 = sim.node("B1")
    sent = [commit_send(b1, QueueRef("C", "work", True)) for _ in range(10)]
    sim.run_until(5_000)
    assert len(b1.queues.outgoing("C").pending) == 10
    assert sim.node("C").queues.depth("work") == 0
    sim.update_link("B1", "C", status=LinkStatus.ONLINE)
    sim.run_until_quiet(60_000)
    assert [m.id for m in sim.node("C").queues.messages("work")] == sent


def test_relay_through_central(trio_topo):
    sim = Simulator(trio_topo, seed=3)
    mid = commit_send(sim.node("B1"), QueueRef("B2", "mail_in", True))
    sim.run_until_quiet(60_000)
    (msg,) = sim.node("B2").queues.messages("mail_in")
    assert msg.id == mid and msg.hops == ("B1", "C", "B2")
    c_dirs = [e.direction for e in sim.node("C").queues.journal_list()]
    assert c_dirs == [Direction.RECEIVED, Direction.SENT]


# ---------------------------------------------------------------- journal


def test_journal_round_trip(trio_topo):
    sim = Simulator(trio_topo, seed=4)
    assert sim.node("B1").queues.journal_list() == []
    mid = commit_send(sim.node("B1"), QueueRef("C", "mail_in", True))
    sim.run_until_quiet(60_000)
    c = sim.node("C")
    txn = c.coordinator.begin(TxnMode.INTERNAL)
    c.queues.receive(txn, "mail_in", ReceiveMode.REMOVE)
    c.coordinator.commit(txn)
    (sent,) = sim.node("B1").queues.journal_list(Direction.SENT)
    (recv,) = c.queues.journal_list(Direction.RECEIVED)
    assert sent.message_id == recv.message_id == mid
    assert sent.outcome.value == "COMMITTED"
