"""One enterprise node: queue manager, coordinator, store, sync engine and mail."""

from __future__ import annotations

import logging

from qsync.dtx import Coordinator, TxnMode, TxnState
from qsync.env import Env
from qsync.errors import TxnAborted
from qsync.mail import MAIL_QUEUE, MailService
from qsync.message import LinkStatus
from qsync.queues import QueueManager
from qsync.sql import format_statement, parse_statement
from qsync.store import StatementStore
from qsync.sync import SYNC_QUEUE, PermissionPolicy, SyncEngine
from qsync.topology import TopologyConfig
from qsync.wal import WAL

log = logging.getLogger(__name__)


class Node:
    """Opening a node replays its WAL and resolves in-doubt transactions.

    Call :meth:`start` once the environment can deliver timers and frames.
    """

    def __init__(
        self,
        node_id: str,
        topo: TopologyConfig,
        wal: WAL,
        env: Env,
        *,
        policy: PermissionPolicy | None = None,
        mail_key: bytes | None = None,
        default_link: LinkStatus = LinkStatus.ONLINE,
    ):
        topo.node(node_id)
        self.node_id = node_id
        self.topo = topo
        self.wal = wal
        self.env = env
        self.alive = True
        self.queues = QueueManager(node_id, topo, wal, env, default_link=default_link)
        self.store = StatementStore(node_id, env)
        self.coordinator = Coordinator(wal, {"queue": self.queues, "store": self.store})
        self.recovered = self.coordinator.recover()
        for name in (SYNC_QUEUE, MAIL_QUEUE):
            if not self.queues.has_queue(name):
                self.queues.create_queue(name, True)
        self.engine = SyncEngine(self, policy)
        self.mail = MailService(self, mail_key if mail_key is not None else topo.mail_key)
        self.queues.on_arrival = self._on_arrival
        self.store.on_registered = self.engine.notify_dispatch

    def start(self) -> None:
        """Resume work left over from before a restart."""
        if self.queues.depth(SYNC_QUEUE):
            self.engine.schedule_receive()
        if self.store.pending_records():
            self.engine.notify_dispatch()
        self.queues.flush_all()

    def _on_arrival(self, queue: str) -> None:
        if queue == SYNC_QUEUE:
            self.engine.schedule_receive()

    def on_frame(self, data: bytes):
        if self.alive:
            return self.queues.on_frame(data)
        return None

    def set_link(self, peer: str, status: LinkStatus) -> None:
        self.queues.set_link_state(peer, status)

    def crash(self) -> None:
        self.alive = False
        self.queues.shutdown()

    # ---------------------------------------------------------- client path

    def exec_sql(self, sql: str) -> int:
        """Run a client statement locally and queue it for replication."""
        stmt = parse_statement(sql)
        txn = self.coordinator.begin(TxnMode.EXTERNAL)
        try:
            rows = self.store.execute(txn, stmt)
            self.store.register_executed(txn, [format_statement(stmt)])
        except Exception:
            self.coordinator.abort(txn)
            raise
        if self.coordinator.commit(txn) is not TxnState.COMMITTED:
            raise TxnAborted("client transaction aborted")
        return rows

    # ------------------------------------------------------------ inspection

    def quiescent(self) -> bool:
        return (
            self.queues.idle()
            and self.queues.depth(SYNC_QUEUE) == 0
            and not self.store.pending_records()
        )

    def status(self) -> dict:
        q = self.queues
        return {
            "node": self.node_id,
            "role": self.topo.role(self.node_id).value,
            "queues": {name: q.depth(name) for name in q.queue_names()},
            "outgoing": {
                t: {"pending": len(q.outgoing(t).pending), "link": q.outgoing(t).link_state.value}
                for t in q.outgoing_targets()
            },
            "outbox_pending": len(self.store.pending_records()),
            "dead_letters": [
                {"message": f"{d.source_origin}:{d.source_seq}", "reason": d.reason.value,
                 "detail": d.detail}
                for d in self.store.dead_letters
            ],
            "conflicts": len(self.store.conflicts),
            "recovered": self.recovered,
        }
