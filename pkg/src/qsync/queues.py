"""Queue manager: private queues, store-and-forward outgoing queues, journal.

One manager per node. It is a transaction participant (resource id
``"queue"``): transactional sends and removes are buffered per transaction
and become durable in the coordinator's PREPARED/INTERNAL record.

Exactly-once delivery works per stream, a stream being
(origin, destination node, destination queue). The sender numbers
messages 1, 2, 3... per stream; the receiver keeps a durable high-water mark
per stream, holds early arrivals in memory and acknowledges cumulatively.
The sender drops a message from its outgoing queue only once an ack covers
it, and retransmits on a simulated-time timer with exponential backoff.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from qsync.dtx import TxnContext
from qsync.env import Env
from qsync.errors import (
    AlreadyExists,
    BodyTooLarge,
    FrameError,
    LockTimeout,
    NonTransactionalQueue,
    QueueMissing,
    TransactionRequired,
)
from qsync.frame import decode_frame, encode_frame
from qsync.message import MAX_BODY, Kind, LinkStatus, Message, MessageId, QueueRef
from qsync.topology import TopologyConfig, route_next_hop
from qsync.wal import WAL, RecordType

log = logging.getLogger(__name__)

RESOURCE_ID = "queue"
INITIAL_RTO_MS = 500
MAX_RTO_MS = 8000
HOLD_WINDOW = 1024
SEND_WINDOW = 256
UNDELIVERABLE = "undeliverable"
LOCK_TIMEOUT_S = 30.0


class ReceiveMode(str, Enum):
    PEEK = "PEEK"
    REMOVE = "REMOVE"


class AcceptResult(str, Enum):
    ACCEPTED = "ACCEPTED"
    DUPLICATE = "DUPLICATE"
    OUT_OF_ORDER_HELD = "OUT_OF_ORDER_HELD"
    DROPPED = "DROPPED"  # beyond the hold window; retransmission recovers it


class Direction(str, Enum):
    SENT = "SENT"
    RECEIVED = "RECEIVED"


class Outcome(str, Enum):
    COMMITTED = "COMMITTED"
    ABORTED = "ABORTED"


@dataclass(frozen=True)
class JournalEntry:
    direction: Direction
    message_id: MessageId
    queue: str
    timestamp: int
    outcome: Outcome
    kind: Kind

    def to_dict(self) -> dict:
        return {
            "dir": self.direction.value,
            "origin": self.message_id.origin,
            "seq": self.message_id.seq,
            "queue": self.queue,
            "at": self.timestamp,
            "outcome": self.outcome.value,
            "kind": int(self.kind),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JournalEntry":
        return cls(
            Direction(d["dir"]),
            MessageId(d["origin"], d["seq"]),
            d["queue"],
            d["at"],
            Outcome(d["outcome"]),
            Kind(d["kind"]),
        )


class _Queue:
    __slots__ = ("ref", "messages")

    def __init__(self, ref: QueueRef):
        self.ref = ref
        self.messages: OrderedDict[MessageId, Message] = OrderedDict()

    @property
    def transactional(self) -> bool:
        return self.ref.transactional


@dataclass
class OutgoingQueue:
    target: str
    pending: list[Message] = field(default_factory=list)
    link_state: LinkStatus = LinkStatus.ONLINE
    rto: int = INITIAL_RTO_MS
    timer: object = field(default=None, repr=False)
    transmitted: set = field(default_factory=set, repr=False)
    frames: dict = field(default_factory=dict, repr=False)


@dataclass
class _TxnWork:
    sends: list = field(default_factory=list)  # (Message, next hop or None)
    removes: list = field(default_factory=list)  # (queue name, Message)
    seq_orig: dict = field(default_factory=dict)  # stream slot -> counter before txn


class QueueManager:
    resource_id = RESOURCE_ID

    def __init__(
        self,
        node: str,
        topo: TopologyConfig,
        wal: WAL,
        env: Env,
        *,
        default_link: LinkStatus = LinkStatus.ONLINE,
    ):
        self.node = node
        self.topo = topo
        self.wal = wal
        self.env = env
        self.default_link = default_link
        self.on_arrival: Callable[[str], None] | None = None
        self._lock = threading.RLock()
        self._cv = threading.Condition(self._lock)
        self._queues: dict[str, _Queue] = {}
        self._next_seq: dict[tuple[str, str], int] = {}
        self._hwm: dict[tuple[str, str, str], int] = {}
        self._held: dict[tuple[str, str, str], dict[int, Message]] = {}
        self._outgoing: dict[str, OutgoingQueue] = {}
        self._links: dict[str, LinkStatus] = {}
        self._journal: list[JournalEntry] = []
        self._locked: dict[tuple[str, MessageId], int] = {}
        self._owners: dict[tuple[str, str], int] = {}
        self._work: dict[int, _TxnWork] = {}

    # ------------------------------------------------------------------ queues

    def create_queue(self, name: str, transactional: bool) -> QueueRef:
        if not name or not name.isascii() or len(name) > 64:
            raise ValueError(f"bad queue name {name!r}")
        with self._lock:
            if name in self._queues:
                raise AlreadyExists(f"queue {name} already exists on {self.node}")
            ops = [["mkq", name, bool(transactional)]]
            self._log_auto(ops)
            self._apply(ops)
            return self._queues[name].ref

    def queue_ref(self, name: str) -> QueueRef:
        try:
            return self._queues[name].ref
        except KeyError:
            raise QueueMissing(f"{self.node}/{name}") from None

    def has_queue(self, name: str) -> bool:
        return name in self._queues

    def queue_names(self) -> list[str]:
        return list(self._queues)

    def depth(self, name: str) -> int:
        return len(self._queues[name].messages)

    def messages(self, name: str) -> list[Message]:
        """Committed contents of a local queue, including txn-locked ones."""
        with self._lock:
            return list(self.queue_obj(name).messages.values())

    def queue_obj(self, name: str) -> _Queue:
        try:
            return self._queues[name]
        except KeyError:
            raise QueueMissing(f"{self.node}/{name}") from None

    # -------------------------------------------------------------------- send

    def send(
        self,
        txn: TxnContext | None,
        dest: QueueRef,
        kind: Kind,
        body: bytes,
        *,
        via: str | None = None,
    ) -> MessageId:
        if len(body) > MAX_BODY:
            raise BodyTooLarge(f"{len(body)} bytes exceeds {MAX_BODY}")
        if dest.node == self.node:
            dest = self.queue_ref(dest.name)
        if txn is not None:
            txn.require_active()
            if not dest.transactional:
                raise NonTransactionalQueue(f"{dest} is not transactional")
        elif dest.transactional:
            raise TransactionRequired(f"{dest} only accepts transactional messages")
        hop = None if dest.node == self.node else self._first_hop(dest.node, via)
        slot = (dest.node, dest.name)
        with self._lock:
            if txn is not None:
                txn.enlist(self)
                work = self._work.setdefault(txn.txn_id, _TxnWork())
                self._reserve(slot, txn.txn_id)
                work.seq_orig.setdefault(slot, self._next_seq.get(slot, 0))
            else:
                self._wait_free(slot)
            seq = self._next_seq.get(slot, 0) + 1
            self._next_seq[slot] = seq
            msg = Message(
                MessageId(self.node, seq),
                Kind(kind),
                bytes(body),
                txn is not None,
                self.env.now(),
                dest,
                (self.node,),
            )
            if txn is not None:
                work.sends.append((msg, hop))
                return msg.id
            ops = self._send_ops(msg, hop)
            self._log_auto(ops)
            self._apply(ops, live=True)
            return msg.id

    def _first_hop(self, dest_node: str, via: str | None) -> str:
        if via is not None and via != self.node:
            self.topo.node(via)
            return via
        return self._next_hop(dest_node)

    def _next_hop(self, dest_node: str) -> str:
        hop = route_next_hop(self.topo, self.node, dest_node)
        return dest_node if hop == self.node else hop

    def _send_ops(self, msg: Message, hop: str | None) -> list:
        ops: list = [["seq", msg.dest_queue.node, msg.dest_queue.name, msg.id.seq]]
        if hop is None:
            ops.append(["enq", msg.dest_queue.name, msg.to_dict()])
        else:
            ops.append(["out", hop, msg.to_dict()])
        ops.append(["jrnl", self._entry(Direction.SENT, msg).to_dict()])
        return ops

    def _entry(self, direction: Direction, msg: Message) -> JournalEntry:
        return JournalEntry(
            direction, msg.id, str(msg.dest_queue), self.env.now(), Outcome.COMMITTED, msg.kind
        )

    def _reserve(self, slot, txn_id: int) -> None:
        if self._owners.get(slot) == txn_id:
            return
        self._wait_free(slot)
        self._owners[slot] = txn_id

    def _wait_free(self, slot) -> None:
        if slot in self._owners and not self._cv.wait_for(
            lambda: slot not in self._owners, timeout=LOCK_TIMEOUT_S
        ):
            raise LockTimeout(f"stream {slot} held by txn {self._owners.get(slot)}")

    # ----------------------------------------------------------------- receive

    def receive(
        self,
        txn: TxnContext | None,
        queue: str | QueueRef,
        mode: ReceiveMode = ReceiveMode.REMOVE,
        *,
        message_id: MessageId | None = None,
    ) -> Message | None:
        name = queue.name if isinstance(queue, QueueRef) else queue
        if isinstance(queue, QueueRef) and queue.node != self.node:
            raise QueueMissing(f"{queue} is not a local queue")
        with self._lock:
            q = self.queue_obj(name)
            msg = None
            if message_id is not None:
                cand = q.messages.get(message_id)
                if cand is not None and (name, message_id) not in self._locked:
                    msg = cand
            else:
                for mid, cand in q.messages.items():
                    if (name, mid) not in self._locked:
                        msg = cand
                        break
            if msg is None or mode is ReceiveMode.PEEK:
                return msg
            if txn is not None:
                txn.require_active()
                txn.enlist(self)
                self._locked[(name, msg.id)] = txn.txn_id
                self._work.setdefault(txn.txn_id, _TxnWork()).removes.append((name, msg))
                return msg
            ops = self._remove_ops(name, msg)
            self._log_auto(ops)
            self._apply(ops, live=True)
            return msg

    def _remove_ops(self, name: str, msg: Message) -> list:
        return [
            ["deq", name, msg.id.origin, msg.id.seq],
            ["jrnl", self._entry(Direction.RECEIVED, msg).to_dict()],
        ]

    # ------------------------------------------------------- incoming frames

    def on_frame(self, data: bytes) -> AcceptResult | None:
        """Entry point for raw frames handed up by a transport."""
        try:
            msg = decode_frame(data)
        except FrameError as exc:
            log.warning("%s: dropping bad frame: %s", self.node, exc)
            return None
        if msg.kind is Kind.ACK:
            self._on_ack(msg)
            return None
        result = self.accept_incoming(msg)
        if result in (AcceptResult.ACCEPTED, AcceptResult.DUPLICATE):
            self._send_ack(msg)
        return result

    def accept_incoming(self, msg: Message) -> AcceptResult:
        key = msg.stream
        with self._lock:
            hwm = self._hwm.get(key, 0)
            seq = msg.id.seq
            if seq <= hwm:
                return AcceptResult.DUPLICATE
            held = self._held.setdefault(key, {})
            if seq in held:
                return AcceptResult.OUT_OF_ORDER_HELD
            if seq > hwm + 1:
                if len(held) >= HOLD_WINDOW:
                    return AcceptResult.DROPPED
                held[seq] = msg
                return AcceptResult.OUT_OF_ORDER_HELD
            batch = [msg]
            while batch[-1].id.seq + 1 in held:
                batch.append(held.pop(batch[-1].id.seq + 1))
            if not held:
                del self._held[key]
            ops: list = []
            for m in batch:
                ops.extend(self._arrival_ops(m))
            ops.append(["hwm", *key, batch[-1].id.seq])
            self._log_auto(ops)
            self._apply(ops, live=True)
            return AcceptResult.ACCEPTED

    def _arrival_ops(self, msg: Message) -> list:
        arrived = Message(
            msg.id, msg.kind, msg.body, msg.transactional, msg.sent_at, msg.dest_queue,
            msg.hops + (self.node,),
        )
        if msg.dest_queue.node == self.node:
            q = self._queues.get(msg.dest_queue.name)
            name = msg.dest_queue.name
            if q is None or (msg.transactional != q.transactional):
                log.warning("%s: undeliverable %s for %s", self.node, msg.id, msg.dest_queue)
                name = UNDELIVERABLE
                if name not in self._queues:
                    return [["mkq", name, False], ["enq", name, arrived.to_dict()]]
            return [["enq", name, arrived.to_dict()]]
        hop = self._next_hop(msg.dest_queue.node)
        return [
            ["out", hop, arrived.to_dict()],
            ["jrnl", self._entry(Direction.RECEIVED, msg).to_dict()],
            ["jrnl", self._entry(Direction.SENT, msg).to_dict()],
        ]

    def _send_ack(self, msg: Message) -> None:
        prev = msg.hops[-1] if msg.hops else msg.id.origin
        origin, node, queue = msg.stream
        body = json.dumps(
            {"o": origin, "n": node, "q": queue, "h": self._hwm.get(msg.stream, 0)},
            separators=(",", ":"),
        ).encode()
        ack = Message(
            MessageId(self.node, 0), Kind.ACK, body, False, self.env.now(),
            QueueRef(prev, "ack", False), (self.node,),
        )
        self.env.send_frame(prev, encode_frame(ack))

    def _on_ack(self, ack: Message) -> None:
        try:
            d = json.loads(ack.body)
            stream, hwm = (d["o"], d["n"], d["q"]), int(d["h"])
        except (ValueError, KeyError, TypeError):
            log.warning("%s: malformed ack from %s", self.node, ack.id.origin)
            return
        target = ack.id.origin
        with self._lock:
            oq = self._outgoing.get(target)
            if oq is None or not any(
                m.stream == stream and m.id.seq <= hwm for m in oq.pending
            ):
                return
            ops = [["ack", target, *stream, hwm]]
            self._log_auto(ops)
            self._apply(ops)
            oq.rto = INITIAL_RTO_MS
            self._cancel_timer(oq)
            self.flush_outgoing(target)

    # ---------------------------------------------------------------- outgoing

    def outgoing(self, target: str) -> OutgoingQueue | None:
        return self._outgoing.get(target)

    def outgoing_targets(self) -> list[str]:
        return list(self._outgoing)

    def link_state(self, peer: str) -> LinkStatus:
        return self._links.get(peer, self.default_link)

    def set_link_state(self, peer: str, status: LinkStatus) -> None:
        status = LinkStatus(status)
        with self._lock:
            self._links[peer] = status
            oq = self._outgoing.get(peer)
            if oq is None:
                return
            oq.link_state = status
            if status is LinkStatus.OFFLINE:
                self._cancel_timer(oq)
                oq.transmitted.clear()
            else:
                oq.rto = INITIAL_RTO_MS
                self.flush_outgoing(peer)

    def flush_outgoing(self, target: str) -> int:
        """Hand not-yet-transmitted frames in the send window to the transport."""
        with self._lock:
            oq = self._outgoing.get(target)
            if oq is None or not oq.pending or oq.link_state is LinkStatus.OFFLINE:
                return 0
            n = 0
            for m in oq.pending[:SEND_WINDOW]:
                k = (m.stream, m.id.seq)
                if k in oq.transmitted:
                    continue
                frame = oq.frames.get(k)
                if frame is None:
                    frame = oq.frames[k] = encode_frame(m)
                oq.transmitted.add(k)
                self.env.send_frame(target, frame)
                n += 1
            if oq.timer is None:
                oq.timer = self.env.call_later(oq.rto, lambda: self._on_timeout(target))
            return n

    def flush_all(self) -> int:
        return sum(self.flush_outgoing(t) for t in list(self._outgoing))

    def _on_timeout(self, target: str) -> None:
        with self._lock:
            oq = self._outgoing.get(target)
            if oq is None:
                return
            oq.timer = None
            if not oq.pending or oq.link_state is LinkStatus.OFFLINE:
                return
            oq.rto = min(oq.rto * 2, MAX_RTO_MS)
            oq.transmitted.clear()
            self.flush_outgoing(target)

    def _cancel_timer(self, oq: OutgoingQueue) -> None:
        if oq.timer is not None:
            oq.timer.cancel()
            oq.timer = None

    def idle(self) -> bool:
        """No outgoing frames awaiting acknowledgement."""
        return all(not oq.pending for oq in self._outgoing.values())

    def shutdown(self) -> None:
        with self._lock:
            for oq in self._outgoing.values():
                self._cancel_timer(oq)

    # ----------------------------------------------------------------- journal

    def journal_list(
        self,
        direction: Direction | None = None,
        queue: str | None = None,
        kind: Kind | None = None,
    ) -> list[JournalEntry]:
        with self._lock:
            out = [
                e
                for e in self._journal
                if (direction is None or e.direction is Direction(direction))
                and (queue is None or e.queue == queue)
                and (kind is None or e.kind is Kind(kind))
            ]
        return sorted(out, key=lambda e: e.timestamp)

    # ------------------------------------------------------ participant hooks

    def prepare(self, txn: TxnContext) -> list:
        work = self._work.get(txn.txn_id)
        ops: list = []
        if work is None:
            return ops
        for msg, hop in work.sends:
            ops.extend(self._send_ops(msg, hop))
        for name, msg in work.removes:
            ops.extend(self._remove_ops(name, msg))
        return ops

    def commit(self, txn: TxnContext, ops: list) -> None:
        with self._lock:
            self._apply(ops, live=True)
            self._release(txn, restore=False)

    def abort(self, txn: TxnContext) -> None:
        with self._lock:
            self._release(txn, restore=True)

    def _release(self, txn: TxnContext, *, restore: bool) -> None:
        work = self._work.pop(txn.txn_id, None)
        if work is None:
            return
        for name, msg in work.removes:
            self._locked.pop((name, msg.id), None)
        for slot, orig in work.seq_orig.items():
            if restore:
                self._next_seq[slot] = orig
            if self._owners.get(slot) == txn.txn_id:
                del self._owners[slot]
        self._cv.notify_all()

    def redo(self, ops: list) -> None:
        self._apply(ops)

    # -------------------------------------------------------------- internals

    def _log_auto(self, ops: list) -> None:
        self.wal.append(RecordType.AUTO, {"rid": RESOURCE_ID, "ops": ops})

    def _apply(self, ops: list, *, live: bool = False) -> None:
        arrived: list[str] = []
        touched: list[str] = []
        for op in ops:
            tag = op[0]
            if tag == "mkq":
                _, name, txnl = op
                self._queues[name] = _Queue(QueueRef(self.node, name, txnl))
            elif tag == "seq":
                _, node, queue, seq = op
                slot = (node, queue)
                self._next_seq[slot] = max(self._next_seq.get(slot, 0), seq)
            elif tag == "enq":
                _, name, d = op
                m = Message.from_dict(d)
                self._queues[name].messages[m.id] = m
                arrived.append(name)
            elif tag == "deq":
                _, name, origin, seq = op
                mid = MessageId(origin, seq)
                self._queues[name].messages.pop(mid, None)
                self._locked.pop((name, mid), None)
            elif tag == "out":
                _, target, d = op
                oq = self._outgoing.get(target)
                if oq is None:
                    oq = self._outgoing[target] = OutgoingQueue(
                        target, link_state=self.link_state(target)
                    )
                oq.pending.append(Message.from_dict(d))
                touched.append(target)
            elif tag == "ack":
                _, target, origin, node, queue, hwm = op
                oq = self._outgoing.get(target)
                if oq is not None:
                    stream = (origin, node, queue)
                    keep = []
                    for m in oq.pending:
                        if m.stream == stream and m.id.seq <= hwm:
                            k = (stream, m.id.seq)
                            oq.transmitted.discard(k)
                            oq.frames.pop(k, None)
                        else:
                            keep.append(m)
                    oq.pending = keep
            elif tag == "hwm":
                _, origin, node, queue, seq = op
                key = (origin, node, queue)
                self._hwm[key] = max(self._hwm.get(key, 0), seq)
            elif tag == "jrnl":
                self._journal.append(JournalEntry.from_dict(op[1]))
            else:
                raise ValueError(f"unknown queue op {tag!r}")
        if not live:
            return
        for target in dict.fromkeys(touched):
            self.flush_outgoing(target)
        if self.on_arrival is not None:
            for name in dict.fromkeys(arrived):
                self.on_arrival(name)
