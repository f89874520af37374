"""Synchronization engine: the receiver and dispatcher flows of every node.

Branch and central run the same code. The only role-dependent choices are
where the dispatcher sends (branch: central; central: every branch except
the statement's origin) and whether applied statements are re-registered
for forwarding (central only).
"""

from __future__ import annotations

import fnmatch
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable

from qsync.dtx import TxnMode, TxnState
from qsync.errors import ExecutionError, NotQuiescent, SQLError, SyncDecodeError
from qsync.message import Kind, QueueRef
from qsync.queues import ReceiveMode
from qsync.sql import Statement, format_statement, parse_statement
from qsync.store import (
    AppliedLogEntry,
    ApplyOutcome,
    DeadLetterEntry,
    DeadLetterReason,
)
from qsync.topology import Role

if TYPE_CHECKING:
    from qsync.node import Node

log = logging.getLogger(__name__)

SYNC_QUEUE = "sync_in"
SCHEMA_VERSION = 1
BATCH_SIZE = 32
MAX_APPLY_ATTEMPTS = 3
RETRY_DELAY_MS = 500
STATEMENT_KINDS = ("CREATE", "INSERT", "UPDATE", "DELETE")


@dataclass(frozen=True)
class SyncBody:
    origin: str
    records: tuple[tuple[int, str], ...]
    schema_version: int = SCHEMA_VERSION

    def to_bytes(self) -> bytes:
        doc = {
            "origin": self.origin,
            "schema_version": self.schema_version,
            "records": [{"id": rid, "sql": sql} for rid, sql in self.records],
        }
        return json.dumps(doc, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes) -> "SyncBody":
        try:
            doc = json.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, ValueError) as exc:
            raise SyncDecodeError(f"body is not JSON: {exc}") from None
        if not isinstance(doc, dict) or list(doc) != ["origin", "schema_version", "records"]:
            raise SyncDecodeError("body must have keys origin, schema_version, records")
        origin, version, records = doc["origin"], doc["schema_version"], doc["records"]
        if not isinstance(origin, str) or not origin:
            raise SyncDecodeError("bad origin")
        if version != SCHEMA_VERSION:
            raise SyncDecodeError(f"unsupported schema_version {version!r}")
        if not isinstance(records, list) or not records:
            raise SyncDecodeError("records must be a non-empty list")
        out = []
        for r in records:
            if (
                not isinstance(r, dict)
                or list(r) != ["id", "sql"]
                or not isinstance(r["id"], int)
                or isinstance(r["id"], bool)
                or not isinstance(r["sql"], str)
            ):
                raise SyncDecodeError(f"bad record {r!r}")
            out.append((r["id"], r["sql"]))
        return cls(origin, tuple(out), version)


@dataclass(frozen=True)
class PermissionRule:
    origin: str
    kind: str
    table_glob: str


@dataclass(frozen=True)
class PermissionPolicy:
    """Allow-list of (origin, kind, table glob); no rules means allow all."""

    rules: tuple[PermissionRule, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "PermissionPolicy":
        rules = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4 or parts[0] != "allow":
                raise ValueError(f"policy line {lineno}: expected 'allow <origin> <kind> <glob>'")
            kind = parts[2].upper()
            if kind != "*" and kind not in STATEMENT_KINDS:
                raise ValueError(f"policy line {lineno}: unknown statement kind {parts[2]!r}")
            rules.append(PermissionRule(parts[1], kind, parts[3]))
        return cls(tuple(rules))

    @classmethod
    def deny_kinds(cls, *kinds: str) -> "PermissionPolicy":
        allowed = [k for k in STATEMENT_KINDS if k not in {k.upper() for k in kinds}]
        return cls(tuple(PermissionRule("*", k, "*") for k in allowed))


def check_permission(policy: PermissionPolicy, origin: str, stmt: Statement) -> bool:
    if not policy.rules:
        return True
    return any(
        (r.origin == "*" or r.origin == origin)
        and (r.kind == "*" or r.kind == stmt.kind)
        and fnmatch.fnmatchcase(stmt.table, r.table_glob)
        for r in policy.rules
    )


@dataclass
class ApplyReport:
    messages: int = 0
    applied: int = 0
    skipped: int = 0
    failed: int = 0
    dead_lettered: int = 0
    aborted: int = 0


@dataclass
class DispatchReport:
    messages: int = 0
    records: int = 0
    failed_batches: int = 0
    destinations: list = field(default_factory=list)


class SyncEngine:
    def __init__(self, node: "Node", policy: PermissionPolicy | None = None):
        self.node = node
        self.policy = policy or PermissionPolicy()
        self.dispatch_runs = 0
        self.receive_runs = 0
        self._attempts: Counter = Counter()
        self._dispatch_scheduled = False
        self._dispatch_running = False
        self._dispatch_again = False
        self._receive_scheduled = False

    @property
    def role(self) -> Role:
        return self.node.topo.role(self.node.node_id)

    # ------------------------------------------------------------- receiving

    def schedule_receive(self) -> None:
        if self._receive_scheduled:
            return
        self._receive_scheduled = True
        self.node.env.call_later(0, self._run_receive)

    def _run_receive(self) -> None:
        self._receive_scheduled = False
        if self.node.alive:
            self.on_arrived(SYNC_QUEUE)

    def on_arrived(self, queue: str = SYNC_QUEUE) -> ApplyReport:
        """Apply every receivable message on ``queue``, one transaction each."""
        self.receive_runs += 1
        report = ApplyReport()
        qm = self.node.queues
        while qm.receive(None, queue, ReceiveMode.PEEK) is not None:
            if not self._apply_one(queue, report):
                # the head message could not be committed; back off
                self.node.env.call_later(RETRY_DELAY_MS, self.schedule_receive)
                break
        return report

    def _apply_one(self, queue: str, report: ApplyReport) -> bool:
        """Process the head message; False means no progress was possible."""
        node = self.node
        txn = node.coordinator.begin(TxnMode.EXTERNAL)
        msg = node.queues.receive(txn, queue, ReceiveMode.REMOVE)
        if msg is None:
            node.coordinator.abort(txn)
            return True
        report.messages += 1
        if self._attempts[msg.id] >= MAX_APPLY_ATTEMPTS:
            self._dead_letter(txn, msg, DeadLetterReason.EXEC_FAIL, "apply retry budget spent")
            report.dead_lettered += 1
            if node.coordinator.commit(txn) is TxnState.COMMITTED:
                self._attempts.pop(msg.id, None)
                return True
            return False
        try:
            body = SyncBody.from_bytes(msg.body)
        except SyncDecodeError as exc:
            self._dead_letter(txn, msg, DeadLetterReason.PARSE_FAIL, str(exc))
            report.dead_lettered += 1
            return node.coordinator.commit(txn) is TxnState.COMMITTED
        if body.origin == node.node_id:
            # echo of our own statement; consume without applying
            log.warning("%s: dropping echoed batch %s", node.node_id, msg.id)
            return node.coordinator.commit(txn) is TxnState.COMMITTED
        forward: list[tuple[int, str]] = []
        counts = Counter()
        for index, (rid, sql) in enumerate(body.records):
            key = (msg.id.origin, msg.id.seq, index)
            if node.store.has_applied(key):
                continue
            outcome, detail, text = self._apply_statement(txn, body.origin, sql)
            node.store.record_applied(
                txn,
                AppliedLogEntry(
                    msg.id.origin, msg.id.seq, index, text, outcome, body.origin, rid,
                    node.env.now(), detail,
                ),
            )
            counts[outcome] += 1
            if outcome is ApplyOutcome.APPLIED:
                forward.append((rid, text))
        if forward and self.role is Role.CENTRAL:
            node.store.register_executed(
                txn, [s for _, s in forward], origin=body.origin,
                origin_ids=[r for r, _ in forward],
            )
        if node.coordinator.commit(txn) is TxnState.COMMITTED:
            self._attempts.pop(msg.id, None)
            report.applied += counts[ApplyOutcome.APPLIED]
            report.skipped += counts[ApplyOutcome.SKIPPED_PERMISSION]
            report.failed += counts[ApplyOutcome.FAILED]
            return True
        # retry after a delay rather than spinning on the same failure
        self._attempts[msg.id] += 1
        report.aborted += 1
        return False

    def _apply_statement(self, txn, origin: str, sql: str) -> tuple[ApplyOutcome, str, str]:
        try:
            stmt = parse_statement(sql)
        except SQLError as exc:
            return ApplyOutcome.FAILED, str(exc), sql
        text = format_statement(stmt)
        if not check_permission(self.policy, origin, stmt):
            return ApplyOutcome.SKIPPED_PERMISSION, f"{stmt.kind} on {stmt.table} denied", text
        try:
            self.node.store.execute(txn, stmt, origin=origin)
        except ExecutionError as exc:
            return ApplyOutcome.FAILED, f"{type(exc).__name__}: {exc}", text
        return ApplyOutcome.APPLIED, "", text

    def _dead_letter(self, txn, msg, reason: DeadLetterReason, detail: str) -> None:
        self.node.store.dead_letter(
            txn,
            DeadLetterEntry(msg.id.origin, msg.id.seq, reason, msg.body, self.node.env.now(), detail),
        )

    # ----------------------------------------------------------- dispatching

    def notify_dispatch(self) -> None:
        """Request a dispatch run; bursts coalesce into at most one follow-up."""
        if self._dispatch_running:
            self._dispatch_again = True
            return
        if self._dispatch_scheduled:
            return
        self._dispatch_scheduled = True
        self.node.env.call_later(0, self._run_dispatch)

    def _run_dispatch(self) -> None:
        self._dispatch_scheduled = False
        if not self.node.alive:
            return
        self._dispatch_running = True
        try:
            self.dispatch()
        finally:
            self._dispatch_running = False
        if self._dispatch_again:
            self._dispatch_again = False
            self.notify_dispatch()

    def destinations(self, origin: str) -> list[str]:
        topo = self.node.topo
        if self.role is Role.BRANCH:
            return [topo.central]
        return [b for b in topo.branches if b != origin]

    def dispatch(self) -> DispatchReport:
        self.dispatch_runs += 1
        report = DispatchReport()
        node = self.node
        for batch in _batches(node.store.pending_records(), BATCH_SIZE):
            origin = batch[0].origin
            body = SyncBody(origin, tuple((r.origin_record_id, r.statement) for r in batch))
            data = body.to_bytes()
            dests = self.destinations(origin)
            txn = node.coordinator.begin(TxnMode.EXTERNAL)
            try:
                for d in dests:
                    node.queues.send(txn, QueueRef(d, SYNC_QUEUE, True), Kind.SYNC, data)
                for r in batch:
                    node.store.mark_dispatched(txn, r.record_id)
            except Exception:
                log.exception("%s: dispatch batch failed", node.node_id)
                node.coordinator.abort(txn)
                report.failed_batches += 1
                continue
            if node.coordinator.commit(txn) is TxnState.COMMITTED:
                report.messages += len(dests)
                report.records += len(batch)
                report.destinations.extend(dests)
            else:
                report.failed_batches += 1
        return report


def _batches(records, size: int):
    batch: list = []
    for r in records:
        if batch and (len(batch) >= size or r.origin != batch[0].origin):
            yield batch
            batch = []
        batch.append(r)
    if batch:
        yield batch


def applied_ids(nodes: Iterable["Node"]) -> dict:
    """{(receiver, origin): [origin record ids in apply order]} for APPLIED entries."""
    out: dict = {}
    for n in nodes:
        for e in n.store.applied:
            if e.outcome is ApplyOutcome.APPLIED:
                out.setdefault((n.node_id, e.origin), []).append(e.origin_record_id)
    return out


def converged(nodes: Iterable["Node"], tables: Iterable[str] | None = None) -> bool:
    nodes = list(nodes)
    busy = [n.node_id for n in nodes if not n.quiescent()]
    if busy:
        raise NotQuiescent(f"nodes not quiescent: {', '.join(busy)}")
    tables = list(tables) if tables is not None else None
    digests = {n.store.state_digest(tables) for n in nodes}
    return len(digests) <= 1

