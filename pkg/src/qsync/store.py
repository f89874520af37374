"""Minimal relational store with a query-table outbox.

The store is a transaction participant (resource id ``"store"``). Writes
are buffered in a per-transaction overlay and reach the committed tables
only through redo ops, which are also what the WAL records, so recovery
replays exactly what live commits applied.

Besides user tables it keeps three system structures:

* the outbox ("query table") of executed statements pending dispatch,
* the applied log of statements received from other nodes,
* dead letters for messages the receiver gave up on.
"""

from __future__ import annotations

import hashlib
import logging
import threading
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Iterable

from qsync.dtx import TxnContext
from qsync.env import Env
from qsync.errors import (
    DuplicateKey,
    LockTimeout,
    NoSuchColumn,
    NoSuchRecord,
    NoSuchTable,
    NotPending,
    TableExists,
    TypeMismatch,
)
from qsync.sql import CreateTable, Delete, Insert, Statement, Update, Value, format_statement

log = logging.getLogger(__name__)

RESOURCE_ID = "store"
LOCK_TIMEOUT_S = 30.0


class RecordStatus(str, Enum):
    PENDING = "PENDING"
    DISPATCHED = "DISPATCHED"


class ApplyOutcome(str, Enum):
    APPLIED = "APPLIED"
    SKIPPED_PERMISSION = "SKIPPED_PERMISSION"
    FAILED = "FAILED"


class DeadLetterReason(str, Enum):
    PARSE_FAIL = "PARSE_FAIL"
    EXEC_FAIL = "EXEC_FAIL"
    PERMISSION_DENIED = "PERMISSION_DENIED"


@dataclass
class QueryTableRecord:
    record_id: int
    statement: str
    origin_txn: int
    status: RecordStatus
    created_at: int
    origin: str
    origin_record_id: int


@dataclass(frozen=True)
class AppliedLogEntry:
    source_origin: str
    source_seq: int
    index: int
    statement: str
    outcome: ApplyOutcome
    origin: str
    origin_record_id: int
    applied_at: int
    detail: str = ""

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.source_origin, self.source_seq, self.index)


@dataclass(frozen=True)
class DeadLetterEntry:
    source_origin: str
    source_seq: int
    reason: DeadLetterReason
    body: bytes
    at: int
    detail: str = ""


@dataclass
class Table:
    name: str
    columns: tuple[tuple[str, str], ...]
    rows: dict = field(default_factory=dict)  # pk -> tuple

    def col_index(self, col: str) -> int:
        for i, (name, _) in enumerate(self.columns):
            if name == col:
                return i
        raise NoSuchColumn(f"{self.name}.{col}")


@dataclass
class _Work:
    created: dict = field(default_factory=dict)  # table -> columns
    overlay: dict = field(default_factory=dict)  # table -> {pk: row | None}
    ops: list = field(default_factory=list)
    next_rid: int | None = None
    marked: set = field(default_factory=set)
    applied_keys: set = field(default_factory=set)
    notify: bool = False


def _check_type(table: Table, idx: int, value: Value) -> None:
    col, typ = table.columns[idx]
    ok = isinstance(value, int) if typ == "INT" else isinstance(value, str)
    if not ok:
        raise TypeMismatch(f"{table.name}.{col} expects {typ}, got {value!r}")


def encode_value(v: Value) -> str:
    return str(v)


class StatementStore:
    resource_id = RESOURCE_ID

    def __init__(self, node: str, env: Env):
        self.node = node
        self.env = env
        self.tables: dict[str, Table] = {}
        self.outbox: dict[int, QueryTableRecord] = {}
        self.applied: list[AppliedLogEntry] = []
        self.dead_letters: list[DeadLetterEntry] = []
        self.key_origin: dict[tuple[str, Value], str] = {}
        self.conflicts: list[tuple[str, Value, str, str]] = []
        self.on_registered: Callable[[], None] | None = None
        self._applied_keys: set[tuple[str, int, int]] = set()
        self._next_rid = 1
        self._lock = threading.RLock()
        self._cv = threading.Condition(self._lock)
        self._writer: int | None = None
        self._work: dict[int, _Work] = {}
        self.fail_next_prepare = False

    # ------------------------------------------------------------ txn access

    def _begin_write(self, txn: TxnContext) -> _Work:
        txn.require_active()
        txn.enlist(self)
        with self._lock:
            if self._writer != txn.txn_id:
                if self._writer is not None and not self._cv.wait_for(
                    lambda: self._writer is None, timeout=LOCK_TIMEOUT_S
                ):
                    raise LockTimeout(f"store writer held by txn {self._writer}")
                self._writer = txn.txn_id
            return self._work.setdefault(txn.txn_id, _Work())

    def _table(self, work: _Work | None, name: str) -> Table:
        if name in self.tables:
            return self.tables[name]
        if work is not None and name in work.created:
            return Table(name, work.created[name])
        raise NoSuchTable(name)

    def _row(self, work: _Work, table: Table, pk):
        ov = work.overlay.get(table.name, {})
        if pk in ov:
            return ov[pk]
        return table.rows.get(pk)

    def _scan(self, work: _Work, table: Table) -> Iterable[tuple]:
        ov = work.overlay.get(table.name, {})
        for pk, row in table.rows.items():
            cur = ov.get(pk, row) if pk in ov else row
            if cur is not None:
                yield cur
        for pk, row in ov.items():
            if pk not in table.rows and row is not None:
                yield row

    # --------------------------------------------------------------- execute

    def execute(self, txn: TxnContext, stmt: Statement, *, origin: str | None = None) -> int:
        """Run ``stmt`` inside ``txn``; effects become visible at commit.

        A failing statement leaves the transaction's earlier effects intact.
        """
        work = self._begin_write(txn)
        origin = origin or self.node
        with self._lock:
            if isinstance(stmt, CreateTable):
                return self._create(work, stmt)
            table = self._table(work, stmt.table)
            if isinstance(stmt, Insert):
                changes = self._insert(work, table, stmt)
            elif isinstance(stmt, Update):
                changes = self._update(work, table, stmt)
            elif isinstance(stmt, Delete):
                changes = self._delete(work, table, stmt)
            else:
                raise TypeError(f"not a statement: {stmt!r}")
            ov = work.overlay.setdefault(table.name, {})
            for pk, row in changes:
                ov[pk] = row
                if row is None:
                    work.ops.append(["del", table.name, pk, origin])
                else:
                    work.ops.append(["put", table.name, list(row), origin])
            return len(changes)

    def _create(self, work: _Work, stmt: CreateTable) -> int:
        existing = None
        if stmt.table in self.tables:
            existing = self.tables[stmt.table].columns
        elif stmt.table in work.created:
            existing = work.created[stmt.table]
        if existing is not None:
            if tuple(existing) == stmt.columns:
                return 0
            raise TableExists(f"{stmt.table} exists with a different schema")
        work.created[stmt.table] = stmt.columns
        work.ops.append(["create", stmt.table, [list(c) for c in stmt.columns]])
        return 0

    def _insert(self, work: _Work, table: Table, stmt: Insert) -> list:
        ncols = len(table.columns)
        if stmt.columns is not None:
            order = [table.col_index(c) for c in stmt.columns]
            if len(order) != ncols or len(set(order)) != ncols:
                raise TypeMismatch(f"INSERT must name each of the {ncols} columns of {table.name} once")
        else:
            order = list(range(ncols))
        changes: list = []
        seen = set()
        for vals in stmt.rows:
            if len(vals) != ncols:
                raise TypeMismatch(f"{table.name} has {ncols} columns, got {len(vals)} values")
            row = [None] * ncols
            for idx, v in zip(order, vals):
                _check_type(table, idx, v)
                row[idx] = v
            pk = row[0]
            if pk in seen or self._row(work, table, pk) is not None:
                raise DuplicateKey(f"{table.name} key {pk!r}")
            seen.add(pk)
            changes.append((pk, tuple(row)))
        return changes

    def _matches(self, table: Table, where) -> Callable[[tuple], bool]:
        preds = [(table.col_index(c), v) for c, v in where]
        return lambda row: all(row[i] == v for i, v in preds)

    def _targets(self, work: _Work, table: Table, where) -> list[tuple]:
        match = self._matches(table, where)
        pk_vals = [v for c, v in where if c == table.columns[0][0]]
        if pk_vals:
            row = self._row(work, table, pk_vals[0])
            return [row] if row is not None and match(row) else []
        return [r for r in self._scan(work, table) if match(r)]

    def _update(self, work: _Work, table: Table, stmt: Update) -> list:
        assigns = [(table.col_index(c), v) for c, v in stmt.assignments]
        for idx, v in assigns:
            _check_type(table, idx, v)
            if idx == 0:
                raise TypeMismatch(f"primary key {table.columns[0][0]} cannot be updated")
        changes = []
        for row in self._targets(work, table, stmt.where):
            new = list(row)
            for idx, v in assigns:
                new[idx] = v
            changes.append((row[0], tuple(new)))
        return changes

    def _delete(self, work: _Work, table: Table, stmt: Delete) -> list:
        return [(row[0], None) for row in self._targets(work, table, stmt.where)]

    # ---------------------------------------------------------------- outbox

    def register_executed(
        self,
        txn: TxnContext,
        stmts: list,
        *,
        origin: str | None = None,
        origin_ids: list[int] | None = None,
    ) -> list[int]:
        """Append PENDING outbox rows in the same transaction as the data change."""
        work = self._begin_write(txn)
        origin = origin or self.node
        with self._lock:
            if work.next_rid is None:
                work.next_rid = self._next_rid
            rids = []
            for i, s in enumerate(stmts):
                text = s if isinstance(s, str) else format_statement(s)
                rid = work.next_rid
                work.next_rid += 1
                oid = origin_ids[i] if origin_ids is not None else rid
                work.ops.append(
                    ["outbox", rid, text, txn.txn_id, self.env.now(), origin, oid]
                )
                rids.append(rid)
            if rids and not work.notify:
                work.notify = True
                if self.on_registered is not None:
                    txn.after_commit(self.on_registered)
            return rids

    def pending_records(self) -> list[QueryTableRecord]:
        with self._lock:
            return [r for r in self.outbox.values() if r.status is RecordStatus.PENDING]

    def mark_dispatched(self, txn: TxnContext, record_id: int) -> None:
        work = self._begin_write(txn)
        with self._lock:
            rec = self.outbox.get(record_id)
            if rec is None:
                raise NoSuchRecord(str(record_id))
            if rec.status is not RecordStatus.PENDING or record_id in work.marked:
                raise NotPending(str(record_id))
            work.marked.add(record_id)
            work.ops.append(["mark", record_id])

    # ------------------------------------------------------ applied / dead

    def has_applied(self, key: tuple[str, int, int]) -> bool:
        return key in self._applied_keys

    def record_applied(self, txn: TxnContext, entry: AppliedLogEntry) -> bool:
        """Log an apply outcome; returns False if the key was already logged."""
        work = self._begin_write(txn)
        with self._lock:
            if entry.key in self._applied_keys or entry.key in work.applied_keys:
                return False
            work.applied_keys.add(entry.key)
            d = asdict(entry)
            d["outcome"] = entry.outcome.value
            work.ops.append(["applied", d])
            return True

    def dead_letter(self, txn: TxnContext, entry: DeadLetterEntry) -> None:
        work = self._begin_write(txn)
        with self._lock:
            work.ops.append(
                ["dead", entry.source_origin, entry.source_seq, entry.reason.value,
                 entry.body.hex(), entry.at, entry.detail]
            )

    # ----------------------------------------------------------------- reads

    def table_names(self) -> list[str]:
        return sorted(self.tables)

    def rows(self, table: str) -> list[tuple]:
        t = self.tables.get(table)
        if t is None:
            raise NoSuchTable(table)
        return [t.rows[k] for k in sorted(t.rows, key=_sort_key)]

    def dump_tsv(self, table: str) -> str:
        t = self.tables.get(table)
        if t is None:
            raise NoSuchTable(table)
        lines = ["\t".join(c for c, _ in t.columns)]
        lines += ["\t".join(encode_value(v) for v in row) for row in self.rows(table)]
        return "\n".join(lines) + "\n"

    def state_digest(self, table_filter: Iterable[str] | None = None) -> str:
        with self._lock:
            return table_digest(
                {n: (t.columns, t.rows) for n, t in self.tables.items()}, table_filter
            )

    # ------------------------------------------------------ participant hooks

    def prepare(self, txn: TxnContext) -> list | None:
        if self.fail_next_prepare:
            self.fail_next_prepare = False
            return None
        work = self._work.get(txn.txn_id)
        return list(work.ops) if work is not None else []

    def commit(self, txn: TxnContext, ops: list) -> None:
        with self._lock:
            self._apply(ops)
            self._finish(txn)

    def abort(self, txn: TxnContext) -> None:
        with self._lock:
            self._finish(txn)

    def _finish(self, txn: TxnContext) -> None:
        self._work.pop(txn.txn_id, None)
        if self._writer == txn.txn_id:
            self._writer = None
            self._cv.notify_all()

    def redo(self, ops: list) -> None:
        with self._lock:
            self._apply(ops)

    def _apply(self, ops: list) -> None:
        for op in ops:
            tag = op[0]
            if tag == "create":
                _, name, cols = op
                if name not in self.tables:
                    self.tables[name] = Table(name, tuple(tuple(c) for c in cols))
            elif tag == "put":
                _, name, row, origin = op
                self.tables[name].rows[row[0]] = tuple(row)
                self._note_origin(name, row[0], origin)
            elif tag == "del":
                _, name, pk, origin = op
                self.tables[name].rows.pop(pk, None)
                self._note_origin(name, pk, origin)
            elif tag == "outbox":
                _, rid, text, txn_id, at, origin, oid = op
                self.outbox[rid] = QueryTableRecord(
                    rid, text, txn_id, RecordStatus.PENDING, at, origin, oid
                )
                self._next_rid = max(self._next_rid, rid + 1)
            elif tag == "mark":
                self.outbox[op[1]].status = RecordStatus.DISPATCHED
            elif tag == "applied":
                d = dict(op[1])
                d["outcome"] = ApplyOutcome(d["outcome"])
                entry = AppliedLogEntry(**d)
                self.applied.append(entry)
                self._applied_keys.add(entry.key)
            elif tag == "dead":
                _, origin, seq, reason, body, at, detail = op
                self.dead_letters.append(
                    DeadLetterEntry(origin, seq, DeadLetterReason(reason), bytes.fromhex(body),
                                    at, detail)
                )
            else:
                raise ValueError(f"unknown store op {tag!r}")

    def _note_origin(self, table: str, pk, origin: str) -> None:
        prev = self.key_origin.get((table, pk))
        if prev is not None and prev != origin:
            self.conflicts.append((table, pk, prev, origin))
            log.warning(
                "%s: independence violated on %s[%r]: written by %s and %s",
                self.node, table, pk, prev, origin,
            )
        self.key_origin[(table, pk)] = origin


def _sort_key(v):
    return (0, v, "") if isinstance(v, int) else (1, 0, v)


def table_digest(tables: dict, table_filter: Iterable[str] | None = None) -> str:
    """SHA-256 over the canonical text of ``{name: (columns, {pk: row})}``.

    Rows are ``table 0x1F key 0x1F col=value 0x1F ...`` joined by 0x1E, in
    sorted table then sorted key order.
    """
    names = sorted(tables) if table_filter is None else sorted(set(table_filter))
    parts = []
    for name in names:
        if name not in tables:
            continue
        columns, rows = tables[name]
        for pk in sorted(rows, key=_sort_key):
            row = rows[pk]
            fields = [name, encode_value(pk)]
            fields += [f"{c}={encode_value(v)}" for (c, _), v in zip(columns, row)]
            parts.append("\x1f".join(fields))
    return hashlib.sha256("\x1e".join(parts).encode("utf-8")).hexdigest()
