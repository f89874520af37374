"""Node-local transaction coordinator.

INTERNAL transactions touch one resource and commit with a single log
write. EXTERNAL transactions run two-phase commit over every enlisted
participant: one PREPARED record per participant, a COMMIT decision record,
in-memory apply, then an END marker. Recovery is presumed-abort.
"""

from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol

from qsync.errors import TooManyParticipants, TxnAborted, TxnFinished, TxnNotActive
from qsync.wal import WAL, RecordType

log = logging.getLogger(__name__)


class TxnMode(str, Enum):
    INTERNAL = "INTERNAL"
    EXTERNAL = "EXTERNAL"


class TxnState(str, Enum):
    ACTIVE = "ACTIVE"
    PREPARING = "PREPARING"
    COMMITTED = "COMMITTED"
    ABORTED = "ABORTED"


class Participant(Protocol):
    resource_id: str

    def prepare(self, txn: "TxnContext") -> list | None:
        """Return the redo ops for ``txn`` or None to vote NO."""

    def commit(self, txn: "TxnContext", ops: list) -> None: ...

    def abort(self, txn: "TxnContext") -> None: ...

    def redo(self, ops: list) -> None: ...


@dataclass(eq=False)
class TxnContext:
    txn_id: int
    mode: TxnMode
    coordinator: "Coordinator" = field(repr=False)
    participants: list = field(default_factory=list)
    state: TxnState = TxnState.ACTIVE
    _after_commit: list = field(default_factory=list, repr=False)

    @property
    def active(self) -> bool:
        return self.state is TxnState.ACTIVE

    def require_active(self) -> None:
        if self.state is TxnState.ABORTED:
            raise TxnAborted(f"txn {self.txn_id} aborted")
        if self.state is not TxnState.ACTIVE:
            raise TxnNotActive(f"txn {self.txn_id} is {self.state.value}")

    def enlist(self, participant) -> None:
        self.coordinator.enlist(self, participant)

    def after_commit(self, fn: Callable[[], None]) -> None:
        self._after_commit.append(fn)


class Coordinator:
    def __init__(self, wal: WAL, participants: dict[str, Participant] | None = None):
        self.wal = wal
        self.participants: dict[str, Participant] = dict(participants or {})
        self._ids = itertools.count(1)
        self._lock = threading.RLock()

    def register(self, participant: Participant) -> None:
        self.participants[participant.resource_id] = participant

    def begin(self, mode: TxnMode = TxnMode.EXTERNAL) -> TxnContext:
        with self._lock:
            return TxnContext(next(self._ids), TxnMode(mode), self)

    def enlist(self, txn: TxnContext, participant: Participant) -> None:
        txn.require_active()
        if participant in txn.participants:
            return
        if txn.mode is TxnMode.INTERNAL and txn.participants:
            raise TooManyParticipants(
                f"internal txn {txn.txn_id} already bound to {txn.participants[0].resource_id}"
            )
        txn.participants.append(participant)

    def commit(self, txn: TxnContext) -> TxnState:
        with self._lock:
            txn.require_active()
            if not txn.participants:
                txn.state = TxnState.COMMITTED
            elif txn.mode is TxnMode.INTERNAL:
                self._commit_internal(txn)
            else:
                self._commit_external(txn)
        if txn.state is TxnState.COMMITTED:
            for fn in txn._after_commit:
                fn()
        return txn.state

    def _vote(self, p: Participant, txn: TxnContext):
        try:
            return p.prepare(txn)
        except Exception:
            log.exception("participant %s failed to prepare txn %d", p.resource_id, txn.txn_id)
            return None

    def _commit_internal(self, txn: TxnContext) -> None:
        (p,) = txn.participants
        txn.state = TxnState.PREPARING
        ops = self._vote(p, txn)
        if ops is None:
            self._rollback(txn)
            return
        self.wal.append(RecordType.INTERNAL, {"txn": txn.txn_id, "rid": p.resource_id, "ops": ops})
        txn.state = TxnState.COMMITTED
        p.commit(txn, ops)

    def _commit_external(self, txn: TxnContext) -> None:
        txn.state = TxnState.PREPARING
        prepared = []
        for p in txn.participants:
            ops = self._vote(p, txn)
            if ops is None:
                if prepared:
                    self.wal.append(RecordType.ABORT, {"txn": txn.txn_id})
                self._rollback(txn)
                return
            self.wal.append(
                RecordType.PREPARED, {"txn": txn.txn_id, "rid": p.resource_id, "ops": ops}
            )
            prepared.append((p, ops))
        self.wal.append(
            RecordType.COMMIT,
            {"txn": txn.txn_id, "parts": [p.resource_id for p in txn.participants]},
        )
        txn.state = TxnState.COMMITTED
        for p, ops in prepared:
            p.commit(txn, ops)
        self.wal.append(RecordType.END, {"txn": txn.txn_id})

    def _rollback(self, txn: TxnContext) -> None:
        txn.state = TxnState.ABORTED
        for p in txn.participants:
            p.abort(txn)

    def abort(self, txn: TxnContext) -> None:
        with self._lock:
            if txn.state not in (TxnState.ACTIVE, TxnState.PREPARING):
                raise TxnFinished(f"txn {txn.txn_id} is {txn.state.value}")
            self._rollback(txn)

    def recover(self) -> int:
        """Rebuild participant state from the log and resolve in-doubt txns.

        Returns the number of transactions that had to be resolved, i.e.
        ones with PREPARED records but no END/ABORT marker.
        """
        with self._lock:
            prepared: dict[int, list[tuple[str, list]]] = {}
            committed: set[int] = set()
            finished: set[int] = set()
            max_id = 0
            for rtype, rec in self.wal.records():
                txn_id = rec.get("txn", 0)
                max_id = max(max_id, txn_id)
                if rtype is RecordType.AUTO or rtype is RecordType.INTERNAL:
                    self.participants[rec["rid"]].redo(rec["ops"])
                elif rtype is RecordType.PREPARED:
                    prepared.setdefault(txn_id, []).append((rec["rid"], rec["ops"]))
                elif rtype is RecordType.COMMIT:
                    committed.add(txn_id)
                    for rid, ops in prepared.get(txn_id, ()):
                        self.participants[rid].redo(ops)
                else:
                    finished.add(txn_id)
            resolved = 0
            for txn_id in prepared:
                if txn_id in finished:
                    continue
                if txn_id in committed:
                    self.wal.append(RecordType.END, {"txn": txn_id})
                else:
                    self.wal.append(RecordType.ABORT, {"txn": txn_id})
                resolved += 1
            self._ids = itertools.count(max_id + 1)
            return resolved
