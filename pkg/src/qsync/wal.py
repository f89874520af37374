"""Per-node write-ahead log.

Every durable fact about a node (queues, messages, table rows, outbox rows,
transaction decisions) is a record in this log; in-memory state is a pure
function of the record sequence.

Record layout: 4-byte big-endian payload length, 1 type byte, payload.
Payloads are compact JSON objects.
"""

from __future__ import annotations

import json
import os
import struct
import threading
from enum import IntEnum
from pathlib import Path
from typing import Iterator

from qsync.errors import CorruptLog, SimulatedCrash

_HEADER = struct.Struct(">IB")


class RecordType(IntEnum):
    AUTO = 1  # non-transactional participant ops
    PREPARED = 2
    COMMIT = 3
    ABORT = 4
    END = 5
    INTERNAL = 6  # single-participant commit, no prepare round


def encode_record(rtype: int, payload: dict) -> bytes:
    data = json.dumps(payload, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return _HEADER.pack(len(data), rtype) + data


class WAL:
    """Append-only record log, file backed or in memory.

    ``arm_crash(n)`` makes the append after ``n`` more successful appends
    raise :class:`SimulatedCrash`; with ``torn=True`` half of that record
    reaches storage first.
    """

    def __init__(self, path: str | os.PathLike | None = None, *, fsync: bool = False):
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self.appends = 0
        self._crash_in: int | None = None
        self._torn = False
        self._lock = threading.Lock()
        if self.path is None:
            self._mem = bytearray()
            self._fd = None
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._mem = None
            self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT | os.O_APPEND, 0o644)

    def arm_crash(self, after: int, *, torn: bool = False) -> None:
        self._crash_in = after
        self._torn = torn

    def disarm(self) -> None:
        self._crash_in = None

    def append(self, rtype: RecordType, payload: dict) -> None:
        rec = encode_record(rtype, payload)
        with self._lock:
            if self._crash_in is not None:
                if self._crash_in <= 0:
                    self._crash_in = None
                    if self._torn:
                        self._write(rec[: max(1, len(rec) // 2)])
                    raise SimulatedCrash(f"crash before append #{self.appends + 1}")
                self._crash_in -= 1
            self._write(rec)
            self.appends += 1

    def _write(self, data: bytes) -> None:
        if self._mem is not None:
            self._mem += data
            return
        os.write(self._fd, data)
        if self.fsync:
            os.fsync(self._fd)

    def contents(self) -> bytes:
        if self._mem is not None:
            return bytes(self._mem)
        with open(self.path, "rb") as fh:
            return fh.read()

    def records(self) -> Iterator[tuple[RecordType, dict]]:
        """Decode all complete records; a torn tail is cut off the log."""
        data = self.contents()
        pos = 0
        while pos < len(data):
            if len(data) - pos < _HEADER.size:
                break
            length, rtype = _HEADER.unpack_from(data, pos)
            end = pos + _HEADER.size + length
            if end > len(data):
                break
            try:
                kind = RecordType(rtype)
            except ValueError:
                raise CorruptLog(f"unknown record type {rtype} at offset {pos}") from None
            try:
                payload = json.loads(data[pos + _HEADER.size : end])
            except ValueError as exc:
                raise CorruptLog(f"undecodable record at offset {pos}: {exc}") from None
            yield kind, payload
            pos = end
        if pos < len(data):
            self._truncate(pos)

    def _truncate(self, size: int) -> None:
        if self._mem is not None:
            del self._mem[size:]
        else:
            os.ftruncate(self._fd, size)

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
