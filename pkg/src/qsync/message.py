"""Message value types shared by the queue layer, transports and codecs."""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from enum import Enum, IntEnum

MAX_BODY = 4 * 1024 * 1024


class Kind(IntEnum):
    SYNC = 1
    MAIL = 2
    ACK = 3
    # admin control channel; 0x80-0xFF are reserved for it
    CONTROL_REQUEST = 0x80
    CONTROL_RESPONSE = 0x81


class LinkStatus(str, Enum):
    ONLINE = "ONLINE"
    OFFLINE = "OFFLINE"


@dataclass(frozen=True, order=True)
class MessageId:
    origin: str
    seq: int

    def __str__(self) -> str:
        return f"{self.origin}:{self.seq}"


@dataclass(frozen=True)
class QueueRef:
    node: str
    name: str
    transactional: bool

    def __str__(self) -> str:
        return f"{self.node}/{self.name}"


@dataclass(frozen=True)
class Message:
    id: MessageId
    kind: Kind
    body: bytes
    transactional: bool
    sent_at: int
    dest_queue: QueueRef
    hops: tuple[str, ...] = field(default=())

    @property
    def stream(self) -> tuple[str, str, str]:
        """Dedup/ordering channel: (origin, destination node, destination queue)."""
        return (self.id.origin, self.dest_queue.node, self.dest_queue.name)

    def to_dict(self) -> dict:
        return {
            "origin": self.id.origin,
            "seq": self.id.seq,
            "kind": int(self.kind),
            "body": base64.b64encode(self.body).decode("ascii"),
            "txn": self.transactional,
            "at": self.sent_at,
            "node": self.dest_queue.node,
            "queue": self.dest_queue.name,
            "qtxn": self.dest_queue.transactional,
            "hops": list(self.hops),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Message":
        return cls(
            id=MessageId(d["origin"], d["seq"]),
            kind=Kind(d["kind"]),
            body=base64.b64decode(d["body"]),
            transactional=d["txn"],
            sent_at=d["at"],
            dest_queue=QueueRef(d["node"], d["queue"], d["qtxn"]),
            hops=tuple(d["hops"]),
        )
