"""Binary frame codec used on every transport.

Layout, all integers big-endian::

    magic    u32   0x514D5351 ("QMSQ")
    version  u8    1
    kind     u8
    flags    u8    bit 0 = transactional message, bit 1 = transactional queue
    seq      u64
    sent_at  u64
    origin, dest_node, dest_queue   u8 length + ASCII
    hop_count u8, then each hop as u8 length + ASCII
    body_len u32, body
    sha256 of every preceding byte (32 bytes)

Stream transports prefix each frame with its u32 length.
"""

from __future__ import annotations

import hashlib
import struct

from qsync.errors import BadMagic, BadVersion, BodyHashMismatch, FrameError, Truncated
from qsync.message import MAX_BODY, Kind, Message, MessageId, QueueRef

MAGIC = 0x514D5351
VERSION = 1
HASH_LEN = 32

_FIXED = struct.Struct(">IBBBQQ")
_U8 = struct.Struct(">B")
_U32 = struct.Struct(">I")

FLAG_TXN = 0x01
FLAG_QTXN = 0x02


def _str8(value: str) -> bytes:
    raw = value.encode("ascii")
    if len(raw) > 255:
        raise FrameError(f"identifier too long: {value!r}")
    return _U8.pack(len(raw)) + raw


def encode_frame(msg: Message) -> bytes:
    flags = (FLAG_TXN if msg.transactional else 0) | (
        FLAG_QTXN if msg.dest_queue.transactional else 0
    )
    if len(msg.hops) > 255:
        raise FrameError("too many hops")
    parts = [
        _FIXED.pack(MAGIC, VERSION, int(msg.kind), flags, msg.id.seq, msg.sent_at),
        _str8(msg.id.origin),
        _str8(msg.dest_queue.node),
        _str8(msg.dest_queue.name),
        _U8.pack(len(msg.hops)),
        *(_str8(h) for h in msg.hops),
        _U32.pack(len(msg.body)),
        msg.body,
    ]
    head = b"".join(parts)
    return head + hashlib.sha256(head).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise Truncated(f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def str8(self) -> str:
        (n,) = _U8.unpack(self.take(1))
        try:
            return bytes(self.take(n)).decode("ascii")
        except UnicodeDecodeError:
            raise FrameError("non-ASCII identifier") from None


def decode_frame(data: bytes) -> Message:
    r = _Reader(data)
    if len(data) >= 4 and _U32.unpack_from(data)[0] != MAGIC:
        raise BadMagic(f"bad magic {bytes(data[:4]).hex()}")
    magic, version, kind, flags, seq, sent_at = _FIXED.unpack(r.take(_FIXED.size))
    if magic != MAGIC:
        raise BadMagic(hex(magic))
    if version != VERSION:
        raise BadVersion(f"unsupported frame version {version}")
    origin = r.str8()
    node = r.str8()
    queue = r.str8()
    (nhops,) = _U8.unpack(r.take(1))
    hops = tuple(r.str8() for _ in range(nhops))
    (blen,) = _U32.unpack(r.take(4))
    if blen > MAX_BODY:
        raise FrameError(f"body length {blen} exceeds limit")
    body = bytes(r.take(blen))
    end = r.pos
    digest = bytes(r.take(HASH_LEN))
    if r.pos != len(data):
        raise FrameError(f"{len(data) - r.pos} trailing bytes after frame")
    if hashlib.sha256(r.data[:end]).digest() != digest:
        raise BodyHashMismatch("frame hash does not match contents")
    try:
        kind_enum = Kind(kind)
    except ValueError:
        raise FrameError(f"unknown kind {kind}") from None
    return Message(
        id=MessageId(origin, seq),
        kind=kind_enum,
        body=body,
        transactional=bool(flags & FLAG_TXN),
        sent_at=sent_at,
        dest_queue=QueueRef(node, queue, bool(flags & FLAG_QTXN)),
        hops=hops,
    )


def pack_stream(frame: bytes) -> bytes:
    return _U32.pack(len(frame)) + frame


def split_stream(buf: bytearray) -> list[bytes]:
    """Pop every complete length-prefixed frame off the front of ``buf``."""
    out = []
    while len(buf) >= 4:
        (n,) = _U32.unpack_from(buf)
        if n > MAX_BODY + 4096:
            raise FrameError(f"stream frame length {n} too large")
        if len(buf) < 4 + n:
            break
        out.append(bytes(buf[4 : 4 + n]))
        del buf[: 4 + n]
    return out
