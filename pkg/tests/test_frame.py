import pytest
from hypothesis import given
from hypothesis import strategies as st

from qsync.errors import BadMagic, BadVersion, BodyHashMismatch, FrameError, Truncated
from qsync.frame import MAGIC, decode_frame, encode_frame, pack_stream, split_stream
from qsync.message import Kind, Message, MessageId, QueueRef

ids = st.text(alphabet="ABCxyz019_-", min_size=1, max_size=32)

messages = st.builds(
    Message,
    id=st.builds(MessageId, ids, st.integers(0, 2**64 - 1)),
    kind=st.sampled_from(list(Kind)),
    body=st.binary(max_size=2048),
    transactional=st.booleans(),
    sent_at=st.integers(0, 2**64 - 1),
    dest_queue=st.builds(QueueRef, ids, ids, st.booleans()),
    hops=st.lists(ids, max_size=4).map(tuple),
)


@given(messages)
def test_round_trip(msg):
    assert decode_frame(encode_frame(msg)) == msg


@given(messages, st.data())
def test_any_single_byte_flip_is_detected(msg, data):
    frame = bytearray(encode_frame(msg))
    i = data.draw(st.integers(0, len(frame) - 1))
    frame[i] ^= data.draw(st.integers(1, 255))
    with pytest.raises(FrameError):
        decode_frame(bytes(frame))


@given(messages, st.data())
def test_any_truncation_is_rejected(msg, data):
    frame = encode_frame(msg)
    cut = data.draw(st.integers(0, len(frame) - 1))
    with pytest.raises(FrameError):
        decode_frame(frame[:cut])


def sample():
    return Message(
        MessageId("B1", 7), Kind.SYNC, b"hello body", True, 1234,
        QueueRef("C", "sync_in", True), ("B1",),
    )


def test_layout_header():
    frame = encode_frame(sample())
    assert frame[:4] == MAGIC.to_bytes(4, "big") == b"QMSQ"
    assert frame[4] == 1
    assert frame[5] == Kind.SYNC
    assert frame[7:15] == (7).to_bytes(8, "big")


def test_truncated():
    frame = encode_frame(sample())
    with pytest.raises(Truncated):
        decode_frame(frame[:-1])
    with pytest.raises(Truncated):
        decode_frame(frame[:10])


def test_flipped_body_byte():
    frame = bytearray(encode_frame(sample()))
    pos = frame.index(b"hello body")
    frame[pos] ^= 0x01
    with pytest.raises(BodyHashMismatch):
        decode_frame(bytes(frame))


def test_bad_magic_and_version():
    frame = bytearray(encode_frame(sample()))
    with pytest.raises(BadMagic):
        decode_frame(b"XXXX" + bytes(frame[4:]))
    frame[4] = 2
    with pytest.raises(BadVersion):
        decode_frame(bytes(frame))


def test_trailing_garbage_rejected():
    with pytest.raises(FrameError):
        decode_frame(encode_frame(sample()) + b"\x00")


def test_stream_split_partial():
    a, b = encode_frame(sample()), encode_frame(sample())
    wire = pack_stream(a) + pack_stream(b)
    buf = bytearray(wire[:-5])
    assert split_stream(buf) == [a]
    buf += wire[-5:]
    assert split_stream(buf) == [b]
    assert buf == bytearray()


def test_stream_oversize_length_rejected():
    with pytest.raises(FrameError):
        split_stream(bytearray(b"\xff\xff\xff\xff"))
