import os

import pytest

from qsync.errors import DecryptFailure, TooLarge, UnknownRecipient
from qsync.mail import MailEnvelope, decrypt_body, encrypt_body
from qsync.queues import Direction
from qsync.sim import Simulator
from qsync.topology import generate_topology, load_topology

KEY = bytes(range(32))
TOPO = load_topology(generate_topology(3, mail_key=KEY))


def mail(to="B2", **kw):
    kw.setdefault("subject", "hello")
    kw.setdefault("body", "see attached")
    return MailEnvelope("", to, **kw)


@pytest.fixture
def sim():
    return Simulator(TOPO, seed=2)


def test_branch_to_branch_relays_via_central(sim):
    mid = sim.node("B1").mail.send_mail(mail("B2", attachments=(("a.bin", b"\x00\x01"),)))
    sim.run_until_quiet(60_000)
    (got,) = sim.node("B2").mail.fetch_inbox()
    assert got.mail_id == mid
    assert got.hops == ("B1", "C", "B2")
    assert got.from_node == "B1" and got.attachments == (("a.bin", b"\x00\x01"),)


def test_branch_to_central_is_direct(sim):
    sim.node("B1").mail.send_mail(mail("C"))
    sim.run_until_quiet(60_000)
    (got,) = sim.node("C").mail.fetch_inbox()
    assert got.hops == ("B1", "C")


def test_unknown_recipient(sim):
    with pytest.raises(UnknownRecipient):
        sim.node("B1").mail.send_mail(mail("B9"))


def test_too_large(sim):
    big = os.urandom(5 * 1024 * 1024)
    with pytest.raises(TooLarge):
        sim.node("B1").mail.send_mail(mail(attachments=(("big", big),)))
    assert sim.node("B1").queues.journal_list() == []


def test_validation(sim):
    with pytest.raises(ValueError):
        sim.node("B1").mail.send_mail(mail(subject="s" * 257))
    with pytest.raises(ValueError):
        sim.node("B1").mail.send_mail(mail(attachments=(("x", b"1"), ("x", b"2"))))


def test_seal_round_trip_and_fresh_nonce():
    env = mail(attachments=(("f", b"payload"),))
    a, b = encrypt_body(KEY, env), encrypt_body(KEY, env)
    assert a != b
    assert b"payload" not in a
    assert decrypt_body(KEY, a) == env


def test_tamper_and_wrong_key():
    sealed = bytearray(encrypt_body(KEY, mail()))
    with pytest.raises(DecryptFailure):
        decrypt_body(bytes(32), bytes(sealed))
    # flip a base64 character inside the ciphertext
    i = sealed.index(b'"ct_b64":"') + 12
    sealed[i] = ord("A") if sealed[i] != ord("A") else ord("B")
    with pytest.raises(DecryptFailure):
        decrypt_body(KEY, bytes(sealed))
    with pytest.raises(DecryptFailure):
        decrypt_body(KEY, b"not json")


def test_plaintext_mail(sim):
    sim.node("B1").mail.send_mail(mail("C", encrypted=False))
    sim.run_until_quiet(60_000)
    (got,) = sim.node("C").mail.fetch_inbox()
    assert got.encrypted is False and got.body == "see attached"


def test_fetch_idempotent_until_ack(sim):
    sim.node("B1").mail.send_mail(mail("B3"))
    sim.run_until_quiet(60_000)
    b3 = sim.node("B3").mail
    first = b3.fetch_inbox()
    assert b3.fetch_inbox() == first and len(first) == 1
    assert sim.node("B3").queues.journal_list(direction=Direction.RECEIVED) == []
    assert b3.ack_mail(first[0].mail_id)
    assert b3.fetch_inbox() == []
    assert not b3.ack_mail(first[0].mail_id)
    (rec,) = sim.node("B3").queues.journal_list(direction=Direction.RECEIVED)
    assert rec.message_id == first[0].mail_id
    (sent,) = sim.node("B1").queues.journal_list(direction=Direction.SENT)
    assert sent.message_id == first[0].mail_id
