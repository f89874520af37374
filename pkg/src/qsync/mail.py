"""Enterprise mail over the queue layer.

Mail between two branches always relays through the central node. Bodies
are optionally sealed with AES-256-GCM under the enterprise key.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from qsync.dtx import TxnMode, TxnState
from qsync.errors import DecryptFailure, TooLarge, TxnAborted, UnknownNode, UnknownRecipient
from qsync.message import MAX_BODY, Kind, MessageId, QueueRef
from qsync.queues import ReceiveMode
from qsync.topology import Role

if TYPE_CHECKING:
    from qsync.node import Node

MAIL_QUEUE = "mail_in"
ALG = "AES-256-GCM"
_AAD = b"qsync-mail-v1"
MAX_SUBJECT = 256


@dataclass(frozen=True)
class MailEnvelope:
    from_node: str
    to_node: str
    subject: str
    body: str
    attachments: tuple[tuple[str, bytes], ...] = ()
    encrypted: bool = True
    mail_id: MessageId | None = field(default=None, compare=False)
    hops: tuple[str, ...] = field(default=(), compare=False)

    def validate(self) -> None:
        if len(self.subject.encode("utf-8")) > MAX_SUBJECT:
            raise ValueError(f"subject longer than {MAX_SUBJECT} bytes")
        names = [n for n, _ in self.attachments]
        if len(set(names)) != len(names):
            raise ValueError("attachment names must be unique")

    def to_json(self) -> bytes:
        doc = {
            "from": self.from_node,
            "to": self.to_node,
            "subject": self.subject,
            "body": self.body,
            "attachments": [
                {"name": n, "b64": base64.b64encode(data).decode("ascii")}
                for n, data in self.attachments
            ],
        }
        return json.dumps(doc, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    @classmethod
    def from_json(cls, data: bytes, *, encrypted: bool) -> "MailEnvelope":
        doc = json.loads(data)
        return cls(
            doc["from"],
            doc["to"],
            doc["subject"],
            doc["body"],
            tuple((a["name"], base64.b64decode(a["b64"])) for a in doc["attachments"]),
            encrypted,
        )


def encrypt_body(key: bytes, env: MailEnvelope) -> bytes:
    nonce = os.urandom(12)
    ct = AESGCM(key).encrypt(nonce, env.to_json(), _AAD)
    wrapper = {
        "alg": ALG,
        "nonce_b64": base64.b64encode(nonce).decode("ascii"),
        "ct_b64": base64.b64encode(ct).decode("ascii"),
    }
    return json.dumps(wrapper, separators=(",", ":")).encode("ascii")


def decrypt_body(key: bytes, data: bytes) -> MailEnvelope:
    try:
        wrapper = json.loads(data)
        if wrapper.get("alg") != ALG:
            raise DecryptFailure(f"unsupported algorithm {wrapper.get('alg')!r}")
        nonce = base64.b64decode(wrapper["nonce_b64"], validate=True)
        ct = base64.b64decode(wrapper["ct_b64"], validate=True)
        plain = AESGCM(key).decrypt(nonce, ct, _AAD)
    except DecryptFailure:
        raise
    except (InvalidTag, ValueError, KeyError, TypeError, AttributeError) as exc:
        raise DecryptFailure(f"cannot open mail: {type(exc).__name__}") from None
    return MailEnvelope.from_json(plain, encrypted=True)


def decode_mail_body(key: bytes | None, data: bytes) -> MailEnvelope:
    if data.startswith(b'{"alg"'):
        if key is None:
            raise DecryptFailure("no mail key configured")
        return decrypt_body(key, data)
    return MailEnvelope.from_json(data, encrypted=False)


class MailService:
    def __init__(self, node: "Node", key: bytes | None = None):
        self.node = node
        self.key = key

    def _route_via(self, to: str) -> str | None:
        topo = self.node.topo
        me = self.node.node_id
        if to != me and topo.role(me) is Role.BRANCH and topo.role(to) is Role.BRANCH:
            return topo.central
        return None

    def send_mail(self, env: MailEnvelope) -> MessageId:
        node = self.node
        try:
            node.topo.node(env.to_node)
        except UnknownNode:
            raise UnknownRecipient(env.to_node) from None
        env = replace(env, from_node=node.node_id)
        env.validate()
        plain = env.to_json()
        if len(plain) > MAX_BODY:
            raise TooLarge(f"envelope is {len(plain)} bytes, limit {MAX_BODY}")
        if env.encrypted:
            if self.key is None:
                raise ValueError("encryption requested but no mail key configured")
            data = encrypt_body(self.key, env)
        else:
            data = plain
        if len(data) > MAX_BODY:
            raise TooLarge(f"sealed envelope is {len(data)} bytes, limit {MAX_BODY}")
        txn = node.coordinator.begin(TxnMode.INTERNAL)
        mid = node.queues.send(
            txn, QueueRef(env.to_node, MAIL_QUEUE, True), Kind.MAIL, data,
            via=self._route_via(env.to_node),
        )
        if node.coordinator.commit(txn) is not TxnState.COMMITTED:
            raise TxnAborted("mail send aborted")
        return mid

    def fetch_inbox(self) -> list[MailEnvelope]:
        out = []
        for msg in self.node.queues.messages(MAIL_QUEUE):
            env = decode_mail_body(self.key, msg.body)
            out.append(replace(env, mail_id=msg.id, hops=msg.hops))
        return out

    def ack_mail(self, mail_id: MessageId) -> bool:
        node = self.node
        txn = node.coordinator.begin(TxnMode.INTERNAL)
        msg = node.queues.receive(txn, MAIL_QUEUE, ReceiveMode.REMOVE, message_id=mail_id)
        if msg is None:
            node.coordinator.abort(txn)
            return False
        return node.coordinator.commit(txn) is TxnState.COMMITTED
