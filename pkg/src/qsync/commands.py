"""Admin operations shared by the daemon control socket and offline CLI mode.

Each handler takes a live :class:`Node` and a JSON-able argument dict and
returns a JSON-able result dict.
"""

from __future__ import annotations

import base64
import time
from typing import Callable

from qsync.errors import QSyncError
from qsync.mail import MailEnvelope
from qsync.message import MessageId
from qsync.node import Node
from qsync.queues import Direction


class CommandError(QSyncError):
    pass


def cmd_status(node: Node, args: dict) -> dict:
    return node.status()


def cmd_exec(node: Node, args: dict) -> dict:
    rows = node.exec_sql(args["sql"])
    return {"rows": rows, "outbox_pending": len(node.store.pending_records())}


def cmd_force_dispatch(node: Node, args: dict) -> dict:
    node.engine.notify_dispatch()
    return {"scheduled": True}


def cmd_journal(node: Node, args: dict) -> dict:
    direction = Direction(args["direction"]) if args.get("direction") else None
    return {"entries": [e.to_dict() for e in node.queues.journal_list(direction)]}


def cmd_dump(node: Node, args: dict) -> dict:
    return {"table": args["table"], "tsv": node.store.dump_tsv(args["table"])}


def cmd_digest(node: Node, args: dict) -> dict:
    return {"digest": node.store.state_digest(args.get("tables"))}


def cmd_mail_send(node: Node, args: dict) -> dict:
    env = MailEnvelope(
        node.node_id,
        args["to"],
        args.get("subject", ""),
        args.get("body", ""),
        tuple((a["name"], base64.b64decode(a["b64"])) for a in args.get("attachments", [])),
        encrypted=args.get("encrypted", node.mail.key is not None),
    )
    mid = node.mail.send_mail(env)
    return {"mail_id": str(mid)}


def cmd_mail_inbox(node: Node, args: dict) -> dict:
    out = []
    for env in node.mail.fetch_inbox():
        out.append(
            {
                "mail_id": str(env.mail_id),
                "from": env.from_node,
                "to": env.to_node,
                "subject": env.subject,
                "body": env.body,
                "attachments": [
                    {"name": n, "size": len(d), "b64": base64.b64encode(d).decode("ascii")}
                    for n, d in env.attachments
                ],
                "encrypted": env.encrypted,
                "hops": list(env.hops),
            }
        )
    if args.get("ack"):
        for item in out:
            origin, _, seq = item["mail_id"].rpartition(":")
            node.mail.ack_mail(MessageId(origin, int(seq)))
    return {"mails": out}


COMMANDS: dict[str, Callable[[Node, dict], dict]] = {
    "status": cmd_status,
    "exec": cmd_exec,
    "force_dispatch": cmd_force_dispatch,
    "journal": cmd_journal,
    "dump": cmd_dump,
    "digest": cmd_digest,
    "mail_send": cmd_mail_send,
    "mail_inbox": cmd_mail_inbox,
}


def run_command(node: Node, name: str, args: dict) -> dict:
    """Run a command, folding qsync errors into an error response."""
    handler = COMMANDS.get(name)
    if handler is None:
        return {"ok": False, "error": f"unknown command {name!r}"}
    try:
        return {"ok": True, "result": handler(node, args)}
    except (QSyncError, KeyError, ValueError) as exc:
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


class OfflineEnv:
    """Env for running one command against a stopped node's state.

    Zero-delay callbacks run when :meth:`drain` is called; later timers and
    frames are discarded (the daemon resumes that work on start).
    """

    def __init__(self):
        self._soon: list = []

    def now(self) -> int:
        return int(time.time() * 1000)

    def call_later(self, delay_ms, fn):
        handle = _Cancel()
        if delay_ms <= 0:
            self._soon.append((handle, fn))
        return handle

    def send_frame(self, peer: str, data: bytes) -> None:
        pass

    def drain(self) -> None:
        while self._soon:
            handle, fn = self._soon.pop(0)
            if not handle.cancelled:
                fn()


class _Cancel:
    cancelled = False

    def cancel(self) -> None:
        self.cancelled = True
