"""Node daemon: real TCP stream transport plus a local control socket.

Every node listens on its configured port. For each neighbour it keeps one
outbound connection used only for writing; the link is ONLINE while that
connection is up. Frames travel length-prefixed (u32 big-endian).

The admin CLI talks to the daemon over ``<state>/control.sock`` using the
same frame codec with CONTROL_REQUEST/CONTROL_RESPONSE kinds.
"""

from __future__ import annotations

import asyncio
import fcntl
import json
import logging
import os
import time
from pathlib import Path

from qsync.commands import run_command
from qsync.errors import FrameError, QSyncError
from qsync.frame import decode_frame, encode_frame, pack_stream, split_stream
from qsync.message import Kind, LinkStatus, Message, MessageId, QueueRef
from qsync.node import Node
from qsync.sync import PermissionPolicy
from qsync.topology import TopologyConfig
from qsync.wal import WAL

log = logging.getLogger(__name__)

RECONNECT_S = 0.5
CONTROL_SOCKET = "control.sock"
LOCK_FILE = "daemon.lock"
WAL_FILE = "queue.wal"


class AlreadyRunning(QSyncError):
    pass


def state_dir_for(node_id: str, home: str | os.PathLike | None = None) -> Path:
    base = home or os.environ.get("QSYNC_HOME") or "./qsync-state"
    return Path(base) / node_id


class NodeLock:
    """Exclusive advisory lock on a node's state directory."""

    def __init__(self, state_dir: Path):
        state_dir.mkdir(parents=True, exist_ok=True)
        self.path = state_dir / LOCK_FILE
        self._fh = None

    def acquire(self) -> None:
        fh = open(self.path, "a+")
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            fh.close()
            raise AlreadyRunning(f"node state {self.path.parent} is locked by another process")
        self._fh = fh

    def release(self) -> None:
        if self._fh is not None:
            fcntl.flock(self._fh, fcntl.LOCK_UN)
            self._fh.close()
            self._fh = None


class AsyncEnv:
    def __init__(self, loop: asyncio.AbstractEventLoop, daemon: "NodeDaemon"):
        self.loop = loop
        self.daemon = daemon

    def now(self) -> int:
        return int(time.time() * 1000)

    def call_later(self, delay_ms: int, fn):
        return self.loop.call_later(max(0, delay_ms) / 1000.0, fn)

    def send_frame(self, peer: str, data: bytes) -> None:
        writer = self.daemon.writers.get(peer)
        if writer is None or writer.is_closing():
            return
        writer.write(pack_stream(data))


class NodeDaemon:
    def __init__(
        self,
        topo: TopologyConfig,
        node_id: str,
        state_dir: Path,
        *,
        policy: PermissionPolicy | None = None,
        fsync: bool = True,
    ):
        self.topo = topo
        self.node_id = node_id
        self.state_dir = Path(state_dir)
        self.policy = policy
        self.fsync = fsync
        self.writers: dict[str, asyncio.StreamWriter] = {}
        self.node: Node | None = None
        self.lock = NodeLock(self.state_dir)
        self._servers: list = []
        self._tasks: list[asyncio.Task] = []
        self._stopped = asyncio.Event()

    async def start(self) -> Node:
        self.lock.acquire()
        loop = asyncio.get_running_loop()
        self.wal = WAL(self.state_dir / WAL_FILE, fsync=self.fsync)
        self.node = Node(
            self.node_id, self.topo, self.wal, AsyncEnv(loop, self),
            policy=self.policy, default_link=LinkStatus.OFFLINE,
        )
        log.info("%s: recovery resolved %d transaction(s)", self.node_id, self.node.recovered)
        spec = self.topo.node(self.node_id)
        if spec.port is not None:
            self._servers.append(
                await asyncio.start_server(self._handle_peer, spec.host, spec.port)
            )
        sock = self.state_dir / CONTROL_SOCKET
        if sock.exists():
            sock.unlink()
        self._servers.append(await asyncio.start_unix_server(self._handle_control, str(sock)))
        for peer in self.topo.neighbours(self.node_id):
            if self.topo.node(peer).port is not None:
                self._tasks.append(asyncio.create_task(self._connect_loop(peer)))
        self.node.start()
        return self.node

    async def serve_forever(self) -> None:
        await self._stopped.wait()

    async def stop(self) -> None:
        for t in self._tasks:
            t.cancel()
        for s in self._servers:
            s.close()
        for w in self.writers.values():
            w.close()
        if self.node is not None:
            self.node.crash()
        self.wal.close()
        sock = self.state_dir / CONTROL_SOCKET
        if sock.exists():
            sock.unlink()
        self.lock.release()
        self._stopped.set()

    async def _connect_loop(self, peer: str) -> None:
        spec = self.topo.node(peer)
        while True:
            try:
                reader, writer = await asyncio.open_connection(spec.host, spec.port)
            except OSError:
                await asyncio.sleep(RECONNECT_S)
                continue
            self.writers[peer] = writer
            self.node.set_link(peer, LinkStatus.ONLINE)
            try:
                await reader.read()  # write-only connection; returns at EOF
            except OSError:
                pass
            finally:
                self.writers.pop(peer, None)
                self.node.set_link(peer, LinkStatus.OFFLINE)
                writer.close()
            await asyncio.sleep(RECONNECT_S)

    async def _handle_peer(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        buf = bytearray()
        try:
            while chunk := await reader.read(65536):
                buf += chunk
                for frame in split_stream(buf):
                    self.node.on_frame(frame)
        except (OSError, FrameError) as exc:
            log.warning("%s: peer connection dropped: %s", self.node_id, exc)
        finally:
            writer.close()

    async def _handle_control(self, reader, writer) -> None:
        try:
            request = await read_frame(reader)
            doc = json.loads(request.body)
            if doc.get("cmd") == "shutdown":
                response = {"ok": True, "result": {"stopping": True}}
                asyncio.get_running_loop().call_soon(lambda: asyncio.ensure_future(self.stop()))
            else:
                response = run_command(self.node, doc.get("cmd", ""), doc.get("args", {}))
            writer.write(pack_stream(control_frame(self.node_id, Kind.CONTROL_RESPONSE, response)))
            await writer.drain()
        except (OSError, FrameError, ValueError, asyncio.IncompleteReadError) as exc:
            log.warning("%s: bad control request: %s", self.node_id, exc)
        finally:
            writer.close()


def control_frame(origin: str, kind: Kind, doc: dict) -> bytes:
    body = json.dumps(doc, separators=(",", ":")).encode("utf-8")
    return encode_frame(
        Message(MessageId(origin, 0), kind, body, False, 0, QueueRef(origin, "control", False))
    )


async def read_frame(reader: asyncio.StreamReader) -> Message:
    head = await reader.readexactly(4)
    n = int.from_bytes(head, "big")
    return decode_frame(await reader.readexactly(n))


async def control_request(state_dir: Path, cmd: str, args: dict, timeout: float = 30.0) -> dict:
    reader, writer = await asyncio.wait_for(
        asyncio.open_unix_connection(str(Path(state_dir) / CONTROL_SOCKET)), timeout
    )
    try:
        writer.write(pack_stream(control_frame("cli", Kind.CONTROL_REQUEST, {"cmd": cmd, "args": args})))
        await writer.drain()
        msg = await asyncio.wait_for(read_frame(reader), timeout)
        return json.loads(msg.body)
    finally:
        writer.close()


def run_daemon(topo: TopologyConfig, node_id: str, state_dir: Path, *, policy=None) -> None:
    async def main():
        d = NodeDaemon(topo, node_id, state_dir, policy=policy)
        node = await d.start()
        print(f"{node_id}: running, recovered {node.recovered} transaction(s)", flush=True)
        try:
            await d.serve_forever()
        finally:
            if not d._stopped.is_set():
                await d.stop()

    try:
        asyncio.run(main())
    except KeyboardInterrupt:
        pass
