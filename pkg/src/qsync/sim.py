"""Deterministic discrete-event simulator for a whole enterprise.

Time is integer milliseconds. Events run in (time, insertion order); each
directed link draws its loss/duplication/jitter decisions from its own
PRNG stream derived from the run seed, so a seed plus a scenario fixes
every delivery, drop and duplicate.

Scenario scripts, one command per line::

    at <ms> link <a> <b> online|offline|loss <r>|dup <r>|latency <ms>|reorder on|off
    at <ms> client <node> exec <sql>
    at <ms> crash <node> [<down_ms>]
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable

from qsync.errors import MaxTimeExceeded, ParseError, SimulatedCrash, SQLError, UnknownNode
from qsync.message import LinkStatus
from qsync.node import Node
from qsync.sql import canonical
from qsync.sync import PermissionPolicy
from qsync.topology import TopologyConfig
from qsync.wal import WAL

log = logging.getLogger(__name__)

DEFAULT_RESTART_MS = 1000


@dataclass(frozen=True)
class LinkState:
    status: LinkStatus = LinkStatus.ONLINE
    latency: int = 20
    loss_rate: float = 0.0
    dup_rate: float = 0.0
    reorder: bool = False

    def __post_init__(self):
        if not 0.0 <= self.loss_rate <= 1.0 or not 0.0 <= self.dup_rate <= 1.0:
            raise ValueError("loss_rate and dup_rate must lie in [0, 1]")
        if self.latency < 0:
            raise ValueError("latency must be non-negative")
        object.__setattr__(self, "status", LinkStatus(self.status))


class _Timer:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class _NodeEnv:
    """Env handed to one incarnation of a node."""

    def __init__(self, sim: "Simulator", node_id: str, generation: int):
        self.sim = sim
        self.node_id = node_id
        self.generation = generation

    def now(self) -> int:
        return self.sim.clock

    def call_later(self, delay_ms: int, fn: Callable[[], None]) -> _Timer:
        timer = _Timer()
        self.sim._push(self.sim.clock + max(0, int(delay_ms)), fn, self.node_id, self.generation, timer)
        return timer

    def send_frame(self, peer: str, data: bytes) -> None:
        if self.sim.generations[self.node_id] == self.generation:
            self.sim._transmit(self.node_id, peer, data)


@dataclass
class SimResult:
    verdict: str
    clock: int
    digests: dict = field(default_factory=dict)

    def render(self) -> str:
        lines = [f"verdict {self.verdict}", f"clock {self.clock}"]
        lines += [f"digest {n} {d}" for n, d in sorted(self.digests.items())]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ScenarioEvent:
    at: int
    action: str
    args: tuple


def parse_scenario(text: str) -> list[ScenarioEvent]:
    events = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 5)
        if len(parts) < 3 or parts[0] != "at" or not parts[1].isdigit():
            raise ParseError("expected 'at <ms> <command> ...'", lineno)
        at, cmd = int(parts[1]), parts[2]
        if cmd == "link":
            parts = line.split()
            if len(parts) < 6:
                raise ParseError("link needs <a> <b> <setting>", lineno)
            a, b, setting, rest = parts[3], parts[4], parts[5], parts[6:]
            if setting in ("online", "offline") and not rest:
                events.append(ScenarioEvent(at, "link", (a, b, setting, None)))
            elif setting in ("loss", "dup") and len(rest) == 1:
                try:
                    rate = float(rest[0])
                except ValueError:
                    raise ParseError(f"bad rate {rest[0]!r}", lineno) from None
                if not 0.0 <= rate <= 1.0:
                    raise ParseError("rate must lie in [0, 1]", lineno)
                events.append(ScenarioEvent(at, "link", (a, b, setting, rate)))
            elif setting == "latency" and len(rest) == 1 and rest[0].isdigit():
                events.append(ScenarioEvent(at, "link", (a, b, setting, int(rest[0]))))
            elif setting == "reorder" and rest in (["on"], ["off"]):
                events.append(ScenarioEvent(at, "link", (a, b, setting, rest[0] == "on")))
            else:
                raise ParseError(f"bad link setting {' '.join(parts[5:])!r}", lineno)
        elif cmd == "client":
            parts = line.split(None, 5)
            if len(parts) != 6 or parts[4] != "exec":
                raise ParseError("expected 'client <node> exec <sql>'", lineno)
            events.append(ScenarioEvent(at, "exec", (parts[3], parts[5])))
        elif cmd == "crash":
            parts = line.split()
            if len(parts) not in (4, 5) or (len(parts) == 5 and not parts[4].isdigit()):
                raise ParseError("expected 'crash <node> [<down_ms>]'", lineno)
            down = int(parts[4]) if len(parts) == 5 else DEFAULT_RESTART_MS
            events.append(ScenarioEvent(at, "crash", (parts[3], down)))
        else:
            raise ParseError(f"unknown command {cmd!r}", lineno)
    return events


class Simulator:
    def __init__(
        self,
        topo: TopologyConfig,
        seed: int = 0,
        *,
        policies: dict[str, PermissionPolicy] | None = None,
        mail_key: bytes | None = None,
        link: LinkState | None = None,
    ):
        self.topo = topo
        self.seed = seed
        self.clock = 0
        self.policies = policies or {}
        self.mail_key = mail_key
        self.stats: Counter = Counter()
        self.client_log: dict[str, list[str]] = {n: [] for n in topo.names}
        self.client_errors: list[tuple[int, str, str, str]] = []
        self.crashes: list[tuple[int, str]] = []
        self._heap: list = []
        self._seq = itertools.count()
        self._last_arrival: dict[tuple[str, str], int] = {}
        self.links: dict[tuple[str, str], LinkState] = {}
        self._rngs: dict[tuple[str, str], random.Random] = {}
        base = link or LinkState()
        for pair in sorted(tuple(sorted(p)) for p in topo.links):
            a, b = pair
            for d in ((a, b), (b, a)):
                self.links[d] = base
                self._rngs[d] = random.Random(f"qsync:{seed}:{d[0]}->{d[1]}")
        self.wals: dict[str, WAL] = {n: WAL() for n in topo.names}
        self.generations: dict[str, int] = {n: 0 for n in topo.names}
        self.nodes: dict[str, Node] = {}
        # called as hook(node) right after a node recovers from a crash
        self.restart_hooks: list[Callable[[Node], None]] = []
        for n in topo.names:
            self._boot(n)

    # ----------------------------------------------------------------- nodes

    def _boot(self, node_id: str) -> Node:
        env = _NodeEnv(self, node_id, self.generations[node_id])
        node = Node(
            node_id, self.topo, self.wals[node_id], env,
            policy=self.policies.get(node_id), mail_key=self.mail_key,
        )
        self.nodes[node_id] = node
        for peer in self.topo.neighbours(node_id):
            node.set_link(peer, self.links[(node_id, peer)].status)
        node.start()
        return node

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def crash(self, node_id: str, down_ms: int | None = DEFAULT_RESTART_MS) -> None:
        node = self.node(node_id)
        if not node.alive:
            return
        node.crash()
        self.generations[node_id] += 1
        self.crashes.append((self.clock, node_id))
        self.wals[node_id].disarm()
        if down_ms is not None:
            self._push(self.clock + down_ms, lambda: self.restart(node_id), None, None, None)

    def restart(self, node_id: str) -> Node:
        if self.nodes[node_id].alive:
            return self.nodes[node_id]
        self.generations[node_id] += 1
        node = self._guard(node_id, lambda: self._boot(node_id))
        if node is not None:
            for hook in self.restart_hooks:
                hook(node)
        return node

    def arm_crash(self, node_id: str, after_writes: int, *, torn: bool = False) -> None:
        self.node(node_id)
        self.wals[node_id].arm_crash(after_writes, torn=torn)

    def _guard(self, node_id: str | None, fn: Callable):
        try:
            return fn()
        except SimulatedCrash as exc:
            if node_id is None:
                raise
            log.info("t=%d %s crashed: %s", self.clock, node_id, exc)
            self.crash(node_id)
            return None

    # ----------------------------------------------------------------- links

    def set_link(self, a: str, b: str, state: LinkState) -> None:
        self.node(a)
        self.node(b)
        if (a, b) not in self.links:
            raise UnknownNode(f"no link between {a} and {b}")
        for src, dst in ((a, b), (b, a)):
            old = self.links[(src, dst)]
            self.links[(src, dst)] = state
            if old.status is not state.status:
                n = self.nodes[src]
                if n.alive:
                    self._guard(src, lambda n=n, dst=dst: n.set_link(dst, state.status))

    def update_link(self, a: str, b: str, **changes) -> None:
        self.set_link(a, b, replace(self.links[(a, b)], **changes))

    def _transmit(self, src: str, dst: str, data: bytes) -> None:
        state = self.links.get((src, dst))
        self.stats["sent"] += 1
        if state is None:
            self.stats["no_link"] += 1
            return
        if state.status is LinkStatus.OFFLINE:
            self.stats["dropped_offline"] += 1
            return
        rng = self._rngs[(src, dst)]
        if state.loss_rate and rng.random() < state.loss_rate:
            self.stats["dropped_loss"] += 1
            return
        copies = 2 if state.dup_rate and rng.random() < state.dup_rate else 1
        if copies == 2:
            self.stats["duplicated"] += 1
        for _ in range(copies):
            t = self.clock + state.latency
            if state.reorder:
                t += rng.randint(0, max(1, state.latency))
            else:
                t = max(t, self._last_arrival.get((src, dst), 0))
                self._last_arrival[(src, dst)] = t
            self._push(t, lambda: self._deliver(dst, data), None, None, None)

    def _deliver(self, dst: str, data: bytes) -> None:
        node = self.nodes[dst]
        if not node.alive:
            self.stats["dropped_down"] += 1
            return
        self.stats["delivered"] += 1
        self._guard(dst, lambda: node.on_frame(data))

    # ---------------------------------------------------------------- events

    def _push(self, t: int, fn, node_id, generation, timer) -> None:
        heapq.heappush(self._heap, (t, next(self._seq), fn, node_id, generation, timer))

    def at(self, t: int, fn: Callable[[], None], node_id: str | None = None) -> None:
        """Schedule an arbitrary callback; crashes are attributed to ``node_id``."""
        self._push(t, lambda: self._guard(node_id, fn), None, None, None)

    def client_exec(self, node_id: str, sql: str) -> int | None:
        node = self.node(node_id)
        if not node.alive:
            self.client_errors.append((self.clock, node_id, sql, "node down"))
            return None
        try:
            rows = node.exec_sql(sql)
        except SQLError as exc:
            self.client_errors.append((self.clock, node_id, sql, str(exc)))
            return None
        self.client_log[node_id].append(canonical(sql))
        return rows

    def load_scenario(self, events: list[ScenarioEvent]) -> None:
        for ev in events:
            if ev.action == "link":
                a, b, setting, value = ev.args
                self.node(a)
                self.node(b)
                self.at(ev.at, lambda a=a, b=b, s=setting, v=value: self._link_event(a, b, s, v))
            elif ev.action == "exec":
                node_id, sql = ev.args
                self.node(node_id)
                self.at(ev.at, lambda n=node_id, q=sql: self.client_exec(n, q), node_id)
            elif ev.action == "crash":
                node_id, down = ev.args
                self.node(node_id)
                self.at(ev.at, lambda n=node_id, d=down: self.crash(n, d))

    def _link_event(self, a: str, b: str, setting: str, value) -> None:
        if setting == "online":
            self.update_link(a, b, status=LinkStatus.ONLINE)
        elif setting == "offline":
            self.update_link(a, b, status=LinkStatus.OFFLINE)
        elif setting == "loss":
            self.update_link(a, b, loss_rate=value)
        elif setting == "dup":
            self.update_link(a, b, dup_rate=value)
        elif setting == "latency":
            self.update_link(a, b, latency=value)
        elif setting == "reorder":
            self.update_link(a, b, reorder=value)

    def step(self) -> int:
        """Process the next live event; returns 1, or 0 if none remain."""
        while self._heap:
            t, _, fn, node_id, gen, timer = heapq.heappop(self._heap)
            if timer is not None and timer.cancelled:
                continue
            if node_id is not None and self.generations[node_id] != gen:
                continue
            self.clock = max(self.clock, t)
            if node_id is not None:
                self._guard(node_id, fn)
            else:
                fn()
            return 1
        return 0

    def _next_time(self) -> int | None:
        while self._heap:
            t, _, _, node_id, gen, timer = self._heap[0]
            if (timer is not None and timer.cancelled) or (
                node_id is not None and self.generations[node_id] != gen
            ):
                heapq.heappop(self._heap)
                continue
            return t
        return None

    def quiet(self) -> bool:
        return self._next_time() is None and all(
            n.alive and n.quiescent() for n in self.nodes.values()
        )

    def run_until(self, t: int) -> int:
        while (nt := self._next_time()) is not None and nt <= t:
            self.step()
        self.clock = max(self.clock, t)
        return self.clock

    def run_until_quiet(self, max_time: int = 3_600_000) -> int:
        while True:
            nt = self._next_time()
            if nt is None:
                if self.quiet():
                    return self.clock
                busy = [n.node_id for n in self.nodes.values() if not (n.alive and n.quiescent())]
                raise MaxTimeExceeded(f"stalled at t={self.clock} with work on {busy}")
            if nt > max_time:
                self.clock = max(self.clock, max_time)
                raise MaxTimeExceeded(f"not quiet by t={max_time}")
            self.step()

    # --------------------------------------------------------------- results

    def digests(self, tables=None) -> dict[str, str]:
        return {n: node.store.state_digest(tables) for n, node in self.nodes.items()}

    def journals(self) -> dict[str, list[dict]]:
        return {
            n: [e.to_dict() for e in node.queues.journal_list()] for n, node in self.nodes.items()
        }


def run_scenario(
    topo: TopologyConfig,
    scenario: str | list[ScenarioEvent],
    seed: int,
    *,
    max_time: int = 3_600_000,
    link: LinkState | None = None,
    policies: dict[str, PermissionPolicy] | None = None,
) -> tuple[SimResult, Simulator]:
    from qsync.sync import converged

    events = parse_scenario(scenario) if isinstance(scenario, str) else scenario
    sim = Simulator(topo, seed, link=link, policies=policies)
    sim.load_scenario(events)
    try:
        sim.run_until_quiet(max_time)
    except MaxTimeExceeded:
        return SimResult("MAX_TIME_EXCEEDED", sim.clock, sim.digests()), sim
    ok = converged(sim.nodes.values())
    return SimResult("CONVERGED" if ok else "DIVERGED", sim.clock, sim.digests()), sim
