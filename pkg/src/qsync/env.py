"""Execution environment a node runs inside: clock, timers and frame output.

The simulator, the asyncio daemon and unit tests each provide one.
"""

from __future__ import annotations

import heapq
import itertools
from typing import Callable, Protocol


class TimerHandle(Protocol):
    def cancel(self) -> None: ...


class Env(Protocol):
    def now(self) -> int:
        """Logical time in milliseconds."""

    def call_later(self, delay_ms: int, fn: Callable[[], None]) -> TimerHandle: ...

    def send_frame(self, peer: str, data: bytes) -> None: ...


class _Handle:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class ManualEnv:
    """Hand-cranked environment for unit tests.

    Frames are collected in ``sent`` as (peer, bytes); timers fire only when
    :meth:`advance` moves the clock past them.
    """

    def __init__(self, start: int = 0):
        self.clock = start
        self.sent: list[tuple[str, bytes]] = []
        self._timers: list = []
        self._seq = itertools.count()

    def now(self) -> int:
        return self.clock

    def call_later(self, delay_ms: int, fn):
        h = _Handle()
        heapq.heappush(self._timers, (self.clock + max(0, int(delay_ms)), next(self._seq), h, fn))
        return h

    def send_frame(self, peer: str, data: bytes) -> None:
        self.sent.append((peer, data))

    def run_due(self) -> int:
        n = 0
        while self._timers and self._timers[0][0] <= self.clock:
            _, _, h, fn = heapq.heappop(self._timers)
            if not h.cancelled:
                fn()
                n += 1
        return n

    def advance(self, ms: int) -> int:
        self.clock += ms
        return self.run_due()

    def take_sent(self) -> list[tuple[str, bytes]]:
        out, self.sent = self.sent, []
        return out
