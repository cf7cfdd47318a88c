"""Deterministic discrete-event scheduler.

Time is an integer number of milliseconds.  Events scheduled for the same
instant run in scheduling order.
"""

from __future__ import annotations

import heapq
import itertools
from typing import Callable


class Handle:
    __slots__ = ("when", "seq", "callback", "args", "cancelled")

    def __init__(self, when: int, seq: int, callback: Callable, args: tuple):
        self.when = when
        self.seq = seq
        self.callback = callback
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True

    def __lt__(self, other: "Handle") -> bool:
        return (self.when, self.seq) < (other.when, other.seq)


class EventLoop:
    def __init__(self, start_ms: int = 0):
        self.now = start_ms
        self._queue: list[Handle] = []
        self._seq = itertools.count()
        self._after_event: list[Callable[[], None]] = []
        self.stopped = False

    def call_at(self, when: int, callback: Callable, *args) -> Handle:
        when = int(when)
        if when < self.now:
            raise ValueError(f"cannot schedule in the past ({when} < {self.now})")
        h = Handle(when, next(self._seq), callback, args)
        heapq.heappush(self._queue, h)
        return h

    def call_later(self, delay: int, callback: Callable, *args) -> Handle:
        return self.call_at(self.now + int(delay), callback, *args)

    def add_post_event_hook(self, hook: Callable[[], None]) -> None:
        """Run ``hook`` after every event (used for invariant checks)."""
        self._after_event.append(hook)

    def stop(self) -> None:
        self.stopped = True

    def pending(self) -> int:
        return sum(1 for h in self._queue if not h.cancelled)

    def run_until(self, horizon: int) -> None:
        """Process events with ``when <= horizon`` or until :meth:`stop`."""
        self.stopped = False
        while self._queue and not self.stopped:
            h = self._queue[0]
            if h.when > horizon:
                break
            heapq.heappop(self._queue)
            if h.cancelled:
                continue
            self.now = h.when
            h.callback(*h.args)
            for hook in self._after_event:
                hook()
        if not self.stopped and self.now < horizon and not self._queue:
            self.now = horizon
