"""JMeter-style closed-loop load generator.

Each thread sends ``requests_per_loop`` requests back to back over its own
keep-alive connection, waiting for every response, then pauses for a
Gaussian think time at the end of the iteration.  Threads start at an even
rate across the ramp-up period.  When the target is a replica group
requests are spread round-robin over its members.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable, Sequence

from ..eventloop import EventLoop
from .prefork import ConnectionRefused, Request, RequestOutcome, WebServer


@dataclass(frozen=True)
class WorkloadSpec:
    target: str
    threads: int = 9
    ramp_up: float = 2.0            # seconds
    loop_count: int = 5
    requests_per_loop: int = 8
    think_time_mean: float = 300.0  # ms
    think_time_stddev: float = 100.0
    base_service_time: int = 166    # ms
    rng_seed: int = 1
    start: float = 0.0              # seconds

    def __post_init__(self):
        if self.threads < 1 or self.loop_count < 1 or self.requests_per_loop < 1:
            raise ValueError("threads, loop_count and requests_per_loop must be positive")
        if self.ramp_up < 0 or self.think_time_mean < 0 or self.think_time_stddev < 0:
            raise ValueError("negative timing parameter")
        if self.base_service_time <= 0:
            raise ValueError("base_service_time must be positive")

    @property
    def total_requests(self) -> int:
        return self.threads * self.loop_count * self.requests_per_loop


class _Thread:
    __slots__ = ("index", "rng", "remaining", "name")

    def __init__(self, index: int, rng: random.Random, remaining: int, name: str):
        self.index = index
        self.rng = rng
        self.remaining = remaining
        self.name = name

    def __repr__(self):
        return self.name


class LoadGenerator:
    def __init__(self, loop: EventLoop, spec: WorkloadSpec,
                 servers: Callable[[], Sequence[WebServer]],
                 on_outcome: Callable[[RequestOutcome], None] | None = None,
                 on_finished: Callable[["LoadGenerator"], None] | None = None):
        self.loop = loop
        self.spec = spec
        self.servers = servers
        self.on_outcome = on_outcome or (lambda out: None)
        self.on_finished = on_finished or (lambda gen: None)
        self.outcomes: list[RequestOutcome] = []
        self._seq = 0
        self._rr = 0
        self._running = 0
        self.done = False

    def start(self) -> None:
        spec = self.spec
        start_ms = int(round(spec.start * 1000))
        step = spec.ramp_up * 1000 / spec.threads
        self._running = spec.threads
        for i in range(spec.threads):
            rng = random.Random(f"{spec.rng_seed}/{spec.target}/{i}")
            th = _Thread(i, rng, spec.loop_count * spec.requests_per_loop,
                         f"{spec.target}-t{i + 1}")
            self.loop.call_at(start_ms + int(round(i * step)), self._issue, th)

    def _think(self, th: _Thread) -> None:
        spec = self.spec
        delay = max(0.0, th.rng.gauss(spec.think_time_mean, spec.think_time_stddev))
        self.loop.call_later(int(round(delay)), self._issue, th)

    def _next(self, th: _Thread) -> None:
        if th.remaining % self.spec.requests_per_loop == 0:
            self._think(th)
        else:
            self._issue(th)

    def _pick(self, th: _Thread) -> WebServer:
        members = list(self.servers())
        if not members:
            raise ConnectionRefused(f"{self.spec.target}: no server")
        for s in members:   # stay on the server holding this thread's connection
            if s.holds_connection(th):
                return s
        server = members[self._rr % len(members)]
        self._rr += 1
        return server

    def _issue(self, th: _Thread) -> None:
        self._seq += 1
        now = self.loop.now
        req = Request(th, now, self.spec.base_service_time,
                      lambda out, th=th: self._done(th, out), seq=self._seq)
        try:
            self._pick(th).submit(req)
        except ConnectionRefused:
            self._done(th, RequestOutcome(now, now, False, "", th, req.seq))

    def _done(self, th: _Thread, out: RequestOutcome) -> None:
        self.outcomes.append(out)
        self.on_outcome(out)
        th.remaining -= 1
        if th.remaining > 0:
            self.loop.call_later(0, self._next, th)
            return
        self._running -= 1
        if self._running == 0:
            self.done = True
            self.on_finished(self)
