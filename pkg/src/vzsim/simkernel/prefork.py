"""Prefork web server: one single-threaded worker process per connection.

The parent keeps the number of idle workers between ``min_spare`` and
``max_spare`` by forking at most one worker per second and killing surplus
idle ones.  A worker grows from its fresh to its warm footprint the first
time it runs PHP.  With keep-alive a worker stays bound to its client until
``keepalive_timeout`` after the last response.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from ..eventloop import EventLoop, Handle
from ..ubc import mib_to_pages
from .kernel import SimKernel
from .memory import ContainerState, ProcessRole, SimProcess

TICK_MS = 1000


class ConnectionRefused(Exception):
    pass


@dataclass(frozen=True)
class PreforkConfig:
    start_servers: int = 4
    min_spare: int = 2
    max_spare: int = 4
    max_clients: int = 128
    keepalive_enabled: bool = True
    keepalive_timeout_ms: int = 5000
    parent_virtual_mib: float = 20
    parent_private_mib: float = 4
    worker_fresh_virtual_mib: float = 20
    worker_fresh_private_mib: float = 4
    worker_warm_virtual_mib: float = 30
    worker_warm_private_mib: float = 9
    worker_kmem_bytes: int = 0
    error_ms: int = 40
    service_slots: int = 0          # 0: service time does not depend on load
    cpu_share: float = 0.05         # fraction of a node's CPU per busy worker

    def __post_init__(self):
        if not 0 <= self.min_spare <= self.max_spare:
            raise ValueError("need 0 <= min_spare <= max_spare")
        if self.max_clients < 1 or self.start_servers < 0:
            raise ValueError("bad worker counts")
        if self.worker_warm_private_mib < self.worker_fresh_private_mib:
            raise ValueError("warm workers cannot be smaller than fresh ones")


class WorkerState(str, enum.Enum):
    IDLE = "idle"
    BUSY = "busy"
    KEEPALIVE = "keepalive"


@dataclass(eq=False)
class Worker:
    pid: int
    proc: SimProcess
    state: WorkerState = WorkerState.IDLE
    served_php: bool = False
    client: object = None
    timer: Handle | None = None
    request: "Request | None" = None


@dataclass(eq=False)
class Request:
    client: object              # connection owner (a load generator thread)
    issued_at: int
    service_ms: int
    on_done: Callable[["RequestOutcome"], None]
    php: bool = True
    seq: int = 0


@dataclass(frozen=True)
class RequestOutcome:
    issued_at: int
    completed_at: int
    ok: bool
    container_id: str = ""
    client: object = None
    seq: int = 0

    @property
    def response_ms(self) -> int:
        return self.completed_at - self.issued_at


@dataclass
class PreforkState:
    config: PreforkConfig
    parent: SimProcess | None = None
    workers: dict[int, Worker] = field(default_factory=dict)
    pending_queue: deque = field(default_factory=deque)
    last_spawn_time: int | None = None
    spawn_times: list[int] = field(default_factory=list)

    def count(self, state: WorkerState) -> int:
        return sum(1 for w in self.workers.values() if w.state is state)

    @property
    def idle(self) -> int:
        return self.count(WorkerState.IDLE)

    @property
    def connections(self) -> int:
        return len(self.workers) - self.idle + len(self.pending_queue)


class WebServer:
    def __init__(self, kernel: SimKernel, loop: EventLoop, container: ContainerState,
                 config: PreforkConfig | None = None):
        self.kernel = kernel
        self.loop = loop
        self.container = container
        self.state = PreforkState(config or PreforkConfig())
        self.busy_ms = 0            # integral of busy workers over time
        self._busy_since = 0
        container.web_server = self
        kernel.on_exit(container.container_id, self._on_exit)

    @property
    def config(self) -> PreforkConfig:
        return self.state.config

    def _trace(self, kind: str, detail: str) -> None:
        self.kernel.trace(kind, self.container.host, self.container.container_id, detail)

    # lifecycle

    def start(self, first_tick_ms: int | None = None) -> None:
        cfg = self.config
        self.state.parent = self.kernel.spawn(
            self.container, "httpd", ProcessRole.HTTP_PARENT,
            virtual_pages=mib_to_pages(cfg.parent_virtual_mib),
            private_pages=mib_to_pages(cfg.parent_private_mib), is_root=True)
        if self.state.parent is None:
            raise RuntimeError(f"{self.container.container_id}: web server failed to start")
        for _ in range(cfg.start_servers):
            self._fork_worker()
        first = self.loop.now + TICK_MS if first_tick_ms is None else first_tick_ms
        self.loop.call_at(first, self._tick)

    def _tick(self) -> None:
        if self.state.parent is None:
            return
        self.prefork_tick(self.loop.now)
        self.loop.call_later(TICK_MS, self._tick)

    def prefork_tick(self, now: int) -> str | None:
        st, cfg = self.state, self.config
        if st.idle < cfg.min_spare:
            throttled = st.last_spawn_time is not None and now - st.last_spawn_time < TICK_MS
            if throttled or len(st.workers) >= cfg.max_clients:
                return None
            st.last_spawn_time = now
            if self._fork_worker() is None:
                self._trace("spawn_denied", f"workers={len(st.workers)}")
                return "spawn_denied"
            st.spawn_times.append(now)
            self._dispatch()
            return "spawn"
        if st.idle > cfg.max_spare:
            victim = max((w for w in st.workers.values() if w.state is WorkerState.IDLE),
                         key=lambda w: w.pid)
            self._retire(victim, "surplus")
            return "kill"
        return None

    def _fork_worker(self) -> Worker | None:
        cfg = self.config
        proc = self.kernel.spawn(
            self.container, "httpd", ProcessRole.HTTP_WORKER,
            virtual_pages=mib_to_pages(cfg.worker_fresh_virtual_mib),
            private_pages=mib_to_pages(cfg.worker_fresh_private_mib),
            kmem_bytes=cfg.worker_kmem_bytes, parent=self.state.parent)
        if proc is None:
            return None
        w = Worker(proc.pid, proc)
        self.state.workers[proc.pid] = w
        return w

    def _retire(self, w: Worker, reason: str) -> None:
        self._set_state(w, None)
        self.kernel.exit_process(self.container, w.proc, reason)

    def _on_exit(self, ct, proc, reason) -> None:
        if self.state.parent is not None and proc.pid == self.state.parent.pid:
            self.state.parent = None
            return
        w = self.state.workers.get(proc.pid)
        if w is not None and reason == "oom":
            req = w.request
            self._set_state(w, None)
            if req is not None:
                self._finish(req, self.loop.now, ok=False)

    # busy accounting for CPU

    def busy_workers(self) -> int:
        return self.state.count(WorkerState.BUSY)

    def busy_integral(self, now: int) -> int:
        return self.busy_ms + self.busy_workers() * (now - self._busy_since)

    def _set_state(self, w: Worker, state: WorkerState | None) -> None:
        now = self.loop.now
        self.busy_ms = self.busy_integral(now)
        self._busy_since = now
        if w.timer is not None:
            w.timer.cancel()
            w.timer = None
        if state is None:
            self.state.workers.pop(w.pid, None)
        else:
            w.state = state
        if state in (None, WorkerState.IDLE):
            w.client = None

    # requests

    def submit(self, req: Request) -> None:
        st = self.state
        if st.parent is None:
            raise ConnectionRefused(f"{self.container.container_id}: server is down")
        w = self._bound_worker(req.client)
        if w is None:
            w = next((w for _, w in sorted(st.workers.items())
                      if w.state is WorkerState.IDLE), None)
            if w is None:
                if st.connections >= self.config.max_clients:
                    raise ConnectionRefused(f"{self.container.container_id}: max_clients reached")
                st.pending_queue.append(req)
                self._trace("queued", f"pending={len(st.pending_queue)}")
                return
        self._serve(w, req)

    def holds_connection(self, client) -> bool:
        return self._bound_worker(client) is not None

    def _bound_worker(self, client) -> Worker | None:
        for w in self.state.workers.values():
            if w.client is client and w.state is WorkerState.KEEPALIVE:
                return w
        return None

    def _serve(self, w: Worker, req: Request) -> None:
        self._set_state(w, WorkerState.BUSY)
        w.client = req.client
        w.request = req
        cfg = self.config
        if req.php and not w.served_php:
            grow_v = mib_to_pages(cfg.worker_warm_virtual_mib) - w.proc.virtual_pages
            grow_p = mib_to_pages(cfg.worker_warm_private_mib) - w.proc.private_pages
            if not self.kernel.grow(self.container, w.proc, grow_v, grow_p, high_priority=True):
                if w.pid in self.state.workers:
                    # the PHP interpreter fails to allocate; the child gives up
                    w.timer = self.loop.call_later(cfg.error_ms, self._fail, w, req)
                return
            w.served_php = True
        service = req.service_ms
        if cfg.service_slots > 0:
            service = int(round(service * max(1.0, self.busy_workers() / cfg.service_slots)))
        w.timer = self.loop.call_later(service, self._complete, w, req)

    def _fail(self, w: Worker, req: Request) -> None:
        w.timer = None
        w.request = None
        self._retire(w, "alloc_failed")
        self._finish(req, self.loop.now, ok=False)
        self._dispatch()

    def _complete(self, w: Worker, req: Request) -> None:
        w.timer = None
        w.request = None
        if self.config.keepalive_enabled:
            self._set_state(w, WorkerState.KEEPALIVE)
            w.client = req.client
            w.timer = self.loop.call_later(self.config.keepalive_timeout_ms,
                                           self._keepalive_expired, w)
        else:
            self._set_state(w, WorkerState.IDLE)
        self._finish(req, self.loop.now, ok=True)
        self._dispatch()

    def _keepalive_expired(self, w: Worker) -> None:
        w.timer = None
        self._set_state(w, WorkerState.IDLE)
        self._dispatch()

    def _dispatch(self) -> None:
        st = self.state
        while st.pending_queue:
            w = next((w for _, w in sorted(st.workers.items())
                      if w.state is WorkerState.IDLE), None)
            if w is None:
                return
            self._serve(w, st.pending_queue.popleft())

    def _finish(self, req: Request, when: int, ok: bool) -> None:
        out = RequestOutcome(req.issued_at, when, ok, self.container.container_id,
                             req.client, req.seq)
        self._trace("response", f"seq={req.seq} ms={out.response_ms} ok={int(ok)}")
        req.on_done(out)


def serve_request(server: WebServer, req: Request) -> None:
    server.submit(req)


def prefork_tick(server: WebServer, now: int) -> str | None:
    return server.prefork_tick(now)
