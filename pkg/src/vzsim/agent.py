"""Node-side agent: samples resource usage and carries out server commands."""

from __future__ import annotations

import math
from typing import Callable, Mapping

from .eventloop import EventLoop
from .observations import (ActionKind, ActionRequest, CommandError, ContainerObservation,
                           LoadObservation)
from .simkernel.kernel import SimKernel
from .simkernel.memory import ContainerState, OutOfMemory, ProcessRole, rehost
from .ubc import MemoryProfile, apply_profile, profile_of

DEFAULT_CHECKPOINT_PAGES = 1024
DEFAULT_TRANSFER_RATE = 25600       # pages per second (100 MiB/s)

Done = Callable[[bool, str], None]
ReplicaFactory = Callable[[ContainerState, str, str], ContainerState]


class Migrator:
    """Checkpoint, transfer and re-host containers between simulated nodes.

    The checkpoint process runs inside the migrating container, so it is
    charged to that container's ``privvmpages``; a container without that
    headroom cannot be migrated.
    """

    def __init__(self, kernel: SimKernel, loop: EventLoop, *,
                 checkpoint_pages: int = DEFAULT_CHECKPOINT_PAGES,
                 transfer_rate: int = DEFAULT_TRANSFER_RATE,
                 replica_factory: ReplicaFactory | None = None):
        if checkpoint_pages < 0 or transfer_rate <= 0:
            raise ValueError("bad migration parameters")
        self.kernel = kernel
        self.loop = loop
        self.checkpoint_pages = checkpoint_pages
        self.transfer_rate = transfer_rate
        self.replica_factory = replica_factory
        self._replicas = 0

    def _transfer_ms(self, pages: int) -> int:
        return max(1, math.ceil(pages * 1000 / self.transfer_rate))

    def _claim(self, *node_ids: str) -> None:
        for nid in node_ids:
            if nid not in self.kernel.nodes:
                raise CommandError("UnknownNode", f"no node {nid}")
            if self.kernel.nodes[nid].busy_with_transfer:
                raise CommandError("NodeBusy", f"{nid} is already transferring")
        for nid in node_ids:
            self.kernel.nodes[nid].busy_with_transfer = True

    def _release(self, *node_ids: str) -> None:
        for nid in node_ids:
            self.kernel.nodes[nid].busy_with_transfer = False

    def migrate(self, ct: ContainerState, target: str, done: Done) -> None:
        source = ct.host
        if target == source:
            raise CommandError("BadRequest", "migration target equals source")
        self._claim(source, target)
        k = self.kernel
        ckpt = None
        if self.checkpoint_pages:
            ckpt = k.spawn(ct, "vzcheckpoint", ProcessRole.CHECKPOINT,
                           virtual_pages=self.checkpoint_pages,
                           private_pages=self.checkpoint_pages, is_root=True)
            if ckpt is None:
                self._release(source, target)
                k.trace("migrate_failed", source, ct.container_id,
                        "insufficient memory for checkpoint")
                done(False, "insufficient memory for checkpoint")
                return
        pages = ct.ubc.oomguarpages.held
        k.trace("migrate_start", source, ct.container_id, f"to={target} pages={pages}")

        def finish():
            ok, reason = True, ""
            try:
                rehost(ct, k.nodes[source], k.nodes[target], self.loop.now)
            except OutOfMemory as e:
                ok, reason = False, str(e)
            if ckpt is not None and ckpt.pid in ct.processes:
                k.exit_process(ct, ckpt, "checkpoint_done")
            self._release(source, target)
            k.trace("migrate_done" if ok else "migrate_failed", ct.host, ct.container_id,
                    f"from={source} to={target}" if ok else reason)
            done(ok, reason)

        self.loop.call_later(self._transfer_ms(pages), finish)

    def replicate(self, ct: ContainerState, target: str, done: Done) -> None:
        if self.replica_factory is None:
            raise CommandError("BadRequest", "replication is not available")
        self._claim(target)
        group = ct.replica_group or ct.container_id
        ct.replica_group = group
        self._replicas += 1
        new_id = f"{ct.container_id}-r{self._replicas}"
        image_pages = ct.ubc.privvmpages.held
        self.kernel.trace("replicate_start", target, new_id, f"image={ct.container_id}")

        def finish():
            self._release(target)
            try:
                self.replica_factory(ct, new_id, target)
            except Exception as e:     # noqa: BLE001 - reported to the server
                done(False, f"replica failed to start: {e}")
                return
            self.kernel.trace("replicate_done", target, new_id, f"group={group}")
            done(True, "")

        self.loop.call_later(self._transfer_ms(image_pages), finish)


class NodeAgent:
    """Sensor manager and actuator for one hardware node."""

    def __init__(self, node_id: str, kernel: SimKernel, migrator: Migrator,
                 profiles: Mapping[str, MemoryProfile]):
        self.node_id = node_id
        self.kernel = kernel
        self.migrator = migrator
        self.profiles = dict(profiles)
        self._last_busy: dict[str, int] = {}
        self._last_sample: int | None = None

    @property
    def node(self):
        return self.kernel.nodes[self.node_id]

    def observe(self, now: int) -> LoadObservation:
        node = self.node
        interval = None if self._last_sample is None else now - self._last_sample
        self._last_sample = now
        cts = {}
        node_cpu = 0.0
        for ct in self.kernel.containers_on(self.node_id):
            cpu = 0.0
            server = ct.web_server
            if server is not None:
                busy = server.busy_integral(now)
                last = self._last_busy.get(ct.container_id, busy)
                self._last_busy[ct.container_id] = busy
                if interval:
                    cpu = server.config.cpu_share * (busy - last) / interval / node.cpu_capacity
            node_cpu += cpu
            cts[ct.container_id] = ContainerObservation(
                now / 1000.0, self.node_id, ct.container_id, ct.ubc.snapshot(),
                round(cpu, 6), ct.replica_group)
        return LoadObservation(now / 1000.0, self.node_id, node.ram, node.swap,
                               node.resident_used, node.swap_used,
                               round(min(1.0, node_cpu), 6), cts, node.busy_with_transfer)

    def _container(self, cid: str) -> ContainerState:
        ct = self.kernel.containers.get(cid)
        if ct is None or ct.host != self.node_id:
            raise CommandError("UnknownContainer", f"{cid} is not on {self.node_id}")
        return ct

    def execute(self, req: ActionRequest, done: Done) -> None:
        """Carry out ``req``; ``done`` may be called later for transfers."""
        ct = self._container(req.container_id)
        if req.kind is ActionKind.ADJUST_UBC:
            profile = self.profiles.get(req.payload or "")
            if profile is None:
                raise CommandError("BadRequest", f"unknown profile {req.payload!r}")
            apply_profile(ct.ubc, profile)
            ct.profile = profile.name
            self.kernel.trace("adjust_ubc", self.node_id, ct.container_id, profile.name)
            done(True, "")
        elif req.kind is ActionKind.MIGRATE:
            self.migrator.migrate(ct, req.target, done)
        else:
            self.migrator.replicate(ct, req.target, done)

    def current_profile(self, cid: str) -> str | None:
        p = profile_of(self._container(cid).ubc, list(self.profiles.values()))
        return p.name if p else None
