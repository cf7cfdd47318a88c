"""Process lifecycle on top of the memory model.

The kernel owns the nodes and containers, allocates pids, charges private
allocations against ``privvmpages``, backs them with memory and runs the
out-of-memory killer when a touch cannot be satisfied.
"""

from __future__ import annotations

import itertools
import logging
from typing import Callable

from ..ubc import ChargeResult, MemoryProfile, charge_privvm, mib_to_pages, new_table
from .memory import (
    ContainerState,
    HardwareNodeState,
    NoKillableProcess,
    ProcessRole,
    SimProcess,
    TouchResult,
    attach_process,
    oom_kill,
    release_process,
    touch_pages,
)

log = logging.getLogger(__name__)

TraceFn = Callable[[str, str | None, str | None, str], None]
ExitHook = Callable[[ContainerState, SimProcess, str], None]


class InvariantViolation(AssertionError):
    pass


class SimulationHalted(RuntimeError):
    pass


class SimKernel:
    def __init__(self, clock: Callable[[], int] = lambda: 0, trace: TraceFn | None = None):
        self.clock = clock
        self.trace = trace or (lambda kind, node, ct, detail: None)
        self.nodes: dict[str, HardwareNodeState] = {}
        self.containers: dict[str, ContainerState] = {}
        self._pids = itertools.count(100)
        self._exit_hooks: dict[str, list[ExitHook]] = {}

    # topology

    def add_node(self, node_id: str, ram: int, swap: int,
                 cpu_capacity: float = 1.0) -> HardwareNodeState:
        if node_id in self.nodes:
            raise ValueError(f"duplicate node {node_id}")
        node = HardwareNodeState(node_id, ram, swap, cpu_capacity=cpu_capacity)
        self.nodes[node_id] = node
        return node

    def add_container(self, container_id: str, host: str, profile: MemoryProfile,
                      replica_group: str | None = None) -> ContainerState:
        if container_id in self.containers:
            raise ValueError(f"duplicate container {container_id}")
        node = self.nodes[host]
        ct = ContainerState(container_id, host, new_table(profile), profile.name,
                            replica_group=replica_group)
        node.tables[container_id] = ct.ubc
        self.containers[container_id] = ct
        return ct

    def node_of(self, ct: ContainerState) -> HardwareNodeState:
        return self.nodes[ct.host]

    def containers_on(self, node_id: str) -> list[ContainerState]:
        return [c for _, c in sorted(self.containers.items()) if c.host == node_id]

    def on_exit(self, container_id: str, hook: ExitHook) -> None:
        self._exit_hooks.setdefault(container_id, []).append(hook)

    def host_has_free(self, node: HardwareNodeState, pages: int) -> bool:
        return node.free_pages >= pages

    # processes

    def spawn(self, ct: ContainerState, name: str, role: ProcessRole, *,
              virtual_pages: int, private_pages: int, kmem_bytes: int = 0,
              high_priority: bool = False, parent: SimProcess | None = None,
              is_root: bool = False, niceness: int = 0) -> SimProcess | None:
        """Fork a process that touches all of its private pages.

        Returns None when the allocation is refused by the beancounter or the
        new process is itself chosen by the OOM killer.
        """
        node = self.node_of(ct)
        if private_pages > 0:
            res = charge_privvm(ct.ubc, private_pages, self.host_has_free(node, private_pages),
                                high_priority)
            if res is not ChargeResult.GRANTED:
                self.trace("charge_denied", node.node_id, ct.container_id,
                           f"{name} {private_pages} pages")
                return None
        proc = SimProcess(next(self._pids), ct.container_id, name, role,
                          virtual_pages=virtual_pages, private_pages=private_pages,
                          kmem_bytes=kmem_bytes, niceness=niceness, is_root=is_root,
                          start_time=self.clock(), last_touch=self.clock(),
                          parent_pid=parent.pid if parent else None)
        attach_process(node, ct, proc)
        self.trace("spawn", node.node_id, ct.container_id, f"pid={proc.pid} {name}")
        if not self._touch(node, ct, proc, private_pages):
            return None
        return proc

    def grow(self, ct: ContainerState, proc: SimProcess, virtual_delta: int,
             private_delta: int, high_priority: bool = False) -> bool:
        node = self.node_of(ct)
        if private_delta > 0:
            res = charge_privvm(ct.ubc, private_delta,
                                self.host_has_free(node, private_delta), high_priority)
            if res is not ChargeResult.GRANTED:
                self.trace("charge_denied", node.node_id, ct.container_id,
                           f"pid={proc.pid} grow {private_delta} pages")
                return False
        proc.virtual_pages += virtual_delta
        proc.private_pages += private_delta
        self.trace("grow", node.node_id, ct.container_id, f"pid={proc.pid} +{private_delta}")
        return self._touch(node, ct, proc, private_delta)

    def _touch(self, node, ct, proc, pages) -> bool:
        while True:
            result = touch_pages(node, ct, proc, pages, self.clock())
            if result is not TouchResult.OOM_TRIGGERED:
                if result is TouchResult.SWAPPED_OTHERS:
                    self.trace("swap_out", node.node_id, ct.container_id, f"for pid={proc.pid}")
                return True
            try:
                victim_ct, victim = self.oom_kill(node)
            except NoKillableProcess as e:
                raise SimulationHalted(str(e)) from e
            if victim is proc:
                return False

    def oom_kill(self, node: HardwareNodeState) -> tuple[ContainerState, SimProcess]:
        cts = self.containers_on(node.node_id)
        victims = {p.pid: (c, p) for c in cts for p in c.processes.values()}
        pid = oom_kill(node, cts, self.clock())
        ct, proc = victims[pid]
        self.trace("oom_kill", node.node_id, ct.container_id, f"pid={pid} {proc.name}")
        self._notify_exit(ct, proc, "oom")
        return ct, proc

    def exit_process(self, ct: ContainerState, proc: SimProcess, reason: str = "exit") -> None:
        node = self.node_of(ct)
        release_process(node, ct, proc)
        self.trace("exit", node.node_id, ct.container_id, f"pid={proc.pid} {reason}")
        self._notify_exit(ct, proc, reason)

    def _notify_exit(self, ct, proc, reason) -> None:
        for hook in list(self._exit_hooks.get(ct.container_id, ())):
            hook(ct, proc, reason)

    # checks

    def check_invariants(self) -> None:
        """Memory conservation and allocation bookkeeping, per node and container."""
        for node in self.nodes.values():
            cts = self.containers_on(node.node_id)
            charged = sum(c.ubc.oomguarpages.held for c in cts) + node.host_touched_pages()
            used = node.resident_used + node.swap_used
            if charged != used:
                raise InvariantViolation(
                    f"{node.node_id}: charged pages {charged} != resident+swap {used}")
            if node.resident_used > node.ram or node.swap_used > node.swap:
                raise InvariantViolation(f"{node.node_id}: memory pools overflowed")
            if node.resident_used < 0 or node.swap_used < 0:
                raise InvariantViolation(f"{node.node_id}: negative memory usage")
        for ct in self.containers.values():
            private = sum(p.private_pages for p in ct.processes.values())
            if private != ct.ubc.privvmpages.held:
                raise InvariantViolation(
                    f"{ct.container_id}: privvmpages held {ct.ubc.privvmpages.held} "
                    f"!= process private pages {private}")


# (name, role, virtual MiB, private MiB, root)
CONTAINER_BASE = (
    ("init", ProcessRole.INIT, 2, 1, True),
    ("udevd", ProcessRole.OTHER, 2, 1, True),
    ("syslogd", ProcessRole.OTHER, 2, 1, True),
    ("sshd", ProcessRole.OTHER, 6, 3, True),
)
DATABASE_SERVICE = ("mysqld", ProcessRole.SERVICE, 40, 10, False)


def boot_container(kernel: SimKernel, ct: ContainerState, services=()) -> list[SimProcess]:
    """Start the system processes of a freshly created container."""
    procs = []
    for name, role, virt, priv, root in tuple(CONTAINER_BASE) + tuple(services):
        p = kernel.spawn(ct, name, role, virtual_pages=mib_to_pages(virt),
                         private_pages=mib_to_pages(priv), is_root=root)
        if p is None:
            raise SimulationHalted(f"{ct.container_id}: cannot start {name}")
        procs.append(p)
    return procs
