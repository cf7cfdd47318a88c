"""Hardware nodes, processes and demand-paged memory.

Pages are backed lazily: a process first allocates private pages (charged
to ``privvmpages``) and only consumes RAM or swap when it touches them.
When RAM is full the least recently touched pages of other processes are
pushed to swap.  When RAM and swap are both full the out-of-memory killer
has to pick a victim.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from ..ubc import UbcTable, account


class TouchResult(enum.Enum):
    RESIDENT = "resident"
    SWAPPED_OTHERS = "swapped_others"
    OOM_TRIGGERED = "oom_triggered"


class ProcessRole(str, enum.Enum):
    INIT = "init"
    SERVICE = "service"
    HTTP_PARENT = "http_parent"
    HTTP_WORKER = "http_worker"
    CHECKPOINT = "checkpoint"
    OTHER = "other"


class ImmuneProcess(Exception):
    """Init and kernel threads are never candidates for the OOM killer."""


class NoKillableProcess(Exception):
    """Memory is exhausted but every process is immune or guaranteed."""


class OutOfMemory(Exception):
    pass


@dataclass(eq=False)
class SimProcess:
    pid: int
    container_id: str | None
    name: str = ""
    role: ProcessRole = ProcessRole.OTHER
    virtual_pages: int = 0      # whole address space, shared text included
    private_pages: int = 0      # charged to privvmpages
    touched_pages: int = 0
    resident_pages: int = 0
    swapped_pages: int = 0
    kmem_bytes: int = 0
    niceness: int = 0
    is_root: bool = False
    interacts_with_hardware: bool = False
    is_kernel_thread: bool = False
    start_time: int = 0         # ms
    parent_pid: int | None = None
    last_touch: int = 0

    @property
    def immune(self) -> bool:
        return self.is_kernel_thread or self.role is ProcessRole.INIT


@dataclass
class HardwareNodeState:
    node_id: str
    ram: int
    swap: int
    resident_used: int = 0
    swap_used: int = 0
    busy_with_transfer: bool = False
    cpu_capacity: float = 1.0
    cpu_used: float = 0.0
    processes: dict[int, SimProcess] = field(default_factory=dict)
    tables: dict[str, UbcTable] = field(default_factory=dict)

    @property
    def containers(self) -> set[str]:
        return set(self.tables)

    @property
    def free_pages(self) -> int:
        return self.ram + self.swap - self.resident_used - self.swap_used

    def host_touched_pages(self) -> int:
        return sum(p.touched_pages for p in self.processes.values()
                   if p.container_id is None)


@dataclass
class ContainerState:
    container_id: str
    host: str
    ubc: UbcTable
    profile: str | None = None
    processes: dict[int, SimProcess] = field(default_factory=dict)
    web_server: object | None = None
    replica_group: str | None = None


def attach_process(node: HardwareNodeState, container: ContainerState | None,
                   proc: SimProcess) -> None:
    node.processes[proc.pid] = proc
    if container is not None:
        container.processes[proc.pid] = proc
        if proc.kmem_bytes:
            account(container.ubc, "kmemsize", proc.kmem_bytes)


def touch_pages(node: HardwareNodeState, container: ContainerState | None,
                process: SimProcess, pages: int, now: int = 0) -> TouchResult:
    """Back ``pages`` not-yet-used pages of ``process`` with memory."""
    if pages < 0 or pages > process.private_pages - process.touched_pages:
        raise ValueError(f"pid {process.pid}: cannot touch {pages} pages")
    if pages == 0:
        return TouchResult.RESIDENT
    free_ram = node.ram - node.resident_used
    free_swap = node.swap - node.swap_used
    if pages > free_ram + free_swap:
        return TouchResult.OOM_TRIGGERED
    result = TouchResult.RESIDENT
    if pages > free_ram:
        _evict(node, pages - free_ram, exclude=process.pid)
        result = TouchResult.SWAPPED_OTHERS
    node.resident_used += pages
    process.resident_pages += pages
    process.touched_pages += pages
    process.last_touch = now
    if container is not None:
        account(container.ubc, "oomguarpages", pages)
        account(container.ubc, "physpages", pages)
    return result


def _evict(node: HardwareNodeState, need: int, exclude: int) -> None:
    # Least recently touched first; the toucher's own pages go last.
    order = sorted((p for p in node.processes.values() if p.resident_pages > 0),
                   key=lambda p: (p.pid == exclude, p.last_touch, p.pid))
    for p in order:
        if need <= 0:
            break
        n = min(need, p.resident_pages)
        p.resident_pages -= n
        p.swapped_pages += n
        node.resident_used -= n
        node.swap_used += n
        if p.container_id is not None:
            node.tables[p.container_id].physpages.release(n)
        need -= n
    if need > 0:
        raise OutOfMemory("eviction could not free enough RAM")


def release_process(node: HardwareNodeState, container: ContainerState | None,
                    process: SimProcess) -> None:
    """Tear down a process and return every unit it held."""
    node.resident_used -= process.resident_pages
    node.swap_used -= process.swapped_pages
    node.processes.pop(process.pid, None)
    if container is not None:
        t = container.ubc
        t.oomguarpages.release(process.touched_pages)
        t.physpages.release(process.resident_pages)
        t.privvmpages.release(process.private_pages)
        if process.kmem_bytes:
            t.kmemsize.release(process.kmem_bytes)
        container.processes.pop(process.pid, None)
    process.resident_pages = process.swapped_pages = process.touched_pages = 0


def rehost(container: ContainerState, src: HardwareNodeState,
           dst: HardwareNodeState, now: int = 0) -> None:
    """Move every page of ``container`` from ``src`` to ``dst``."""
    used = sum(p.touched_pages for p in container.processes.values())
    if used > dst.free_pages:
        raise OutOfMemory(f"{dst.node_id} cannot hold {used} pages")
    table = src.tables.pop(container.container_id)
    procs = sorted(container.processes.values(), key=lambda p: p.pid)
    for p in procs:
        src.resident_used -= p.resident_pages
        src.swap_used -= p.swapped_pages
        src.processes.pop(p.pid)
        table.physpages.release(p.resident_pages)
        p.resident_pages = p.swapped_pages = 0
    dst.tables[container.container_id] = table
    for p in procs:
        dst.processes[p.pid] = p
        n = p.touched_pages
        free_ram = dst.ram - dst.resident_used
        if n > free_ram:
            _evict(dst, min(n - free_ram, dst.resident_used), exclude=p.pid)
            free_ram = dst.ram - dst.resident_used
        r = min(n, free_ram)
        p.resident_pages = r
        p.swapped_pages = n - r
        dst.resident_used += r
        dst.swap_used += n - r
        p.last_touch = now
        table.physpages.add(r)
    container.host = dst.node_id


class Badness(NamedTuple):
    """OOM ranking key: container excess first, then per-process points."""

    excess: int
    points: float


def oom_badness(process: SimProcess, container_excess: int, *, now: int = 0,
                children_pages: int = 0) -> Badness:
    if process.immune:
        raise ImmuneProcess(f"pid {process.pid} ({process.name}) is immune")
    points = float(process.virtual_pages) + children_pages / 2.0
    if process.niceness > 0:
        points *= 1 + process.niceness / 20.0
    if process.is_root:
        points /= 4
    if process.interacts_with_hardware:
        points /= 4
    age_s = max(0.0, (now - process.start_time) / 1000.0)
    points /= 1 + math.log2(1 + age_s)
    return Badness(container_excess, points)


def container_excess(table: UbcTable) -> int:
    return table.oom_usage_pages() - table.oomguarpages.barrier


def select_victim(node: HardwareNodeState, containers: Iterable[ContainerState],
                  now: int = 0) -> tuple[ContainerState, SimProcess]:
    best = None
    for ct in containers:
        if ct.host != node.node_id:
            continue
        excess = container_excess(ct.ubc)
        if excess < 0:
            continue
        children: dict[int, int] = {}
        for p in ct.processes.values():
            if p.parent_pid is not None:
                children[p.parent_pid] = children.get(p.parent_pid, 0) + p.virtual_pages
        for p in ct.processes.values():
            if p.immune:
                continue
            key = (oom_badness(p, excess, now=now, children_pages=children.get(p.pid, 0)),
                   p.pid)
            if best is None or key > best[0]:
                best = (key, ct, p)
    if best is None:
        raise NoKillableProcess(
            f"{node.node_id}: memory exhausted and no container is over its guarantee")
    return best[1], best[2]


def oom_kill(node: HardwareNodeState, containers: Iterable[ContainerState],
             now: int = 0) -> int:
    ct, victim = select_victim(node, containers, now)
    release_process(node, ct, victim)
    ct.ubc.oomguarpages.failcnt += 1
    return victim.pid
