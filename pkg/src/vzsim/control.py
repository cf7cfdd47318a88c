"""Server-side control loop.

Observations from node agents land in a datacentre/node/container tree of
bounded rings.  Every ``check_interval`` seconds the monitor runs the active
overload policies over that tree; stressed entities are handed to the
resolvers in priority order.  Limit adjustments go straight out, while
migrations and replications are serialized through :class:`ActLater`.
"""

from __future__ import annotations

import itertools
import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .config import ConfigChange, ConfigManager
from .eventloop import EventLoop, Handle
from .observations import ActionKind, ActionRequest, ContainerObservation, LoadObservation
from .policy import (
    Action,
    ClusterView,
    NodeView,
    PolicyRepository,
    ResolverOutcome,
    ResolverRepository,
)
from .ubc import MemoryProfile

log = logging.getLogger(__name__)

DEFAULT_CHECK_INTERVAL = 12
DEFAULT_SAMPLING_PERIOD = 2
DEFAULT_RING_CAPACITY = 20


class UnknownNode(KeyError):
    pass


class StaleObservation(ValueError):
    pass


# Node hierarchy

class _Entry:
    __slots__ = ("kind", "name", "ring", "children")

    def __init__(self, kind: str, name: str, capacity: int):
        self.kind = kind
        self.name = name
        self.ring: deque = deque(maxlen=capacity)
        self.children: dict[str, _Entry] = {}


@dataclass(frozen=True)
class Entity:
    """What a visitor sees of a hierarchy node."""

    kind: str                   # "datacentre" | "node" | "container"
    name: str
    history: tuple
    child_count: int = 0

    @property
    def latest(self):
        return self.history[-1] if self.history else None


class NodeHierarchy:
    def __init__(self, capacity: int = DEFAULT_RING_CAPACITY, name: str = "datacentre"):
        if capacity < 1:
            raise ValueError("ring capacity must be positive")
        self.capacity = capacity
        self._root = _Entry("datacentre", name, capacity)
        self._where: dict[str, str] = {}        # container id -> node id

    def register_node(self, node_id: str) -> None:
        self._root.children.setdefault(node_id, _Entry("node", node_id, self.capacity))

    def unregister_node(self, node_id: str) -> None:
        entry = self._root.children.pop(node_id, None)
        if entry:
            for cid in entry.children:
                self._where.pop(cid, None)

    @property
    def nodes(self) -> list[str]:
        return sorted(self._root.children)

    def set_capacity(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("ring capacity must be positive")
        self.capacity = capacity
        for e in self._entries():
            e.ring = deque(e.ring, maxlen=capacity)

    def _entries(self):
        yield self._root
        for n in self._root.children.values():
            yield n
            yield from n.children.values()

    def record_observation(self, obs: LoadObservation) -> "NodeHierarchy":
        node = self._root.children.get(obs.node_id)
        if node is None:
            raise UnknownNode(obs.node_id)
        if node.ring and obs.timestamp <= node.ring[-1].timestamp:
            raise StaleObservation(f"{obs.node_id}: timestamp {obs.timestamp} not increasing")
        for cid, cobs in obs.containers.items():
            prev_node = self._where.get(cid)
            entry = None
            if prev_node is not None and prev_node != obs.node_id:
                old = self._root.children.get(prev_node)
                entry = old.children.pop(cid, None) if old else None
            entry = entry or node.children.get(cid) or _Entry("container", cid, self.capacity)
            if entry.ring and cobs.timestamp <= entry.ring[-1].timestamp:
                raise StaleObservation(f"{cid}: timestamp {cobs.timestamp} not increasing")
            entry.ring.append(cobs)
            node.children[cid] = entry
            self._where[cid] = obs.node_id
        for cid in [c for c in node.children if c not in obs.containers]:
            del node.children[cid]
            if self._where.get(cid) == obs.node_id:
                del self._where[cid]
        node.ring.append(obs)
        return self

    def node_history(self, node_id: str) -> tuple[LoadObservation, ...]:
        try:
            return tuple(self._root.children[node_id].ring)
        except KeyError:
            raise UnknownNode(node_id) from None

    def container_history(self, container_id: str) -> tuple[ContainerObservation, ...]:
        node_id = self._where.get(container_id)
        if node_id is None:
            return ()
        return tuple(self._root.children[node_id].children[container_id].ring)

    def container_node(self, container_id: str) -> str | None:
        return self._where.get(container_id)

    def latest_observations(self) -> list[LoadObservation]:
        return [n.ring[-1] for _, n in sorted(self._root.children.items()) if n.ring]

    def accept(self, visitor: "HierarchyVisitor") -> None:
        self._visit(self._root, visitor)

    def _visit(self, entry: _Entry, visitor: "HierarchyVisitor") -> bool:
        ent = Entity(entry.kind, entry.name, tuple(entry.ring), len(entry.children))
        if not entry.children and entry.kind == "container":
            return visitor.visit_leaf(ent)
        if visitor.visit_enter(ent):
            for _, child in sorted(entry.children.items()):
                if not self._visit(child, visitor):
                    break
        return visitor.visit_leave(ent)


class HierarchyVisitor:
    """Depth-first visitor; returning False stops visiting siblings."""

    def visit_enter(self, entity: Entity) -> bool:
        return True

    def visit_leave(self, entity: Entity) -> bool:
        return True

    def visit_leaf(self, entity: Entity) -> bool:
        return True

    def result(self):
        return None


def visit(hier: NodeHierarchy, visitor: HierarchyVisitor):
    hier.accept(visitor)
    return visitor.result()


class CountingVisitor(HierarchyVisitor):
    def __init__(self):
        self.counts: dict[str, int] = {}

    def _bump(self, entity):
        self.counts[entity.kind] = self.counts.get(entity.kind, 0) + 1

    def visit_enter(self, entity):
        self._bump(entity)
        return True

    def visit_leaf(self, entity):
        self._bump(entity)
        return True

    def result(self):
        return sum(self.counts.values())


class MaxUsageVisitor(HierarchyVisitor):
    """Finds the container with the most memory in use (latest sample)."""

    def __init__(self):
        self.best: tuple[int, str] | None = None

    def visit_leaf(self, entity):
        obs = entity.latest
        if obs is not None:
            key = (obs.ubc.oomguarpages.held, entity.name)
            if self.best is None or key[0] > self.best[0]:
                self.best = key
        return True

    def result(self):
        return None if self.best is None else self.best[1]


# actlater

class TransferObserver:
    def started(self, req: ActionRequest) -> None:
        pass

    def succeeded(self, req: ActionRequest) -> None:
        pass

    def failed(self, req: ActionRequest, reason: str) -> None:
        pass


class TransferExecutor:
    """Carries out one transfer; must eventually call ``done(ok, reason)``."""

    def start_transfer(self, req: ActionRequest,
                       done: Callable[[bool, str], None]) -> None:
        raise NotImplementedError

    def is_busy(self, node_id: str) -> bool:
        return False


class ActLater:
    """FIFO queue of migrations and replications, one in flight at a time.

    Nothing overtakes the head of the queue, even when it touches only idle
    nodes.  A head whose nodes are busy for other reasons waits.
    """

    def __init__(self, executor: TransferExecutor | None = None):
        self.executor = executor
        self.queue: deque[ActionRequest] = deque()
        self.in_flight: ActionRequest | None = None
        self.dispatched: list[int] = []
        self._observers: list[tuple[TransferObserver, frozenset]] = []
        self._pumping = False

    def add_observer(self, observer: TransferObserver,
                     kinds: Iterable[ActionKind] = (ActionKind.MIGRATE, ActionKind.REPLICATE)):
        self._observers.append((observer, frozenset(kinds)))

    def _notify(self, req: ActionRequest, event: str, *args) -> None:
        for obs, kinds in list(self._observers):
            if req.kind in kinds:
                getattr(obs, event)(req, *args)

    def submit(self, req: ActionRequest) -> None:
        if not req.is_transfer:
            raise ValueError(f"{req.kind.value} requests are not queued")
        self.queue.append(req)
        self.pump()

    def busy_nodes(self) -> set[str]:
        return set(self.in_flight.nodes) if self.in_flight else set()

    def is_busy(self, node_id: str) -> bool:
        if node_id in self.busy_nodes():
            return True
        return bool(self.executor and self.executor.is_busy(node_id))

    def pending_for(self, container_id: str) -> bool:
        if self.in_flight and self.in_flight.container_id == container_id:
            return True
        return any(r.container_id == container_id for r in self.queue)

    def pump(self, executor: TransferExecutor | None = None) -> None:
        if executor is not None:
            self.executor = executor
        if self._pumping or self.executor is None:
            return
        self._pumping = True
        try:
            while self.in_flight is None and self.queue:
                head = self.queue[0]
                if any(self.executor.is_busy(n) for n in head.nodes):
                    break
                self.queue.popleft()
                self.in_flight = head
                self.dispatched.append(head.request_id)
                self._notify(head, "started")
                self.executor.start_transfer(head, self._done_callback(head))
        finally:
            self._pumping = False

    def _done_callback(self, req: ActionRequest):
        fired = []

        def done(ok: bool, reason: str = "") -> None:
            if fired:
                raise RuntimeError(f"request {req.request_id} completed twice")
            fired.append(True)
            self.in_flight = None
            if ok:
                self._notify(req, "succeeded")
            else:
                self._notify(req, "failed", reason)
            self.pump()
        return done


def actlater_submit(queue: ActLater, req: ActionRequest) -> None:
    queue.submit(req)


def actlater_pump(queue: ActLater, executor: TransferExecutor) -> None:
    queue.pump(executor)


# Policy state from configuration

STATE_SECTION = "server/policy/state"
OVERLOAD_SECTION = "server/policy/overload"
DATA_SECTION = "server/data"


def _state_key(option: str) -> tuple[str, str] | None:
    parts = option.split("-", 2)
    if len(parts) != 3 or parts[0] != "overload":
        return None
    return parts[1], parts[2]


class ConfigPolicyStateLoader:
    """Feeds policy states and the active-policy selection from configuration."""

    def __init__(self, config: ConfigManager, policies: PolicyRepository):
        self.config = config
        self.policies = policies
        states = config.tree.options(STATE_SECTION) if STATE_SECTION in config.tree else {}
        for option, value in states.items():
            self._apply_state(option, value)
        active = config.get(OVERLOAD_SECTION, "active_policies", None)
        if active:
            policies.set_active(active)
        config.subscribe(STATE_SECTION, self._on_change, "policy-state-loader")
        config.subscribe(OVERLOAD_SECTION, self._on_change, "policy-selection")

    def get_state(self, resource: str, policy_id: str) -> Mapping:
        return self.policies.get_state(resource, policy_id)

    def _apply_state(self, option: str, value) -> None:
        key = _state_key(option)
        if key is not None and isinstance(value, dict):
            self.policies.set_state(key[0], key[1], value)

    def _on_change(self, change: ConfigChange) -> None:
        if change.path == STATE_SECTION:
            self._apply_state(change.option, change.new)
        elif change.path == OVERLOAD_SECTION and change.option == "active_policies":
            self.policies.set_active(change.new)


# Monitor

@dataclass(frozen=True)
class ActionLogEntry:
    time: float
    kind: str
    container: str | None
    source: str | None
    target: str | None
    outcome: str
    detail: str = ""

    def as_row(self) -> list:
        return [f"{self.time:.3f}", self.kind, self.container or "", self.source or "",
                self.target or "", self.outcome, self.detail]


ACTION_LOG_HEADER = ["time", "kind", "container", "source", "target", "outcome", "detail"]


class Monitor(TransferObserver):
    """Runs stress checks and turns resolver outcomes into action requests."""

    def __init__(self, hierarchy: NodeHierarchy, policies: PolicyRepository,
                 resolvers: ResolverRepository, actlater: ActLater, *,
                 profiles: Sequence[MemoryProfile] = (),
                 adjust: Callable[[ActionRequest], None] | None = None,
                 clock: Callable[[], float] = lambda: 0.0):
        self.hierarchy = hierarchy
        self.policies = policies
        self.resolvers = resolvers
        self.actlater = actlater
        self.profiles = tuple(profiles)
        self.adjust = adjust or (lambda req: None)
        self.clock = clock
        self.action_log: list[ActionLogEntry] = []
        self.check_times: list[float] = []
        self._ids = itertools.count(1)
        self._hold_until_fresh: dict[str, float] = {}
        self._followups: dict[int, str] = {}
        self._loop: EventLoop | None = None
        self._timer: Handle | None = None
        self._last_check_ms: int | None = None
        self.check_interval = DEFAULT_CHECK_INTERVAL
        actlater.add_observer(self)

    # scheduling

    def attach(self, loop: EventLoop, config: ConfigManager | None = None,
               first_check_ms: int | None = None) -> None:
        self._loop = loop
        if config is not None:
            self.check_interval = config.get(OVERLOAD_SECTION, "check_interval",
                                             DEFAULT_CHECK_INTERVAL)
            cap = config.get(DATA_SECTION, "max_in_memory_observations", None)
            if cap:
                self.hierarchy.set_capacity(int(cap))
            config.subscribe(OVERLOAD_SECTION, self._on_config, "monitor")
            config.subscribe(DATA_SECTION, self._on_config, "monitor-data")
        first = loop.now + self._interval_ms() if first_check_ms is None else first_check_ms
        self._timer = loop.call_at(first, self._tick)

    def _interval_ms(self) -> int:
        return int(round(float(self.check_interval) * 1000))

    def _tick(self) -> None:
        self._last_check_ms = self._loop.now
        self.run_stress_check()
        self._timer = self._loop.call_later(self._interval_ms(), self._tick)

    def _on_config(self, change: ConfigChange) -> None:
        if change.path == OVERLOAD_SECTION and change.option == "check_interval":
            self.check_interval = change.new
            if self._loop is not None and self._timer is not None:
                self._timer.cancel()
                base = self._last_check_ms if self._last_check_ms is not None else self._loop.now
                self._timer = self._loop.call_at(max(self._loop.now, base + self._interval_ms()),
                                                 self._tick)
        elif change.path == DATA_SECTION and change.option == "max_in_memory_observations":
            self.hierarchy.set_capacity(int(change.new))

    # checks

    def cluster_view(self) -> ClusterView:
        view = ClusterView.from_observations(self.hierarchy.latest_observations(), self.profiles)
        nodes = {}
        for nid, n in view.nodes.items():
            busy = n.busy or self.actlater.is_busy(nid)
            nodes[nid] = n if busy == n.busy else NodeView(
                n.node_id, n.ram, n.swap, n.resident_used, n.swap_used, n.cpu_used, busy,
                n.containers)
        return ClusterView(nodes, view.profiles)

    def evaluate(self) -> list[ResolverOutcome]:
        """Resolver outcomes for the current hierarchy; no side effects."""
        view = self.cluster_view()
        outcomes = []
        for nid in sorted(view.nodes):
            node = view.nodes[nid]
            for cview in node.containers:
                history = self.hierarchy.container_history(cview.container_id)
                out = self._check_entity(lambda pol, st: pol.container_verdict(history, st),
                                         lambda res, st: res.resolve_container(cview, view, st))
                if out is not None:
                    outcomes.append(out)
            nhist = self.hierarchy.node_history(nid)
            out = self._check_entity(lambda pol, st: pol.node_verdict(nhist, st),
                                     lambda res, st: res.resolve_node(node, view, st))
            if out is not None:
                outcomes.append(out)
        return outcomes

    def _check_entity(self, verdict, resolve) -> ResolverOutcome | None:
        for resource, policy in self.policies.active():
            state = self.policies.active_state(resource)
            if not verdict(policy, state):
                continue
            last = None
            for reg in self.resolvers.for_resource(resource):
                last = resolve(reg.resolver, state)
                if last.resolved:
                    return last
            if last is not None:
                return last
        return None

    def run_stress_check(self) -> list[ActionRequest]:
        now = self.clock()
        self.check_times.append(now)
        issued: list[ActionRequest] = []
        touched: set[str] = set()
        for out in self.evaluate():
            cid = out.container_id
            if cid is None or cid in touched:
                continue
            if self.actlater.pending_for(cid) or self._held(cid):
                continue
            if not out.resolved:
                self._log(out.action.value, cid, out.source, None, "unresolved", out.reason)
                continue
            req = self._to_request(out)
            touched.add(cid)
            self._log(out.action.value, cid, out.source, out.target, "issued", out.profile or "")
            self._hold_until_fresh[cid] = now
            issued.append(req)
            if req.kind is ActionKind.ADJUST_UBC:
                self.adjust(req)
            else:
                if req.kind is ActionKind.MIGRATE and out.profile:
                    self._followups[req.request_id] = out.profile
                self.actlater.submit(req)
        return issued

    def _held(self, cid: str) -> bool:
        since = self._hold_until_fresh.get(cid)
        if since is None:
            return False
        hist = self.hierarchy.container_history(cid)
        if hist and hist[-1].timestamp > since:
            del self._hold_until_fresh[cid]
            return False
        return True

    def _to_request(self, out: ResolverOutcome) -> ActionRequest:
        rid = next(self._ids)
        if out.action is Action.RAISED_LIMITS:
            return ActionRequest(ActionKind.ADJUST_UBC, out.container_id, out.source,
                                 out.target, out.profile, rid)
        if out.action is Action.MIGRATION_REQUESTED:
            return ActionRequest(ActionKind.MIGRATE, out.container_id, out.source,
                                 out.target, out.profile, rid)
        return ActionRequest(ActionKind.REPLICATE, out.container_id, out.source,
                             out.target, out.profile, rid)

    def _log(self, kind, container, source, target, outcome, detail="") -> None:
        entry = ActionLogEntry(self.clock(), kind, container, source, target, outcome, detail)
        self.action_log.append(entry)
        log.info("%s %s %s->%s %s %s", kind, container, source, target, outcome, detail)

    def record_command_result(self, req: ActionRequest, ok: bool, reason: str = "") -> None:
        self._log(req.kind.value, req.container_id, req.source, req.target,
                  "succeeded" if ok else "failed", reason or (req.payload or ""))

    # transfer notifications

    def started(self, req):
        self._log(req.kind.value, req.container_id, req.source, req.target, "started")

    def succeeded(self, req):
        self._log(req.kind.value, req.container_id, req.source, req.target, "succeeded")
        self._hold_until_fresh[req.container_id] = self.clock()
        profile = self._followups.pop(req.request_id, None)
        if profile is not None:
            follow = ActionRequest(ActionKind.ADJUST_UBC, req.container_id, req.target,
                                   req.target, profile, next(self._ids))
            self._log(Action.RAISED_LIMITS.value, req.container_id, req.target, req.target,
                      "issued", profile)
            self.adjust(follow)

    def failed(self, req, reason):
        self._followups.pop(req.request_id, None)
        self._log(req.kind.value, req.container_id, req.source, req.target, "failed", reason)
        self._hold_until_fresh[req.container_id] = self.clock()


def run_stress_check(hier: NodeHierarchy, policy_repo: PolicyRepository,
                     resolver_repo: ResolverRepository, actlater: ActLater,
                     profiles: Sequence[MemoryProfile] = (),
                     adjust: Callable[[ActionRequest], None] | None = None) -> list[ActionRequest]:
    """One-shot stress check with a throwaway monitor."""
    mon = Monitor(hier, policy_repo, resolver_repo, actlater, profiles=profiles, adjust=adjust)
    try:
        return mon.run_stress_check()
    finally:
        actlater._observers = [(o, k) for o, k in actlater._observers if o is not mon]
