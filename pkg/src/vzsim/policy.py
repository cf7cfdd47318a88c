"""Stress detection and stress resolution plug-ins.

Overload policies decide whether a container or node is stressed; overload
resolvers decide what to do about it.  Both are registered under a
``(resource, id)`` pair such as ``("mem", "default")``.  Policies carry
their tunables in a replaceable state mapping (e.g. ``{"threshold": 0.8}``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Sequence

from .observations import ContainerObservation, LoadObservation
from .ubc import (
    BUFFER_PARAMS,
    UNLIMITED,
    MemoryProfile,
    UbcTable,
    bytes_to_pages,
    next_profile,
)

DEFAULT_REPLICATION_THRESHOLD = 0.75


class BarrierZero(ValueError):
    """A barrier used as a score denominator is zero or unlimited."""


class MissingThreshold(KeyError):
    pass


class Verdict(enum.Enum):
    STRESSED = "stressed"
    NOT_STRESSED = "not_stressed"

    def __bool__(self):
        return self is Verdict.STRESSED


@dataclass(frozen=True)
class ScoreComponent:
    name: str
    raw: float
    normalized: float


@dataclass(frozen=True)
class StressScore:
    container_id: str
    components: tuple[ScoreComponent, ...]

    @property
    def overall(self) -> float:
        return max(c.normalized for c in self.components)

    def normalized(self) -> tuple[float, ...]:
        return tuple(c.normalized for c in self.components)


def _denominator(value, what: str) -> int:
    if value is UNLIMITED or value == 0:
        raise BarrierZero(f"{what} barrier is {value!r}")
    return value


def mem_score(prev: ContainerObservation, curr: ContainerObservation) -> StressScore:
    """Score memory stress from two consecutive samples of one container."""
    if prev.container_id != curr.container_id:
        raise ValueError("observations belong to different containers")
    p, c = prev.ubc, curr.ubc
    oom_barrier = _denominator(c.oomguarpages.barrier, "oomguarpages")
    priv_barrier = _denominator(c.privvmpages.barrier, "privvmpages")

    oom_fails = c.oomguarpages.failcnt - p.oomguarpages.failcnt
    priv_fails = c.privvmpages.failcnt - p.privvmpages.failcnt
    used = (c.oomguarpages.held + bytes_to_pages(c.kmemsize.held)
            + sum(bytes_to_pages(c[b].held) for b in BUFFER_PARAMS))
    used_ratio = used / oom_barrier
    alloc_ratio = c.privvmpages.held / priv_barrier
    return StressScore(curr.container_id, (
        ScoreComponent("oomguarpages_failcnt", oom_fails, 0.0 if oom_fails == 0 else 1.0),
        ScoreComponent("privvmpages_failcnt", priv_fails, 0.0 if priv_fails == 0 else 1.0),
        ScoreComponent("usage_vs_oomguarpages", used_ratio, min(1.0, used_ratio)),
        ScoreComponent("privvmpages_vs_barrier", alloc_ratio, min(1.0, alloc_ratio)),
    ))


def _threshold(state: Mapping) -> float:
    try:
        return float(state["threshold"])
    except KeyError:
        raise MissingThreshold("policy state has no 'threshold'") from None


def mem_overload_check(score: StressScore, state: Mapping) -> Verdict:
    return Verdict.STRESSED if score.overall > _threshold(state) else Verdict.NOT_STRESSED


def ar1_coefficient(series: Sequence[float]) -> float:
    """Least-squares fit of x[t+1] = a * x[t]; 1.0 when undetermined."""
    xs = list(series)
    num = sum(a * b for a, b in zip(xs, xs[1:]))
    den = sum(a * a for a in xs[:-1])
    if len(xs) < 2 or den == 0:
        return 1.0
    return num / den


def cpu_overload_check(history: Sequence[float], state: Mapping) -> Verdict:
    """Predict next-interval utilisation; stressed when predicted idle is short."""
    threshold = _threshold(state)
    if not history:
        raise ValueError("empty utilisation window")
    predicted = min(1.0, max(0.0, ar1_coefficient(history) * history[-1]))
    return Verdict.STRESSED if 1.0 - predicted < threshold else Verdict.NOT_STRESSED


# Cluster snapshot seen by resolvers.

@dataclass(frozen=True)
class ContainerView:
    container_id: str
    node_id: str
    ubc: UbcTable
    cpu_used: float = 0.0
    replica_group: str | None = None

    @property
    def guarantee(self) -> int:
        return self.ubc.guarantee_pages()

    def utilization(self) -> float:
        return self.ubc.oom_usage_pages() / _denominator(
            self.ubc.oomguarpages.barrier, "oomguarpages")


@dataclass(frozen=True)
class NodeView:
    node_id: str
    ram: int
    swap: int
    resident_used: int = 0
    swap_used: int = 0
    cpu_used: float = 0.0
    busy: bool = False
    containers: tuple[ContainerView, ...] = ()

    @property
    def committed(self) -> float:
        total = 0.0
        for c in self.containers:
            g = c.guarantee
            total += math.inf if g is UNLIMITED else g
        return total

    @property
    def uncommitted(self) -> float:
        return self.ram + self.swap - self.committed


@dataclass(frozen=True)
class ClusterView:
    nodes: Mapping[str, NodeView]
    profiles: tuple[MemoryProfile, ...] = ()

    def container(self, container_id: str) -> ContainerView:
        for n in self.nodes.values():
            for c in n.containers:
                if c.container_id == container_id:
                    return c
        raise KeyError(container_id)

    @classmethod
    def from_observations(cls, observations: Sequence[LoadObservation],
                          profiles: Sequence[MemoryProfile] = ()) -> "ClusterView":
        nodes = {}
        for obs in observations:
            cts = tuple(
                ContainerView(c.container_id, obs.node_id, c.ubc, c.cpu_used, c.replica_group)
                for c in sorted(obs.containers.values(), key=lambda c: c.container_id))
            nodes[obs.node_id] = NodeView(obs.node_id, obs.ram, obs.swap, obs.resident_used,
                                          obs.swap_used, obs.cpu_used,
                                          obs.busy_with_transfer, cts)
        return cls(MappingProxyType(nodes), tuple(profiles))


class Action(enum.Enum):
    RAISED_LIMITS = "RaisedLimits"
    MIGRATION_REQUESTED = "MigrationRequested"
    REPLICATION_REQUESTED = "ReplicationRequested"
    UNRESOLVED = "Unresolved"


@dataclass(frozen=True)
class ResolverOutcome:
    action: Action
    container_id: str | None = None
    source: str | None = None
    target: str | None = None
    profile: str | None = None
    reason: str = ""

    @property
    def resolved(self) -> bool:
        return self.action is not Action.UNRESOLVED


def _unresolved(reason: str, container_id=None, source=None) -> ResolverOutcome:
    return ResolverOutcome(Action.UNRESOLVED, container_id, source, reason=reason)


def mem_resolve(container: ContainerView, cluster_view: ClusterView,
                state: Mapping) -> ResolverOutcome:
    """Grow a stressed container in place, else move it somewhere it can grow.

    Growing is allowed only while the host's promised memory stays within
    RAM plus swap.  As a last resort, when replication is enabled and every
    replica is above the replication threshold, another replica is started.
    """
    cid = container.container_id
    host = cluster_view.nodes[container.node_id]
    nxt = next_profile(container.ubc, cluster_view.profiles)
    if nxt is not None:
        current = container.guarantee
        if current is not UNLIMITED and host.uncommitted >= nxt.guarantee_pages - current:
            return ResolverOutcome(Action.RAISED_LIMITS, cid, host.node_id, host.node_id,
                                   nxt.name)
        targets = [n for n in cluster_view.nodes.values()
                   if n.node_id != host.node_id and not n.busy
                   and n.uncommitted >= nxt.guarantee_pages]
        if targets:
            best = min(targets, key=lambda n: (-n.uncommitted, n.node_id))
            return ResolverOutcome(Action.MIGRATION_REQUESTED, cid, host.node_id,
                                   best.node_id, nxt.name)
    if state.get("replicate"):
        out = _replicate(container, cluster_view, state)
        if out is not None:
            return out
    reason = "no larger profile" if nxt is None else "no node has headroom"
    return _unresolved(reason, cid, host.node_id)


def _replicate(container: ContainerView, view: ClusterView,
               state: Mapping) -> ResolverOutcome | None:
    limit = float(state.get("replication_threshold", DEFAULT_REPLICATION_THRESHOLD))
    group = container.replica_group or container.container_id
    members = [c for n in view.nodes.values() for c in n.containers
               if (c.replica_group or c.container_id) == group]
    if not all(m.utilization() > limit for m in members):
        return None
    occupied = {m.node_id for m in members}
    need = container.guarantee
    targets = [n for n in view.nodes.values()
               if n.node_id not in occupied and not n.busy and n.uncommitted >= need]
    if not targets:
        return None
    best = min(targets, key=lambda n: (-n.uncommitted, n.node_id))
    return ResolverOutcome(Action.REPLICATION_REQUESTED, container.container_id,
                           container.node_id, best.node_id, group)


def _mem_load(c: ContainerView) -> float:
    return c.ubc.oomguarpages.held


def node_resolve(node: NodeView, cluster_view: ClusterView, *, threshold: float = 0.8,
                 load: Callable[[ContainerView], float] = _mem_load,
                 node_load: Callable[[NodeView], float] = lambda n: n.resident_used,
                 capacity: Callable[[NodeView], float] = lambda n: n.ram) -> ResolverOutcome:
    """Move the heaviest container that fits elsewhere without stressing the target."""
    candidates = sorted(node.containers, key=lambda c: (-load(c), c.container_id))
    targets = sorted((n for n in cluster_view.nodes.values()
                      if n.node_id != node.node_id and not n.busy),
                     key=lambda n: (node_load(n) / capacity(n), n.node_id))
    for c in candidates:
        for t in targets:
            if (node_load(t) + load(c)) / capacity(t) <= threshold:
                return ResolverOutcome(Action.MIGRATION_REQUESTED, c.container_id,
                                       node.node_id, t.node_id)
    return _unresolved("no target can absorb any container", source=node.node_id)


# Plug-ins and repositories.

class OverloadPolicy:
    resource: str = ""
    policy_id: str = ""

    def container_verdict(self, history: Sequence[ContainerObservation],
                          state: Mapping) -> Verdict:
        return Verdict.NOT_STRESSED

    def node_verdict(self, history: Sequence[LoadObservation], state: Mapping) -> Verdict:
        return Verdict.NOT_STRESSED


class MemDefaultPolicy(OverloadPolicy):
    resource = "mem"
    policy_id = "default"

    def container_verdict(self, history, state):
        if not history:
            return Verdict.NOT_STRESSED
        prev = history[-2] if len(history) > 1 else history[-1]
        return mem_overload_check(mem_score(prev, history[-1]), state)

    def node_verdict(self, history, state):
        if not history:
            return Verdict.NOT_STRESSED
        obs = history[-1]
        stressed = obs.ram > 0 and obs.resident_used / obs.ram > _threshold(state)
        return Verdict.STRESSED if stressed else Verdict.NOT_STRESSED


class CpuAutoRegressivePolicy(OverloadPolicy):
    resource = "cpu"
    policy_id = "auto_regressive_order_1"

    def node_verdict(self, history, state):
        if not history:
            return Verdict.NOT_STRESSED
        return cpu_overload_check([o.cpu_used for o in history], state)


class OverloadResolver:
    resource: str = ""
    resolver_id: str = ""

    def resolve_container(self, container: ContainerView, view: ClusterView,
                          state: Mapping) -> ResolverOutcome:
        return _unresolved("not handled", container.container_id, container.node_id)

    def resolve_node(self, node: NodeView, view: ClusterView,
                     state: Mapping) -> ResolverOutcome:
        return _unresolved("not handled", source=node.node_id)


class MemResolver(OverloadResolver):
    resource = "mem"
    resolver_id = "default"

    def resolve_container(self, container, view, state):
        return mem_resolve(container, view, state)

    def resolve_node(self, node, view, state):
        return node_resolve(node, view, threshold=_threshold(state))


class CpuResolver(OverloadResolver):
    resource = "cpu"
    resolver_id = "default"

    def resolve_node(self, node, view, state):
        # threshold is the minimum idle fraction a target must keep
        return node_resolve(node, view, threshold=1.0 - _threshold(state),
                            load=lambda c: c.cpu_used, node_load=lambda n: n.cpu_used,
                            capacity=lambda n: 1.0)


class UnknownPolicy(KeyError):
    pass


class PolicyRepository:
    """Installed overload policies, the active one per resource, and their states."""

    def __init__(self):
        self._policies: dict[tuple[str, str], OverloadPolicy] = {}
        self._states: dict[tuple[str, str], Mapping] = {}
        self._active: dict[str, str] = {}

    def register(self, policy: OverloadPolicy, state: Mapping | None = None) -> None:
        key = (policy.resource, policy.policy_id)
        self._policies[key] = policy
        self._states.setdefault(key, MappingProxyType(dict(state or {})))

    def activate(self, resource: str, policy_id: str) -> None:
        if (resource, policy_id) not in self._policies:
            raise UnknownPolicy((resource, policy_id))
        self._active[resource] = policy_id

    def set_active(self, selection: Mapping[str, str]) -> None:
        for resource, pid in selection.items():
            self.activate(resource, pid)
        for resource in list(self._active):
            if resource not in selection:
                del self._active[resource]

    def active(self) -> list[tuple[str, OverloadPolicy]]:
        return [(r, self._policies[(r, pid)]) for r, pid in sorted(self._active.items())]

    def get_state(self, resource: str, policy_id: str) -> Mapping:
        return self._states.get((resource, policy_id), MappingProxyType({}))

    def set_state(self, resource: str, policy_id: str, state: Mapping) -> None:
        self._states[(resource, policy_id)] = MappingProxyType(dict(state))

    def active_state(self, resource: str) -> Mapping:
        return self.get_state(resource, self._active[resource])


@dataclass(order=True)
class ResolverRegistration:
    sort_key: tuple = field(init=False, repr=False)
    resource: str
    resolver_id: str
    priority: int
    seq: int
    resolver: OverloadResolver = field(compare=False)

    def __post_init__(self):
        self.sort_key = (-self.priority, self.seq)


class ResolverRepository:
    def __init__(self):
        self._regs: list[ResolverRegistration] = []

    def register(self, resolver: OverloadResolver, priority: int = 0) -> None:
        self._regs.append(ResolverRegistration(resolver.resource, resolver.resolver_id,
                                               priority, len(self._regs), resolver))

    def for_resource(self, resource: str) -> list[ResolverRegistration]:
        """Higher priority first; ties keep registration order."""
        return sorted((r for r in self._regs if r.resource == resource),
                      key=lambda r: r.sort_key)


def default_repositories(states: Mapping[tuple[str, str], Mapping] | None = None,
                         active: Mapping[str, str] | None = None):
    policies = PolicyRepository()
    for p in (MemDefaultPolicy(), CpuAutoRegressivePolicy()):
        policies.register(p, (states or {}).get((p.resource, p.policy_id)))
    policies.set_active(active or {"mem": "default"})
    resolvers = ResolverRepository()
    resolvers.register(MemResolver(), priority=10)
    resolvers.register(CpuResolver(), priority=10)
    return policies, resolvers
