"""Build a cluster from a scenario and run it to completion.

In ``inprocess`` mode agents hand observations and command results to the
server directly; in ``networked`` mode every exchange goes through the wire
protocol over the loopback transport.  Both share one event loop, so a
given seed yields the same run either way.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

from .agent import CommandError, Migrator, NodeAgent
from .config import ConfigManager, ConfigTree, defaults_path, load_layers
from .control import (
    ActLater,
    ActionLogEntry,
    ConfigPolicyStateLoader,
    Monitor,
    NodeHierarchy,
    TransferExecutor,
)
from .eventloop import EventLoop
from .observations import ActionRequest
from .policy import default_repositories
from .scenario import ScenarioSpec
from .simkernel.kernel import DATABASE_SERVICE, SimKernel, boot_container
from .simkernel.memory import ContainerState
from .simkernel.prefork import RequestOutcome, WebServer
from .simkernel.workload import LoadGenerator
from .wire import AgentEndpoint, ControlServer, LoopbackTransport

log = logging.getLogger(__name__)

FAULTS = ("leak",)
FAULT_AT_MS = 3000
CREDENTIALS = ("vzsim", "vzsim")

TRACE_HEADER = ["time_ms", "event_kind", "node", "container", "detail"]
SERIES_HEADER = ["time_s", "entity", "node", "privvmpages_held", "privvmpages_maxheld",
                 "privvmpages_failcnt", "oomguarpages_held", "oomguarpages_failcnt",
                 "physpages_held", "workers", "idle_workers", "pending",
                 "resident_used", "swap_used"]


@dataclass
class RunResult:
    spec: ScenarioSpec
    outcomes: list[RequestOutcome]
    trace: list[tuple]
    series: list[tuple]
    action_log: list[ActionLogEntry]
    check_times: list[float]
    fail_count: int
    end_ms: int
    config_changes: list = field(default_factory=list)

    def issued_actions(self) -> list[tuple]:
        """(kind, container, source, target, detail) of every action the monitor issued."""
        return [(e.kind, e.container, e.source, e.target, e.detail)
                for e in self.action_log if e.outcome == "issued"]


class _DirectExecutor(TransferExecutor):
    def __init__(self, kernel: SimKernel, agents: dict[str, NodeAgent]):
        self.kernel = kernel
        self.agents = agents

    def start_transfer(self, req, done):
        try:
            self.agents[req.source].execute(req, done)
        except CommandError as e:
            done(False, f"{e.code}: {e}")

    def is_busy(self, node_id):
        node = self.kernel.nodes.get(node_id)
        return bool(node and node.busy_with_transfer)


class _WireExecutor(_DirectExecutor):
    def __init__(self, kernel, server: ControlServer):
        super().__init__(kernel, {})
        self.server = server

    def start_transfer(self, req, done):
        self.server.send_command(req.source, req, done)


class _Sampler:
    """Periodic observation of one node, rescheduled when its period changes."""

    def __init__(self, loop: EventLoop, agent: NodeAgent, sink: Callable, period_s: float,
                 phase_ms: int = 0):
        self.loop = loop
        self.agent = agent
        self.sink = sink
        self.period_ms = int(round(period_s * 1000))
        self._handle = loop.call_at(max(loop.now, phase_ms), self._fire)

    def _fire(self):
        self.sink(self.agent.observe(self.loop.now))
        self._handle = self.loop.call_later(self.period_ms, self._fire)

    def set_period(self, period_s: float):
        self.period_ms = int(round(float(period_s) * 1000))


def _manager_layer(spec: ScenarioSpec) -> ConfigTree:
    m = spec.manager
    overload = {"check_interval": m.check_interval, "active_policies": dict(m.active_policies)}
    states = {}
    for key, state in m.states.items():
        resource, pid = key.split("/", 1)
        st = dict(state)
        if resource == "mem" and m.replicate:
            st["replicate"] = 1
            if m.replication_threshold is not None:
                st["replication_threshold"] = m.replication_threshold
        states[f"overload-{resource}-{pid}"] = st
    return ConfigTree({
        "server/policy/overload": overload,
        "server/policy/state": states,
        "client": {"frequency": m.frequency},
    })


class Simulation:
    def __init__(self, spec: ScenarioSpec, *, inject_fault: str | None = None,
                 config_layers: list | None = None):
        if inject_fault is not None and inject_fault not in FAULTS:
            raise ValueError(f"unknown fault {inject_fault!r}")
        self.spec = spec
        self.fault = inject_fault
        self.loop = EventLoop()
        self.trace: list[tuple] = []
        self.series: list[tuple] = []
        self.outcomes: list[RequestOutcome] = []
        self.kernel = SimKernel(clock=lambda: self.loop.now, trace=self._trace)
        self.profiles = dict(spec.profiles)
        self.generators: list[LoadGenerator] = []
        self.monitor: Monitor | None = None
        self.config: ConfigManager | None = None
        self.endpoints: dict[str, AgentEndpoint] = {}
        self.server: ControlServer | None = None
        self.transport: LoopbackTransport | None = None
        self._config_layers = config_layers
        self._build()

    def _trace(self, kind, node, container, detail):
        self.trace.append((self.loop.now, kind, node or "", container or "", detail))

    # construction

    def _build(self) -> None:
        spec, k = self.spec, self.kernel
        for n in spec.nodes:
            k.add_node(n.node_id, n.ram, n.swap, n.cpu_capacity)
        for c in spec.containers:
            ct = k.add_container(c.container_id, c.host, self.profiles[c.profile],
                                 c.replica_group)
            self._boot(ct, c.web_server, c.database)
        self.migrator = Migrator(k, self.loop, checkpoint_pages=spec.migration.checkpoint_pages,
                                 transfer_rate=spec.migration.transfer_rate,
                                 replica_factory=self._start_replica)
        self.agents = {n.node_id: NodeAgent(n.node_id, k, self.migrator, self.profiles)
                       for n in spec.nodes}
        for w in spec.workloads:
            gen = LoadGenerator(self.loop, w, lambda t=w.target: self._servers(t),
                                on_outcome=self.outcomes.append,
                                on_finished=self._generator_done)
            self.generators.append(gen)
        if spec.manager.enabled:
            self._build_manager()
        self.loop.call_at(0, self._sample_series)
        self.loop.add_post_event_hook(k.check_invariants)
        if self.fault == "leak":
            self.loop.call_at(FAULT_AT_MS, self._leak)

    def _boot(self, ct: ContainerState, web, database: bool) -> None:
        boot_container(self.kernel, ct, [DATABASE_SERVICE] if database else [])
        if web is not None:
            WebServer(self.kernel, self.loop, ct, web).start(
                first_tick_ms=(self.loop.now // 1000 + 1) * 1000)

    def _start_replica(self, source: ContainerState, new_id: str, target: str) -> ContainerState:
        profile = self.profiles.get(source.profile) if source.profile else None
        if profile is None:
            raise ValueError(f"{source.container_id} has no known profile")
        ct = self.kernel.add_container(new_id, target, profile, source.replica_group)
        web = source.web_server.config if source.web_server is not None else None
        self._boot(ct, web, database=True)
        return ct

    def _servers(self, target: str) -> list[WebServer]:
        return [c.web_server for _, c in sorted(self.kernel.containers.items())
                if target in (c.container_id, c.replica_group) and c.web_server is not None]

    def _build_manager(self) -> None:
        spec = self.spec
        layers = self._config_layers or [defaults_path()]
        self.config = ConfigManager(load_layers(layers))
        self.config.apply_tree(_manager_layer(spec))
        self.config_changes = []
        self.config.subscribe("", self.config_changes.append, "run-log")
        policies, resolvers = default_repositories()
        self.state_loader = ConfigPolicyStateLoader(self.config, policies)
        hier = NodeHierarchy(int(self.config.get("server/data", "max_in_memory_observations", 20)))
        self.hierarchy = hier
        self.actlater = ActLater()
        self.monitor = Monitor(hier, policies, resolvers, self.actlater,
                               profiles=spec.ladder_profiles(), adjust=self._adjust,
                               clock=lambda: self.loop.now / 1000.0)
        phase = int(round(spec.manager.sample_phase * 1000))
        if spec.mode == "inprocess":
            self.actlater.executor = _DirectExecutor(self.kernel, self.agents)
            freq = self.config.get("client", "frequency", 2)
            self.samplers = {}
            for nid, agent in self.agents.items():
                hier.register_node(nid)
                self.samplers[nid] = _Sampler(self.loop, agent, hier.record_observation,
                                              freq, phase)
            self.config.subscribe("client", self._on_client_change, "in-process-agents")
        else:
            self._build_network(phase)
        self.monitor.attach(self.loop, self.config)

    def apply_layer_at(self, at_s: float, layer: ConfigTree) -> None:
        """Commit ``layer`` on top of the running configuration at ``at_s``."""
        if self.config is None:
            raise RuntimeError("the manager is disabled; there is no configuration to change")
        self.loop.call_at(int(round(at_s * 1000)), self.config.apply_tree, layer)

    def _on_client_change(self, change):
        if change.option == "frequency":
            for s in self.samplers.values():
                s.set_period(change.new)

    def _build_network(self, phase: int) -> None:
        self.transport = LoopbackTransport()
        self.server = ControlServer(self.config, {CREDENTIALS[0]: CREDENTIALS[1]},
                                    on_report=self.hierarchy.record_observation,
                                    on_register=lambda nid, d: self.hierarchy.register_node(nid),
                                    on_unregister=self.hierarchy.unregister_node,
                                    clock=lambda: self.loop.now / 1000.0)
        self.actlater.executor = _WireExecutor(self.kernel, self.server)
        self.samplers = {}
        for nid, agent in self.agents.items():
            a, s = self.transport.pair(f"agent:{nid}", f"server:{nid}")
            self.server.accept(s)
            ep = AgentEndpoint(a, *CREDENTIALS, nid, descriptor={"ram": agent.node.ram,
                                                                  "swap": agent.node.swap},
                               execute=agent.execute,
                               on_ready=lambda cfg, nid=nid: self._agent_ready(nid, cfg, phase))
            self.endpoints[nid] = ep
            ep.start()
            if not ep.ready:
                raise RuntimeError(f"{nid}: handshake failed: {ep.error}")

    def _agent_ready(self, nid: str, cfg: ConfigManager, phase: int) -> None:
        ep = self.endpoints[nid]
        sampler = _Sampler(self.loop, self.agents[nid], ep.report_load,
                           cfg.get("client", "frequency", 2), phase)
        self.samplers[nid] = sampler
        cfg.subscribe("client", lambda ch: ch.option == "frequency"
                      and sampler.set_period(ch.new), f"sensor:{nid}")

    def _adjust(self, req: ActionRequest) -> None:
        def done(ok, reason=""):
            self.monitor.record_command_result(req, ok, reason)
        if self.server is not None:
            self.server.send_command(req.source, req, done)
            return
        try:
            self.agents[req.source].execute(req, done)
        except CommandError as e:
            done(False, f"{e.code}: {e}")

    # periodic bookkeeping

    def _sample_series(self) -> None:
        now = self.loop.now
        for cid, ct in sorted(self.kernel.containers.items()):
            t = ct.ubc
            ws = ct.web_server
            self.series.append((
                now // 1000, cid, ct.host, t.privvmpages.held, t.privvmpages.maxheld,
                t.privvmpages.failcnt, t.oomguarpages.held, t.oomguarpages.failcnt,
                t.physpages.held,
                len(ws.state.workers) if ws else 0, ws.state.idle if ws else 0,
                len(ws.state.pending_queue) if ws else 0, "", ""))
        for nid, n in sorted(self.kernel.nodes.items()):
            self.series.append((now // 1000, nid, nid, "", "", "", "", "", "", "", "", "",
                                n.resident_used, n.swap_used))
        self.loop.call_later(1000, self._sample_series)

    def _leak(self) -> None:
        node = self.kernel.nodes[min(self.kernel.nodes)]
        node.resident_used += 1     # memory used without any container being charged
        self._trace("fault_injected", node.node_id, None, "leak 1 page")

    def _generator_done(self, gen: LoadGenerator) -> None:
        if all(g.done for g in self.generators):
            self.loop.stop()

    # run

    def run(self) -> RunResult:
        for gen in self.generators:
            gen.start()
        self.loop.run_until(int(round(self.spec.horizon * 1000)))
        fail_count = sum(c.ubc.privvmpages.failcnt for c in self.kernel.containers.values())
        return RunResult(
            spec=self.spec, outcomes=list(self.outcomes), trace=self.trace,
            series=self.series,
            action_log=list(self.monitor.action_log) if self.monitor else [],
            check_times=list(self.monitor.check_times) if self.monitor else [],
            fail_count=fail_count, end_ms=self.loop.now,
            config_changes=getattr(self, "config_changes", []))


def run_scenario(spec: ScenarioSpec, horizon: float | None = None, **kwargs) -> RunResult:
    if horizon is not None:
        spec = spec.with_overrides(horizon=horizon)
    return Simulation(spec, **kwargs).run()
