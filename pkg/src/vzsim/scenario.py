"""Scenario files: nodes, profiles, containers, workloads and manager settings.

Scenarios are YAML documents.  Memory sizes are given in MiB and converted
to 4 KiB pages on load.  Bundled scenarios live in the package's
``scenarios`` directory and can be referred to by bare name (``test2``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .simkernel.prefork import PreforkConfig
from .simkernel.workload import WorkloadSpec
from .ubc import MemoryProfile, ProfileError, mib_to_pages

SUFFIX = ".scenario"
MODES = ("inprocess", "networked")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    ram: int                # pages
    swap: int
    cpu_capacity: float = 1.0


@dataclass(frozen=True)
class ContainerSpec:
    container_id: str
    host: str
    profile: str
    web_server: PreforkConfig | None = None
    database: bool = True
    replica_group: str | None = None


@dataclass(frozen=True)
class ManagerSpec:
    enabled: bool = False
    active_policies: Mapping[str, str] = field(default_factory=lambda: {"mem": "default"})
    states: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    check_interval: float = 12
    frequency: float = 2
    sample_phase: float = 0.0
    replicate: bool = False
    replication_threshold: float | None = None


@dataclass(frozen=True)
class MigrationSpec:
    checkpoint_pages: int = 1024
    transfer_rate: int = 25600      # pages per second


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    nodes: tuple[NodeSpec, ...]
    profiles: Mapping[str, MemoryProfile]
    ladder: tuple[str, ...]
    containers: tuple[ContainerSpec, ...]
    workloads: tuple[WorkloadSpec, ...]
    manager: ManagerSpec = ManagerSpec()
    migration: MigrationSpec = MigrationSpec()
    mode: str = "inprocess"
    horizon: float = 600.0
    seed: int = 1
    expect: Mapping[str, Any] = field(default_factory=dict)
    description: str = ""

    def ladder_profiles(self) -> tuple[MemoryProfile, ...]:
        return tuple(self.profiles[n] for n in self.ladder)

    def with_overrides(self, *, seed: int | None = None, mode: str | None = None,
                       manager: bool | None = None, horizon: float | None = None) -> "ScenarioSpec":
        spec = self
        if seed is not None:
            spec = dataclasses.replace(spec, seed=seed, workloads=tuple(
                dataclasses.replace(w, rng_seed=seed + i) for i, w in enumerate(spec.workloads)))
        if mode is not None:
            if mode not in MODES:
                raise ScenarioError(f"mode must be one of {MODES}")
            spec = dataclasses.replace(spec, mode=mode)
        if manager is not None:
            spec = dataclasses.replace(spec, manager=dataclasses.replace(spec.manager,
                                                                          enabled=manager))
        if horizon is not None:
            if horizon <= 0:
                raise ScenarioError("horizon must be positive")
            spec = dataclasses.replace(spec, horizon=horizon)
        return spec


def bundled_scenarios() -> dict[str, Path]:
    root = resources.files("vzsim") / "scenarios"
    return {Path(str(p)).stem: Path(str(p)) for p in root.iterdir() if p.name.endswith(SUFFIX)}


def resolve_path(name_or_path: str | Path) -> Path:
    p = Path(name_or_path)
    if p.is_file():
        return p
    bundled = bundled_scenarios()
    if str(name_or_path) in bundled:
        return bundled[str(name_or_path)]
    raise ScenarioError(f"no such scenario: {name_or_path}")


def load(name_or_path: str | Path) -> ScenarioSpec:
    path = resolve_path(name_or_path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as e:
        raise ScenarioError(f"{path}: {e}") from None
    return parse(data, default_name=path.stem)


# parsing helpers

def _req(d: Mapping, key: str, where: str):
    if key not in d:
        raise ScenarioError(f"{where}: missing {key!r}")
    return d[key]


def _only(d: Mapping, allowed: set, where: str) -> None:
    extra = set(d) - allowed
    if extra:
        raise ScenarioError(f"{where}: unknown keys {sorted(extra)}")


def _pages(mib, where: str) -> int:
    try:
        pages = mib_to_pages(float(mib))
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"{where}: {e}") from None
    if pages < 0:
        raise ScenarioError(f"{where}: negative size")
    return pages


def _profile(d: Mapping, where: str) -> MemoryProfile:
    _only(d, {"name", "oomguarpages", "vmguarpages", "privvmpages"}, where)
    priv = _req(d, "privvmpages", where)
    if not (isinstance(priv, (list, tuple)) and len(priv) == 2):
        raise ScenarioError(f"{where}: privvmpages must be [barrier, limit] in MiB")
    try:
        return MemoryProfile(str(_req(d, "name", where)),
                             _pages(_req(d, "oomguarpages", where), where),
                             _pages(_req(d, "vmguarpages", where), where),
                             _pages(priv[0], where), _pages(priv[1], where))
    except ProfileError as e:
        raise ScenarioError(f"{where}: {e}") from None


_PREFORK_KEYS = {
    "start_servers", "min_spare", "max_spare", "max_clients", "keepalive",
    "keepalive_timeout", "parent_virtual_mib", "parent_private_mib",
    "worker_fresh_virtual_mib", "worker_fresh_private_mib", "worker_warm_virtual_mib",
    "worker_warm_private_mib", "worker_kmem_bytes", "error_ms", "service_slots", "cpu_share",
}


def _prefork(d: Mapping, where: str) -> PreforkConfig:
    _only(d, _PREFORK_KEYS, where)
    kw = {k: d[k] for k in _PREFORK_KEYS - {"keepalive", "keepalive_timeout"} if k in d}
    if "keepalive" in d:
        kw["keepalive_enabled"] = bool(d["keepalive"])
    if "keepalive_timeout" in d:
        kw["keepalive_timeout_ms"] = int(round(float(d["keepalive_timeout"]) * 1000))
    try:
        return PreforkConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"{where}: {e}") from None


_WORKLOAD_KEYS = {f.name for f in dataclasses.fields(WorkloadSpec)}


def _workload(d: Mapping, where: str, seed: int, index: int) -> WorkloadSpec:
    _only(d, _WORKLOAD_KEYS, where)
    kw = dict(d)
    kw.setdefault("rng_seed", seed + index)
    try:
        return WorkloadSpec(**kw)
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"{where}: {e}") from None


def _manager(d: Mapping) -> ManagerSpec:
    where = "manager"
    _only(d, {f.name for f in dataclasses.fields(ManagerSpec)}, where)
    try:
        m = ManagerSpec(**d)
    except TypeError as e:
        raise ScenarioError(f"{where}: {e}") from None
    if m.check_interval <= 0 or m.frequency <= 0:
        raise ScenarioError("manager: check_interval and frequency must be positive")
    for key in m.states:
        if "/" not in key:
            raise ScenarioError(f"manager.states: key {key!r} must look like 'mem/default'")
    return m


def parse(data: Any, default_name: str = "scenario") -> ScenarioSpec:
    if not isinstance(data, Mapping):
        raise ScenarioError("scenario must be a mapping")
    _only(data, {"name", "description", "seed", "mode", "horizon", "nodes", "profiles",
                 "ladder", "containers", "workloads", "manager", "migration", "expect"},
          "scenario")
    seed = int(data.get("seed", 1))
    mode = data.get("mode", "inprocess")
    if mode not in MODES:
        raise ScenarioError(f"mode must be one of {MODES}")

    nodes = []
    for i, n in enumerate(_req(data, "nodes", "scenario")):
        where = f"nodes[{i}]"
        _only(n, {"id", "ram", "swap", "cpu_capacity"}, where)
        nodes.append(NodeSpec(str(_req(n, "id", where)), _pages(_req(n, "ram", where), where),
                              _pages(n.get("swap", 0), where), float(n.get("cpu_capacity", 1.0))))
    node_ids = [n.node_id for n in nodes]
    if len(set(node_ids)) != len(node_ids):
        raise ScenarioError("duplicate node id")

    profiles = {}
    for i, p in enumerate(_req(data, "profiles", "scenario")):
        prof = _profile(p, f"profiles[{i}]")
        if prof.name in profiles:
            raise ScenarioError(f"duplicate profile {prof.name}")
        profiles[prof.name] = prof
    ladder = tuple(data.get("ladder", ()))
    for name in ladder:
        if name not in profiles:
            raise ScenarioError(f"ladder: unknown profile {name!r}")
    barriers = [profiles[n].privvmpages_barrier for n in ladder]
    if barriers != sorted(set(barriers)):
        raise ScenarioError("ladder must be strictly increasing")

    containers = []
    for i, c in enumerate(_req(data, "containers", "scenario")):
        where = f"containers[{i}]"
        _only(c, {"id", "host", "profile", "web_server", "database", "replica_group"}, where)
        host = str(_req(c, "host", where))
        if host not in node_ids:
            raise ScenarioError(f"{where}: unknown host {host!r}")
        prof = str(_req(c, "profile", where))
        if prof not in profiles:
            raise ScenarioError(f"{where}: unknown profile {prof!r}")
        ws = c.get("web_server")
        containers.append(ContainerSpec(
            str(_req(c, "id", where)), host, prof,
            _prefork(ws, f"{where}.web_server") if ws is not None else None,
            bool(c.get("database", ws is not None)), c.get("replica_group")))
    cids = [c.container_id for c in containers]
    if len(set(cids)) != len(cids):
        raise ScenarioError("duplicate container id")

    workloads = []
    targets = set(cids) | {c.replica_group for c in containers if c.replica_group}
    for i, w in enumerate(data.get("workloads", ())):
        wl = _workload(w, f"workloads[{i}]", seed, i)
        if wl.target not in targets:
            raise ScenarioError(f"workloads[{i}]: unknown target {wl.target!r}")
        served = [c for c in containers
                  if wl.target in (c.container_id, c.replica_group) and c.web_server]
        if not served:
            raise ScenarioError(f"workloads[{i}]: target {wl.target!r} runs no web server")
        workloads.append(wl)
    if len({w.target for w in workloads}) != len(workloads):
        raise ScenarioError("each target may have only one workload")

    manager = _manager(data.get("manager") or {})
    mig = data.get("migration") or {}
    _only(mig, {"checkpoint_pages", "transfer_rate"}, "migration")
    migration = MigrationSpec(int(mig.get("checkpoint_pages", 1024)),
                              int(mig.get("transfer_rate", 25600)))
    if migration.checkpoint_pages < 0 or migration.transfer_rate <= 0:
        raise ScenarioError("migration: bad parameters")
    horizon = float(data.get("horizon", 600))
    if horizon <= 0:
        raise ScenarioError("horizon must be positive")
    return ScenarioSpec(
        name=str(data.get("name", default_name)), nodes=tuple(nodes), profiles=profiles,
        ladder=ladder, containers=tuple(containers), workloads=tuple(workloads),
        manager=manager, migration=migration, mode=mode, horizon=horizon, seed=seed,
        expect=dict(data.get("expect") or {}), description=str(data.get("description", "")))
