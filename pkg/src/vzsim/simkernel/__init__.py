"""Discrete-event model of hardware nodes, container processes and a web workload."""

from .kernel import (
    InvariantViolation,
    SimKernel,
    SimulationHalted,
    boot_container,
)
from .memory import (
    Badness,
    ContainerState,
    HardwareNodeState,
    ImmuneProcess,
    NoKillableProcess,
    OutOfMemory,
    ProcessRole,
    SimProcess,
    TouchResult,
    container_excess,
    oom_badness,
    oom_kill,
    rehost,
    select_victim,
    touch_pages,
)
from .prefork import (
    ConnectionRefused,
    PreforkConfig,
    PreforkState,
    Request,
    RequestOutcome,
    WebServer,
    prefork_tick,
    serve_request,
)
from .workload import LoadGenerator, WorkloadSpec

__all__ = [
    "Badness", "ConnectionRefused", "ContainerState", "HardwareNodeState", "ImmuneProcess",
    "InvariantViolation", "LoadGenerator", "NoKillableProcess", "OutOfMemory",
    "PreforkConfig", "PreforkState", "ProcessRole", "Request", "RequestOutcome",
    "SimKernel", "SimProcess", "SimulationHalted", "TouchResult", "WebServer",
    "WorkloadSpec", "boot_container", "container_excess", "oom_badness", "oom_kill",
    "prefork_tick", "rehost", "select_victim", "serve_request", "touch_pages",
]
