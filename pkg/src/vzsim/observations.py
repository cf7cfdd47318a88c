"""Records exchanged between node agents and the control server."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .ubc import UbcTable


@dataclass(frozen=True)
class ContainerObservation:
    timestamp: float
    node_id: str
    container_id: str
    ubc: UbcTable
    cpu_used: float = 0.0
    replica_group: str | None = None

    def as_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "node_id": self.node_id,
            "container_id": self.container_id,
            "ubc": self.ubc.as_dict(),
            "cpu_used": self.cpu_used,
            "replica_group": self.replica_group,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ContainerObservation":
        return cls(
            timestamp=float(d["timestamp"]),
            node_id=d["node_id"],
            container_id=d["container_id"],
            ubc=UbcTable.from_dict(d["ubc"]),
            cpu_used=float(d.get("cpu_used", 0.0)),
            replica_group=d.get("replica_group"),
        )


@dataclass(frozen=True)
class LoadObservation:
    """One node's resource usage at one instant, with its containers."""

    timestamp: float
    node_id: str
    ram: int
    swap: int
    resident_used: int
    swap_used: int
    cpu_used: float
    containers: dict[str, ContainerObservation] = field(default_factory=dict)
    busy_with_transfer: bool = False

    def as_dict(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "node_id": self.node_id,
            "ram": self.ram,
            "swap": self.swap,
            "resident_used": self.resident_used,
            "swap_used": self.swap_used,
            "cpu_used": self.cpu_used,
            "busy_with_transfer": self.busy_with_transfer,
            "containers": {cid: c.as_dict() for cid, c in self.containers.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoadObservation":
        return cls(
            timestamp=float(d["timestamp"]),
            node_id=d["node_id"],
            ram=int(d["ram"]),
            swap=int(d["swap"]),
            resident_used=int(d["resident_used"]),
            swap_used=int(d["swap_used"]),
            cpu_used=float(d["cpu_used"]),
            busy_with_transfer=bool(d.get("busy_with_transfer", False)),
            containers={cid: ContainerObservation.from_dict(c)
                        for cid, c in d["containers"].items()},
        )


class ActionKind(str, enum.Enum):
    ADJUST_UBC = "AdjustUbc"
    MIGRATE = "Migrate"
    REPLICATE = "Replicate"


@dataclass(frozen=True)
class ActionRequest:
    kind: ActionKind
    container_id: str
    source: str
    target: str | None = None
    payload: str | None = None
    request_id: int = 0

    @property
    def is_transfer(self) -> bool:
        return self.kind in (ActionKind.MIGRATE, ActionKind.REPLICATE)

    @property
    def nodes(self) -> tuple[str, ...]:
        return (self.source,) if self.target is None else (self.source, self.target)

    def as_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "container_id": self.container_id,
            "source": self.source,
            "target": self.target,
            "payload": self.payload,
            "request_id": self.request_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionRequest":
        return cls(
            kind=ActionKind(d["kind"]),
            container_id=d["container_id"],
            source=d["source"],
            target=d.get("target"),
            payload=d.get("payload"),
            request_id=int(d["request_id"]),
        )


class CommandError(Exception):
    """A command that cannot even be attempted (reported as a protocol error)."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
