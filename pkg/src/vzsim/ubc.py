"""User beancounter accounting.

Each container carries a table of beancounters.  A beancounter tracks the
units of one resource a container holds, the peak since the accounting
period began, a soft ``barrier``, a hard ``limit`` and a ``failcnt`` of
denied requests.  Memory parameters are counted in 4 KiB pages; kmemsize
and the socket buffer parameters are counted in bytes.
"""

from __future__ import annotations

import copy
import enum
import functools
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence, Union

log = logging.getLogger(__name__)

PAGE_SIZE = 4096
PAGES_PER_MIB = (1 << 20) // PAGE_SIZE

BUFFER_PARAMS = ("tcpsndbuf", "tcprcvbuf", "othersockbuf", "dgramrcvbuf")
BYTE_PARAMS = ("kmemsize",) + BUFFER_PARAMS
PARAMS = (
    "vmguarpages",
    "privvmpages",
    "oomguarpages",
    "kmemsize",
    "tcpsndbuf",
    "tcprcvbuf",
    "othersockbuf",
    "dgramrcvbuf",
    "physpages",
)


@functools.total_ordering
class _Unlimited:
    """Sentinel for an unset barrier or limit; larger than any count."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "unlimited"

    def __eq__(self, other):
        return other is self

    def __lt__(self, other):
        return False

    def __gt__(self, other):
        return other is not self

    def __hash__(self):
        return hash("unlimited")

    def __reduce__(self):
        return (_Unlimited, ())

    def __deepcopy__(self, memo):
        return self

    def __copy__(self):
        return self


UNLIMITED = _Unlimited()

Bound = Union[int, _Unlimited]


class UnderflowError(ValueError):
    """Raised when more units are released than a beancounter holds."""


class ProfileError(ValueError):
    pass


def mib_to_pages(mib: float) -> int:
    pages = mib * PAGES_PER_MIB
    if pages != int(pages):
        raise ValueError(f"{mib} MiB is not a whole number of pages")
    return int(pages)


def bytes_to_pages(nbytes: int) -> int:
    return -(-nbytes // PAGE_SIZE)


def parse_bound(value) -> Bound:
    """Parse ``"unlimited"`` or a nonnegative integer."""
    if value is UNLIMITED or value == "unlimited" or value is None:
        return UNLIMITED
    value = int(value)
    if value < 0:
        raise ValueError(f"negative bound {value}")
    return value


@dataclass
class UbcParam:
    held: int = 0
    maxheld: int = 0
    barrier: Bound = UNLIMITED
    limit: Bound = UNLIMITED
    failcnt: int = 0

    def add(self, units: int) -> None:
        self.held += units
        if self.held > self.maxheld:
            self.maxheld = self.held

    def release(self, units: int) -> None:
        if units < 0:
            raise ValueError("negative release")
        if units > self.held:
            raise UnderflowError(f"release of {units} units exceeds held={self.held}")
        self.held -= units

    def as_dict(self) -> dict:
        return {
            "held": self.held,
            "maxheld": self.maxheld,
            "barrier": "unlimited" if self.barrier is UNLIMITED else self.barrier,
            "limit": "unlimited" if self.limit is UNLIMITED else self.limit,
            "failcnt": self.failcnt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UbcParam":
        return cls(
            held=int(d["held"]),
            maxheld=int(d["maxheld"]),
            barrier=parse_bound(d["barrier"]),
            limit=parse_bound(d["limit"]),
            failcnt=int(d["failcnt"]),
        )


@dataclass
class UbcTable:
    vmguarpages: UbcParam = field(default_factory=UbcParam)
    privvmpages: UbcParam = field(default_factory=UbcParam)
    oomguarpages: UbcParam = field(default_factory=UbcParam)
    kmemsize: UbcParam = field(default_factory=UbcParam)
    tcpsndbuf: UbcParam = field(default_factory=UbcParam)
    tcprcvbuf: UbcParam = field(default_factory=UbcParam)
    othersockbuf: UbcParam = field(default_factory=UbcParam)
    dgramrcvbuf: UbcParam = field(default_factory=UbcParam)
    physpages: UbcParam = field(default_factory=UbcParam)

    def __getitem__(self, name: str) -> UbcParam:
        if name not in PARAMS:
            raise KeyError(name)
        return getattr(self, name)

    def items(self):
        return ((f.name, getattr(self, f.name)) for f in fields(self))

    def snapshot(self) -> "UbcTable":
        return copy.deepcopy(self)

    def guarantee_pages(self) -> Bound:
        """Memory this container is promised: the larger of its two guarantees."""
        return max(self.vmguarpages.barrier, self.oomguarpages.barrier)

    def oom_usage_pages(self) -> int:
        """Pages counted against the out-of-memory guarantee.

        User pages in RAM or swap plus kernel memory and socket buffers,
        the byte-denominated parameters rounded up to whole pages.
        """
        return (
            self.oomguarpages.held
            + bytes_to_pages(self.kmemsize.held)
            + sum(bytes_to_pages(self[p].held) for p in BUFFER_PARAMS)
        )

    def as_dict(self) -> dict:
        return {name: p.as_dict() for name, p in self.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "UbcTable":
        return cls(**{name: UbcParam.from_dict(d[name]) for name in PARAMS})


@dataclass(frozen=True)
class MemoryProfile:
    """Barriers and limits (in pages) applied to a container as a unit."""

    name: str
    oomguarpages_barrier: int
    vmguarpages_barrier: int
    privvmpages_barrier: int
    privvmpages_limit: int

    def __post_init__(self):
        for attr in ("oomguarpages_barrier", "vmguarpages_barrier",
                     "privvmpages_barrier", "privvmpages_limit"):
            if getattr(self, attr) <= 0:
                raise ProfileError(f"profile {self.name!r}: {attr} must be positive")
        if self.privvmpages_barrier > self.privvmpages_limit:
            raise ProfileError(
                f"profile {self.name!r}: privvmpages barrier exceeds its limit")

    @classmethod
    def from_mib(cls, name: str, oomguarpages: float, vmguarpages: float,
                 privvmpages_barrier: float, privvmpages_limit: float) -> "MemoryProfile":
        return cls(
            name=name,
            oomguarpages_barrier=mib_to_pages(oomguarpages),
            vmguarpages_barrier=mib_to_pages(vmguarpages),
            privvmpages_barrier=mib_to_pages(privvmpages_barrier),
            privvmpages_limit=mib_to_pages(privvmpages_limit),
        )

    @property
    def guarantee_pages(self) -> int:
        return max(self.vmguarpages_barrier, self.oomguarpages_barrier)

    def ordering_warnings(self) -> list[str]:
        """Departures from the usual oomguar <= vmguar <= privvm ordering."""
        out = []
        if not self.vmguarpages_barrier <= self.privvmpages_barrier <= self.privvmpages_limit:
            out.append(f"profile {self.name!r}: expected vmguarpages barrier <= "
                       "privvmpages barrier <= privvmpages limit")
        if self.oomguarpages_barrier > self.vmguarpages_barrier:
            out.append(f"profile {self.name!r}: expected oomguarpages barrier <= "
                       "vmguarpages barrier")
        return out


def new_table(profile: MemoryProfile | None = None) -> UbcTable:
    table = UbcTable()
    if profile is not None:
        apply_profile(table, profile)
    return table


def apply_profile(table: UbcTable, profile: MemoryProfile) -> None:
    for msg in profile.ordering_warnings():
        log.warning(msg)
    table.oomguarpages.barrier = profile.oomguarpages_barrier
    table.oomguarpages.limit = UNLIMITED
    table.vmguarpages.barrier = profile.vmguarpages_barrier
    table.vmguarpages.limit = UNLIMITED
    table.privvmpages.barrier = profile.privvmpages_barrier
    table.privvmpages.limit = profile.privvmpages_limit


def profile_of(table: UbcTable, ladder: Sequence[MemoryProfile]) -> MemoryProfile | None:
    for p in ladder:
        if (table.privvmpages.barrier == p.privvmpages_barrier
                and table.privvmpages.limit == p.privvmpages_limit
                and table.vmguarpages.barrier == p.vmguarpages_barrier
                and table.oomguarpages.barrier == p.oomguarpages_barrier):
            return p
    return None


def next_profile(table: UbcTable, ladder: Sequence[MemoryProfile]) -> MemoryProfile | None:
    """The smallest rung with a larger allocation barrier than the table's."""
    current = table.privvmpages.barrier
    if current is UNLIMITED:
        return None
    bigger = [p for p in ladder if p.privvmpages_barrier > current]
    return min(bigger, key=lambda p: p.privvmpages_barrier) if bigger else None


class ChargeResult(enum.Enum):
    GRANTED = "granted"
    DENIED = "denied"

    def __bool__(self):
        return self is ChargeResult.GRANTED


def charge_privvm(table: UbcTable, pages: int, host_has_free: bool,
                  high_priority: bool = False) -> ChargeResult:
    """Try to allocate ``pages`` private pages.

    The prospective total ``held + pages`` falls into one of four tiers:
    at or under the vmguarpages barrier it always succeeds; at or under the
    privvmpages barrier it needs free memory on the host; at or under the
    privvmpages limit it additionally needs a high-priority request; above
    the limit it always fails.
    """
    if pages <= 0:
        raise ValueError("charge must be positive")
    priv = table.privvmpages
    total = priv.held + pages
    if total <= table.vmguarpages.barrier:
        ok = True
    elif total <= priv.barrier:
        ok = host_has_free
    elif total <= priv.limit:
        ok = high_priority and host_has_free
    else:
        ok = False
    if ok:
        priv.add(pages)
        return ChargeResult.GRANTED
    priv.failcnt += 1
    return ChargeResult.DENIED


def account(table: UbcTable, param: str, units: int) -> None:
    """Charge units to a parameter that is tracked but not enforced."""
    if units < 0:
        raise ValueError("negative charge")
    table[param].add(units)


def uncharge(table: UbcTable, param: str, units: int) -> UbcTable:
    table[param].release(units)
    return table


@dataclass(frozen=True)
class StabilityReport:
    committed_pages: float
    capacity_pages: int
    overcommit_factor: float

    @property
    def stable(self) -> bool:
        return self.overcommit_factor <= 1.0


def check_stability(node_profiles: Iterable[UbcTable], node_ram: int,
                    node_swap: int) -> StabilityReport:
    """Compare the sum of container guarantees against RAM plus swap.

    Overcommitment is legal; the report only classifies it.
    """
    committed = 0.0
    for table in node_profiles:
        g = table.guarantee_pages()
        committed += math.inf if g is UNLIMITED else g
    capacity = node_ram + node_swap
    if capacity <= 0:
        factor = 0.0 if committed == 0 else math.inf
    else:
        factor = committed / capacity
    return StabilityReport(committed, capacity, factor)
