"""Per-round ledger of transmissions and compute events."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .netsim import Event, RoundTiming, Topology, compute_time, schedule_round, transmission_time

CONVENTIONS = ("per_client", "broadcast")

# transmission kinds
MODEL = "model"
SEGMENTS = "segments"
ACTIVATION = "activation"
CUT_GRAD = "cut_grad"
LABELS = "labels"
HANDOFF = "handoff"
PIECES = "pieces"


@dataclass(frozen=True)
class Transmission:
    event_id: int
    kind: str
    src: str
    dst: str  # receiver, or "*" for a broadcast
    nbytes: int
    receivers: int = 1
    tier: str = "client"
    units: int = 1
    failed_units: int = 0
    relay_leg: int = 0  # 1 for the second hop of an edge-relayed client handoff
    phantom: bool = False

    def charged(self, convention: str) -> int:
        return self.nbytes * self.receivers if convention == "per_client" else self.nbytes


@dataclass(frozen=True)
class ComputeEvent:
    event_id: int
    node: str
    role: str  # client | server
    flops: int
    kind: str


@dataclass
class RoundTrace:
    arch: str
    round_index: int
    transmissions: list[Transmission]
    computes: list[ComputeEvent]
    timing: RoundTiming
    aborted: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def sim_seconds(self) -> Fraction:
        return self.timing.round_duration

    def comm_bytes(self, convention: str = "per_client", tier: str = "client") -> int:
        return sum(t.charged(convention) for t in self.transmissions if t.tier == tier)

    def bytes_by_kind(self, convention: str = "per_client", tier: str = "client") -> dict[str, int]:
        out: dict[str, int] = {}
        for t in self.transmissions:
            if t.tier == tier:
                out[t.kind] = out.get(t.kind, 0) + t.charged(convention)
        return out

    def flops(self, role: str = "client") -> int:
        return sum(c.flops for c in self.computes if c.role == role)

    @property
    def failed_units(self) -> int:
        return sum(t.failed_units for t in self.transmissions)

    def inject_phantom(self, nbytes: int) -> None:
        """Test hook: log a transmission that no protocol step produced."""
        eid = max((t.event_id for t in self.transmissions), default=-1) + 1
        self.transmissions.append(Transmission(eid, "phantom", "?", "?", int(nbytes), phantom=True))


class RoundRecorder:
    """Collects events for one round and schedules them on the logical clock."""

    def __init__(self, topology: Topology, arch: str, round_index: int, aggregation_cost: bool = True):
        self.topology = topology
        self.arch = arch
        self.round_index = round_index
        self.aggregation_cost = aggregation_cost
        self.events: list[Event] = []
        self.transmissions: list[Transmission] = []
        self.computes: list[ComputeEvent] = []
        self.notes: list[str] = []

    def _deps(self, after: Iterable[int | None]) -> tuple[int, ...]:
        deps = tuple(sorted({a for a in after if a is not None}))
        for d in deps:
            if d >= len(self.events):
                raise ValueError(f"dependency on unknown event {d}")
        return deps

    def transmit(
        self,
        kind: str,
        src: str,
        dst: str,
        nbytes: int,
        after: Iterable[int | None] = (),
        units: int = 1,
        failed_units: int = 0,
        parallel: bool = False,
        relay_leg: int = 0,
    ) -> int:
        link = self.topology.link(src, dst)
        eid = len(self.events)
        self.events.append(
            Event(eid, f"link:{src}->{dst}", transmission_time(nbytes, link), self._deps(after), parallel, kind)
        )
        self.transmissions.append(
            Transmission(eid, kind, src, dst, int(nbytes), 1, link.tier, units, failed_units, relay_leg)
        )
        return eid

    def broadcast(
        self,
        kind: str,
        src: str,
        receivers: Sequence[str],
        nbytes: int,
        after: Iterable[int | None] = (),
        units: int = 1,
        failed_units: int = 0,
    ) -> int:
        """One transmission heard by every receiver; paced by the slowest downlink."""
        links = [self.topology.link(src, r) for r in receivers]
        duration = max(transmission_time(nbytes, l) for l in links)
        eid = len(self.events)
        self.events.append(Event(eid, f"bcast:{src}", duration, self._deps(after), False, kind))
        self.transmissions.append(
            Transmission(eid, kind, src, "*", int(nbytes), len(receivers), links[0].tier, units, failed_units)
        )
        return eid

    def compute(
        self,
        node: str,
        flops: int,
        kind: str,
        after: Iterable[int | None] = (),
        parallel: bool = False,
    ) -> int:
        n = self.topology.node(node)
        eid = len(self.events)
        self.events.append(Event(eid, f"node:{node}", compute_time(flops, n), self._deps(after), parallel, kind))
        self.computes.append(ComputeEvent(eid, node, "client" if n.is_client else "server", int(flops), kind))
        return eid

    def aggregate(self, node: str, n_params: int, contributors: int, after: Iterable[int | None] = ()) -> int:
        """Averaging work: one multiply-add per parameter per contributor."""
        flops = 2 * n_params * contributors if self.aggregation_cost else 0
        return self.compute(node, flops, "aggregate", after)

    def finish(self, aborted: bool = False) -> RoundTrace:
        timing = schedule_round(self.events)
        return RoundTrace(
            self.arch, self.round_index, self.transmissions, self.computes, timing, aborted, list(self.notes)
        )
