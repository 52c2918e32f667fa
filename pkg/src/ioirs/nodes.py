"""Message-driven state machines for the Transmitter, IRSN and IRS Server."""
from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass, field, replace
from ipaddress import IPv6Address
from typing import Optional, Sequence

from .model import IrsnDescriptor, Position
from .wire import (
    Command,
    IrssAdvertisement,
    IrssSolicitation,
    ServerUpdate,
    ServiceConfirmation,
    ServiceRequest,
    Status,
    UpdateKind,
)


class NoIrssFound(Exception):
    pass


class RejectPastTimestamp(Exception):
    pass


class StaleVersion(Exception):
    pass


class IllegalTransition(Exception):
    pass


# --- transmitter ------------------------------------------------------------


class Phase(enum.Enum):
    IDLE = "Idle"
    DISCOVERING = "Discovering"
    REQUESTED = "Requested"
    CONFIRMED = "Confirmed"
    TRANSMITTING = "Transmitting"
    DENIED = "Denied"


LEGAL_TRANSITIONS = {
    Phase.IDLE: {Phase.DISCOVERING},
    Phase.DISCOVERING: {Phase.REQUESTED},
    Phase.REQUESTED: {Phase.CONFIRMED, Phase.DENIED},
    Phase.CONFIRMED: {Phase.TRANSMITTING},
    Phase.DENIED: {Phase.IDLE},
    Phase.TRANSMITTING: set(),
}


@dataclass
class Flow:
    flow_label: int
    target_rx: IPv6Address
    irss_addr: Optional[IPv6Address] = None
    phase: Phase = Phase.IDLE
    pending_request: Optional[ServiceRequest] = None
    tx_start_us: Optional[int] = None
    changed_us: float = 0.0

    def advance(self, phase: Phase, now: float = 0.0) -> tuple[Phase, Phase]:
        if phase not in LEGAL_TRANSITIONS[self.phase]:
            raise IllegalTransition(f"flow {self.flow_label}: {self.phase.value} -> {phase.value}")
        old, self.phase, self.changed_us = self.phase, phase, now
        return old, phase


@dataclass
class TxState:
    addr: IPv6Address
    position: Position
    sinr_threshold_db: float = 10.0
    active_flows: dict = field(default_factory=dict)

    def add_flow(self, flow_label: int, target_rx) -> Flow:
        flow = Flow(flow_label, IPv6Address(target_rx))
        self.active_flows[flow_label] = flow
        return flow


def tx_on_degradation(state: TxState, flow_label: int, measured_sinr_db: float,
                      request_template: ServiceRequest, now: float = 0.0) -> Optional[ServiceRequest]:
    """Emit a request when the link drops strictly below threshold on an idle flow.

    The flow moves to Discovering; when its IRSS is already known it moves on
    to Requested straight away.
    """
    flow = state.active_flows[flow_label]
    if flow.phase is not Phase.IDLE or not measured_sinr_db < state.sinr_threshold_db:
        return None
    flow.advance(Phase.DISCOVERING, now)
    flow.pending_request = request_template
    if flow.irss_addr is not None:
        flow.advance(Phase.REQUESTED, now)
    return request_template


def tx_discover_irss(state: TxState, advertisements: Sequence[tuple[IPv6Address, IrssAdvertisement]]
                     ) -> IPv6Address:
    """Nearest advertising IRSS; ties go to the smaller address."""
    if not advertisements:
        raise NoIrssFound("no IRSS advertisement received")
    ranked = sorted(
        (state.position.distance_to(Position.from_cm(adv.position_cm)), IPv6Address(addr))
        for addr, adv in advertisements)
    return ranked[0][1]


def tx_on_decision(state: TxState, flow_label: int, msg, now: float) -> Flow:
    flow = state.active_flows[flow_label]
    if isinstance(msg, ServiceConfirmation):
        flow.advance(Phase.CONFIRMED, now)
        flow.tx_start_us = msg.tx_start_time_us
    else:
        flow.advance(Phase.DENIED, now)
    flow.pending_request = None
    return flow


# --- IRS node ---------------------------------------------------------------


@dataclass
class Motion:
    origin: Position
    target: Position
    speed_mps: float
    depart_us: float

    @property
    def arrival_us(self) -> float:
        return self.depart_us + self.origin.distance_to(self.target) / self.speed_mps * 1e6

    def position_at(self, t: float) -> Position:
        total = self.origin.distance_to(self.target)
        if total == 0 or t >= self.arrival_us:
            return self.target
        frac = max(0.0, (t - self.depart_us) * 1e-6 * self.speed_mps / total)
        return self.origin + (self.target - self.origin).scale(frac)


@dataclass
class IrsnState:
    descriptor: IrsnDescriptor
    schedule: list = field(default_factory=list)  # sorted (activate_time_us, pattern_id)
    motion: Optional[Motion] = None
    parent_irss: Optional[IPv6Address] = None
    heartbeat_period_us: float = 10_000_000
    next_heartbeat_us: Optional[float] = None

    def __post_init__(self):
        if self.next_heartbeat_us is None:
            self.next_heartbeat_us = self.heartbeat_period_us

    @property
    def addr(self) -> IPv6Address:
        return self.descriptor.addr

    def position_at(self, t: float) -> Position:
        if self.motion is None:
            return self.descriptor.position
        return self.motion.position_at(t)

    def active_pattern(self, t: float) -> int:
        idx = bisect.bisect_right(self.schedule, (t, math.inf)) - 1
        return self.schedule[idx][1] if idx >= 0 else 0

    def status(self, now: float) -> Status:
        return Status(
            availability=0 if self.motion is not None else 1,
            battery_pct=int(self.descriptor.battery_pct),
            position_cm=self.position_at(now).to_cm(),
            active_pattern=self.active_pattern(now),
            timestamp_us=int(now),
        )


def irsn_apply_command(state: IrsnState, cmd: Command, now: float) -> tuple[IrsnState, Status]:
    """Merge the command's schedule, start any relocation, and build the Status reply."""
    for entry in cmd.schedule:
        if entry.activate_time_us < now:
            raise RejectPastTimestamp(f"activation at {entry.activate_time_us} us is before {now} us")
    if cmd.relocate_flag and not state.descriptor.is_mobile:
        raise ValueError(f"static IRSN {state.addr} cannot relocate")
    merged = {t: p for t, p in state.schedule}
    for entry in cmd.schedule:
        merged[entry.activate_time_us] = entry.pattern_id
    state.schedule = sorted(merged.items())
    if cmd.relocate_flag:
        here = state.position_at(now)
        state.descriptor = state.descriptor.moved_to(here)
        state.motion = Motion(here, Position.from_cm(cmd.target_position_cm),
                              state.descriptor.max_speed_mps, now)
    return state, state.status(now)


def irsn_tick(state: IrsnState, now: float) -> tuple[IrsnState, list]:
    emitted = []
    arrived = False
    if state.motion is not None and now >= state.motion.arrival_us:
        state.descriptor = state.descriptor.moved_to(state.motion.target)
        state.motion = None
        arrived = True
    heartbeat = now >= state.next_heartbeat_us
    if heartbeat:
        periods = math.floor((now - state.next_heartbeat_us) / state.heartbeat_period_us) + 1
        state.next_heartbeat_us += periods * state.heartbeat_period_us
    if heartbeat or arrived:
        emitted.append(state.status(now))
    if state.parent_irss is None:
        emitted.append(IrssSolicitation(state.position_at(now).to_cm()))
    return state, emitted


# --- IRS server -------------------------------------------------------------


@dataclass
class ServerState:
    addr: IPv6Address
    children: list = field(default_factory=list)
    current_versions: dict = field(
        default_factory=lambda: {UpdateKind.ProtocolDefs: 1, UpdateKind.Optimizer: 1})


def server_push_update(server: ServerState, kind: UpdateKind, new_version: int
                       ) -> tuple[ServerState, list[tuple[IPv6Address, ServerUpdate]]]:
    kind = UpdateKind(kind)
    current = server.current_versions.get(kind, 0)
    if new_version <= current:
        raise StaleVersion(f"{kind.name} version {new_version} is not newer than {current}")
    server.current_versions[kind] = new_version
    return server, [(child, ServerUpdate(kind, new_version)) for child in server.children]


def apply_server_update(irss_descriptor, update: ServerUpdate):
    """IRSS-side handling: record the new version in its identity."""
    if update.update_kind == UpdateKind.Optimizer:
        return replace(irss_descriptor, optimizer_version=update.new_version)
    versions = tuple(max(v, update.new_version) for v in irss_descriptor.proto_versions_abc)
    return replace(irss_descriptor, proto_versions_abc=versions)
