"""Deterministic discrete-event simulator.

One global heap ordered by ``(time_us, seq)`` drives every actor.  Messages
travel as encoded IPv6 packets and are decoded on arrival, so the codec is
exercised by every exchange.  All randomness comes from per-entity
substreams of a single seed.
"""
from __future__ import annotations

import csv
import heapq
import io
import itertools
import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from ipaddress import IPv6Address
from typing import Any, Optional

import numpy as np

from .entities import IrsnActor, RouterActor, RxActor, ServerActor, TxActor
from .graphroute import earth
from .graphroute import position_at as orbit_position
from .model import SPEED_OF_LIGHT, Position, link_budget
from .scenario import FlowSpec, InvalidScenario, Scenario
from .station import StationActor
from .wire import (
    IrssSolicitation,
    Ipv6Header,
    ServerUpdate,
    UpdateKind,
    WireError,
    decode_packet,
    describe,
    encode_packet,
)

__all__ = ["Event", "TraceRecord", "FlowMetrics", "World", "delivery_delay", "run",
           "InvalidScenario", "METRICS_HEADER"]

METRICS_HEADER = ("flow", "requests", "confirmations", "denials", "denial_reason",
                  "confirm_latency_us", "mean_sinr_db", "outage_us", "handovers")

_ACTOR_TYPES = {
    "tx": TxActor,
    "rx": RxActor,
    "irss": StationActor,
    "irsn": IrsnActor,
    "server": ServerActor,
    "router": RouterActor,
}


def delivery_delay(a: Position, b: Position, proc_delay_us: float = 0.0) -> float:
    """Propagation time in microseconds plus a fixed processing delay."""
    return a.distance_to(b) / SPEED_OF_LIGHT * 1e6 + proc_delay_us


@dataclass(order=True)
class Event:
    time_us: float
    seq: int
    kind: str = field(compare=False)
    target: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


@dataclass(frozen=True)
class TraceRecord:
    time_us: float
    actor: str
    direction: str
    kind: str
    summary: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))


@dataclass
class FlowMetrics:
    flow: str
    requests: int = 0
    confirmations: int = 0
    denials: int = 0
    denial_reasons: list = field(default_factory=list)
    confirm_latency_us: list = field(default_factory=list)
    samples: list = field(default_factory=list)  # (time_us, sinr_db, transmitting)
    outage_us: float = 0.0
    handovers: int = 0
    failed: bool = False

    @property
    def mean_sinr_db(self) -> float:
        during = [s for _, s, on in self.samples if on and math.isfinite(s)]
        pool = during or [s for _, s, _ in self.samples if math.isfinite(s)]
        return sum(pool) / len(pool) if pool else math.nan

    def row(self) -> list:
        latency = self.confirm_latency_us[0] if self.confirm_latency_us else math.nan
        return [self.flow, self.requests, self.confirmations, self.denials,
                self.denial_reasons[-1] if self.denial_reasons else "none",
                _num(latency), _num(self.mean_sinr_db), _num(self.outage_us), self.handovers]


def _num(x: float) -> str:
    if math.isnan(x):
        return "nan"
    return repr(round(x, 6))


class World:
    def __init__(self, scenario: Scenario, seed: Optional[int] = None,
                 until_us: Optional[float] = None):
        self.scenario = scenario
        self.config = scenario.config
        self.seed = self.config.seed if seed is None else seed
        self.until_us = self.config.until_us if until_us is None else until_us
        self.now = 0.0
        self.trace: list[TraceRecord] = []
        self._queue: list[Event] = []
        self._seq = itertools.count()
        self._rngs: dict = {}
        self.occluders = list(scenario.obstacles)
        if self.config.earth_occluder_m > 0:
            self.occluders.append(earth(self.config.earth_occluder_m))
        self.services: dict = {}
        self.session_anchors: dict = {}
        self.localization_estimates: dict = {}
        self.metrics = {f.key: FlowMetrics(f.key) for f in scenario.flows}
        self._specs = {e.id: e for e in scenario.entities}
        self._by_addr = {e.addr: e.id for e in scenario.entities if e.addr is not None}
        self.routes = {(r["at"], self._specs[r["dst"]].addr): r["via"] for r in self.config.routes}
        self.actors: dict = {}
        for e in scenario.entities:
            cls = _ACTOR_TYPES.get(e.kind)
            if cls is not None:
                self.actors[e.id] = cls(self, e)
        for actor in self.actors.values():
            actor.start()
        for i, inj in enumerate(self.config.inject):
            self.schedule(inj["at_us"], "Inject", "", i)

    # --- lookups ----------------------------------------------------------

    def spec(self, eid: str):
        return self._specs[eid]

    def entity_addr(self, eid: str) -> IPv6Address:
        return self._specs[eid].addr

    def id_of(self, addr) -> Optional[str]:
        return self._by_addr.get(IPv6Address(addr))

    def actor_by_addr(self, addr):
        eid = self.id_of(addr)
        return self.actors.get(eid) if eid is not None else None

    def actor_by_addr_str(self, addr: str):
        return self.actor_by_addr(IPv6Address(addr))

    def actors_of_kind(self, kind: str) -> list:
        return [a for a in self.actors.values() if a.spec.kind == kind]

    def position_of(self, eid: str, t_us: Optional[float] = None) -> Position:
        t = self.now if t_us is None else t_us
        actor = self.actors.get(eid)
        if actor is not None:
            return actor.position_at(t)
        spec = self._specs[eid]
        if spec.ephemeris is not None:
            return orbit_position(spec.ephemeris, t * 1e-6)
        return spec.position

    def eavesdropper_positions(self) -> list[Position]:
        return [self.position_of(e.id) for e in self.scenario.of_kind("eavesdropper")]

    def rng(self, eid: str) -> np.random.Generator:
        if eid not in self._rngs:
            self._rngs[eid] = np.random.default_rng([self.seed, zlib.crc32(eid.encode())])
        return self._rngs[eid]

    def hop_delay(self, a: Position, b: Position) -> float:
        return delivery_delay(a, b, self.config.link_delay_us)

    # --- physics ----------------------------------------------------------

    def register_service(self, flow_key: str, chains: list) -> None:
        self.services[flow_key] = [tuple(c) for c in chains]

    def link_sinr(self, flow: FlowSpec, t_us: float) -> float:
        """Ground-truth SINR: the best of the direct path and every reflecting chain."""
        cfg = self.config
        tx, rx = self.position_of(flow.tx, t_us), self.position_of(flow.rx, t_us)
        if tx == rx:
            return math.inf
        best = link_budget(tx, rx, [], cfg.frequency_hz, flow.tx_power_dbm, cfg.noise_dbm,
                           self.occluders).sinr_db
        for chain in self.services.get(flow.key, ()):
            nodes = [self.actor_by_addr(a) for a in chain]
            if not all(n is not None and n.reflecting(t_us) for n in nodes):
                continue
            placed = [n.descriptor_at(t_us) for n in nodes]
            points = [tx] + [p.position for p in placed] + [rx]
            if any(a == b for a, b in zip(points, points[1:])):
                continue
            sinr = link_budget(tx, rx, placed, cfg.frequency_hz, flow.tx_power_dbm, cfg.noise_dbm,
                               self.occluders, cfg.gain_offset_db).sinr_db
            best = max(best, sinr)
        return best

    # --- events and messaging --------------------------------------------

    def schedule(self, time_us: float, kind: str, target: str, payload: Any = None) -> Event:
        ev = Event(float(max(time_us, self.now)), next(self._seq), kind, target, payload)
        heapq.heappush(self._queue, ev)
        return ev

    def record(self, actor: str, direction: str, kind: str, summary: str) -> None:
        self.trace.append(TraceRecord(self.now, actor, direction, kind, summary))

    def send(self, src_id: str, dst_addr, msg, traffic_class: int = 0, flow_label: int = 0,
             hop_limit: Optional[int] = None) -> None:
        dst_addr = IPv6Address(dst_addr)
        header = Ipv6Header(traffic_class=traffic_class, flow_label=flow_label,
                            hop_limit=self.config.hop_limit if hop_limit is None else hop_limit,
                            source=self._specs[src_id].addr, destination=dst_addr)
        data = encode_packet(header, msg)
        self.record(src_id, "send", type(msg).__name__, f"{describe(msg)} dst={dst_addr}")
        self._transmit(src_id, dst_addr, data)

    def _transmit(self, at_id: str, dst_addr: IPv6Address, data: bytes) -> None:
        nxt = self.routes.get((at_id, dst_addr)) or self.id_of(dst_addr)
        if nxt is None or nxt not in self.actors:
            self.record(at_id, "internal", "Drop", f"no route to {dst_addr}")
            return
        delay = self.hop_delay(self.position_of(at_id), self.position_of(nxt))
        self.schedule(self.now + delay, "Deliver", nxt, data)

    def _deliver(self, target: str, data: bytes) -> None:
        actor = self.actors[target]
        if not actor.alive(self.now):
            return
        try:
            header, msg = decode_packet(data)
        except WireError as exc:
            self.record(target, "internal", "Drop", f"decode error {exc.name}")
            return
        if header.destination == actor.addr:
            self.record(target, "recv", type(msg).__name__, f"{describe(msg)} src={header.source}")
            actor.on_message(header, msg)
            return
        if header.hop_limit == 0:
            self.record(target, "internal", "Drop",
                        f"hop limit exhausted {type(msg).__name__} dst={header.destination}")
            return
        fwd = replace(header, hop_limit=header.hop_limit - 1)
        self.record(target, "internal", "Forward",
                    f"{type(msg).__name__} dst={header.destination} hop_limit={fwd.hop_limit}")
        self._transmit(target, header.destination, encode_packet(fwd, msg))

    def _inject(self, index: int) -> None:
        inj = self.config.inject[index]
        src = inj["from"]
        if inj["message"] == "ServerUpdate":
            msg = ServerUpdate(UpdateKind.Optimizer, 2)
        else:
            msg = IrssSolicitation(self.position_of(src).to_cm())
        self.send(src, self.entity_addr(inj["to"]), msg, hop_limit=inj.get("hop_limit"))

    def step(self) -> list[TraceRecord]:
        """Pop and dispatch the least event; returns the trace records it produced."""
        ev = heapq.heappop(self._queue)
        mark = len(self.trace)
        self.now = ev.time_us
        if ev.kind == "Deliver":
            self._deliver(ev.target, ev.payload)
        elif ev.kind == "Inject":
            self._inject(ev.payload)
        else:
            self.actors[ev.target].on_event(ev.kind, ev.payload)
        return self.trace[mark:]

    def pending(self) -> int:
        return len(self._queue)

    def run(self) -> tuple[list[TraceRecord], dict]:
        while self._queue and self._queue[0].time_us <= self.until_us:
            self.step()
        return self.trace, self.metrics


def run(scenario: Scenario, until_us: Optional[float] = None,
        seed: Optional[int] = None) -> tuple[list[TraceRecord], dict]:
    return World(scenario, seed=seed, until_us=until_us).run()


def trace_jsonl(trace: list[TraceRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in trace)


def metrics_csv(metrics: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for key in metrics:
        writer.writerow(metrics[key].row())
    return buf.getvalue()
