"""Simulation actors wrapping the Tx, Rx, IRSN, Server and router state machines.

Actors talk to the world only through ``send``, ``schedule``, ``record`` and
the ground-truth position lookups; the protocol logic itself lives in
:mod:`ioirs.nodes` and :mod:`ioirs.station`.
"""
from __future__ import annotations

import math

from .graphroute import position_at as orbit_position
from .irss import simulate_report
from .model import IrsnDescriptor, Position
from .nodes import (
    IrsnState,
    NoIrssFound,
    Phase,
    RejectPastTimestamp,
    ServerState,
    StaleVersion,
    TxState,
    irsn_apply_command,
    irsn_tick,
    server_push_update,
    tx_discover_irss,
    tx_on_decision,
    tx_on_degradation,
)
from .wire import (
    Command,
    IrssAdvertisement,
    IrssSolicitation,
    LocalizationQuery,
    Mobility,
    ServiceConfirmation,
    ServiceDenial,
    ServiceRequest,
    Status,
    UpdateKind,
)


class Actor:
    def __init__(self, world, spec):
        self.world = world
        self.spec = spec
        self.id = spec.id
        self.addr = spec.addr

    def position_at(self, t_us: float) -> Position:
        if self.spec.ephemeris is not None:
            return orbit_position(self.spec.ephemeris, t_us * 1e-6)
        return self.spec.position

    def alive(self, t_us: float) -> bool:
        return True

    def start(self) -> None:
        pass

    def on_message(self, header, msg) -> None:
        pass

    def on_event(self, kind: str, payload) -> None:
        pass

    def solicit_stations(self) -> None:
        """Unicast an IrssSolicitation to every station within discovery range."""
        here = self.position_at(self.world.now)
        for station in self.world.actors_of_kind("irss"):
            if here.distance_to(station.position_at(self.world.now)) <= self.world.config.discovery_range_m:
                self.world.send(self.id, station.addr, IrssSolicitation(here.to_cm()))


class RouterActor(Actor):
    """Pure forwarder; the world handles transit packets for every actor."""


class RxActor(Actor):
    def on_message(self, header, msg):
        if isinstance(msg, LocalizationQuery):
            self._answer_sweep(header, msg)

    def _answer_sweep(self, header, query: LocalizationQuery):
        w = self.world
        anchors = []
        for addr in w.session_anchors.get((header.source, query.session), ()):
            node = w.actor_by_addr(addr)
            if node is not None and node.alive(w.now):
                anchors.append(node.descriptor_at(w.now))
        cfg = w.config
        report = simulate_report(anchors, self.position_at(w.now), query.session, w.rng(self.id),
                                 cfg.aoa_sigma_deg, cfg.tof_sigma_ns)
        w.send(self.id, header.source, report)


class TxActor(RxActor):
    def __init__(self, world, spec):
        super().__init__(world, spec)
        self.state = TxState(spec.addr, self.position_at(0.0), spec.get("sinr_threshold_db", 10.0))
        self.flows = {f.flow_label: f for f in world.scenario.flows if f.tx == self.id}
        self.advertisements: dict = {}
        self.requested_at: dict = {}
        self.service_end: dict = {}

    def start(self):
        for label, f in sorted(self.flows.items()):
            self.state.add_flow(label, self.world.entity_addr(f.rx))
            self.world.schedule(f.start_us, "MeasureLink", self.id, label)

    def _template(self, f) -> ServiceRequest:
        return ServiceRequest(
            service_duration_ms=f.duration_ms,
            target_rx_addr=self.world.entity_addr(f.rx),
            modulation=f.modulation,
            mimo_rank=f.mimo_rank,
            band=f.band,
            tx_power_ddbm=int(round(f.tx_power_dbm * 10)),
            min_sinr_ddb=int(round(f.min_sinr_db * 10)),
            weights=f.weights,
            wpt_flag=f.wpt,
            localization_flag=f.localization,
            error_bound_cm=f.error_bound_cm if f.localization else 0,
        )

    def _transition(self, label, old, new):
        self.world.record(self.id, "internal", "FlowPhase",
                          f"flow={label} {old.value}->{new.value}")

    def _advance(self, label, phase):
        flow = self.state.active_flows[label]
        old, new = flow.advance(phase, self.world.now)
        self._transition(label, old, new)

    def on_event(self, kind, label):
        w = self.world
        flow = self.state.active_flows.get(label)
        if kind == "MeasureLink":
            self._measure(label)
        elif kind == "DiscoveryDone" and flow.phase is Phase.DISCOVERING:
            ads = sorted(self.advertisements.items())
            try:
                flow.irss_addr = tx_discover_irss(self.state, ads)
            except NoIrssFound:
                w.record(self.id, "internal", "NoIrssFound", f"flow={label}")
                self.solicit_stations()
                w.schedule(w.now + w.config.discovery_window_us, "DiscoveryDone", self.id, label)
                return
            self._advance(label, Phase.REQUESTED)
            self._send_request(label)
        elif kind == "StartTx" and flow.phase is Phase.CONFIRMED:
            self._advance(label, Phase.TRANSMITTING)
        elif kind == "EndService":
            w.record(self.id, "internal", "EndService", f"flow={label}")
        elif kind == "Retry" and flow.phase is Phase.DENIED:
            self._advance(label, Phase.IDLE)

    def _measure(self, label):
        w = self.world
        f = self.flows[label]
        flow = self.state.active_flows[label]
        now = w.now
        if f.localization:
            sinr = -math.inf
        else:
            sinr = w.link_sinr(f, now)
            if w.config.measurement_noise_db and math.isfinite(sinr):
                sinr += float(w.rng(self.id).normal(0.0, w.config.measurement_noise_db))
        m = w.metrics[f.key]
        end = self.service_end.get(label)
        transmitting = flow.phase is Phase.TRANSMITTING and (end is None or now < end)
        if not f.localization:
            m.samples.append((now, sinr, transmitting))
            if transmitting and sinr < f.min_sinr_db:
                m.outage_us += w.config.measure_period_us
        before = flow.phase
        if tx_on_degradation(self.state, label, sinr, self._template(f), now) is not None:
            self._transition(label, before, Phase.DISCOVERING)
            if flow.phase is Phase.REQUESTED:
                self._transition(label, Phase.DISCOVERING, Phase.REQUESTED)
                self._send_request(label)
            else:
                self.solicit_stations()
                w.schedule(now + w.config.discovery_window_us, "DiscoveryDone", self.id, label)
        if end is not None and now >= end:
            return
        nxt = now + w.config.measure_period_us
        if nxt <= w.until_us:
            w.schedule(nxt, "MeasureLink", self.id, label)

    def _send_request(self, label):
        flow = self.state.active_flows[label]
        f = self.flows[label]
        self.requested_at[label] = self.world.now
        self.world.metrics[f.key].requests += 1
        self.world.send(self.id, flow.irss_addr, flow.pending_request,
                        traffic_class=f.traffic_class, flow_label=label)

    def on_message(self, header, msg):
        w = self.world
        if isinstance(msg, IrssAdvertisement):
            self.advertisements[header.source] = msg
            return
        if isinstance(msg, (ServiceConfirmation, ServiceDenial)):
            label = header.flow_label
            flow = self.state.active_flows.get(label)
            if flow is None or flow.phase is not Phase.REQUESTED:
                w.record(self.id, "internal", "Ignored", f"flow={label} unexpected decision")
                return
            m = w.metrics[self.flows[label].key]
            tx_on_decision(self.state, label, msg, w.now)
            self._transition(label, Phase.REQUESTED, flow.phase)
            if isinstance(msg, ServiceConfirmation):
                m.confirmations += 1
                m.confirm_latency_us.append(w.now - self.requested_at[label])
                start = max(msg.tx_start_time_us, w.now)
                end = msg.tx_start_time_us + msg.duration_ms * 1000
                self.service_end[label] = end
                w.schedule(start, "StartTx", self.id, label)
                if end <= w.until_us:
                    w.schedule(end, "EndService", self.id, label)
            else:
                m.denials += 1
                m.denial_reasons.append(msg.reason.name)
                w.schedule(w.now + w.config.retry_backoff_us, "Retry", self.id, label)
            return
        super().on_message(header, msg)


class IrsnActor(Actor):
    def __init__(self, world, spec):
        super().__init__(world, spec)
        p = spec.params
        mobility = Mobility.MOBILE if p.get("mobility") == "mobile" else Mobility.STATIC
        descriptor = IrsnDescriptor(
            addr=spec.addr,
            position=self.position_at(0.0) if spec.ephemeris is not None else spec.position,
            bands=frozenset(p.get("bands")),
            n_elements=p.get("n_elements", 100),
            width_m=p.get("width_m", 1.0),
            height_m=p.get("height_m", 1.0),
            power_idle_mw=p.get("power_idle_mw", 50.0),
            power_active_mw=p.get("power_active_mw", 500.0),
            n_patterns=p.get("n_patterns", 64),
            mobility=mobility,
            max_speed_mps=p.get("max_speed_mps", 0.0),
            max_switch_hz=p.get("max_switch_hz", 1000.0),
            battery_pct=p.get("battery_pct", 100),
            mac=p.get("mac", 0),
        )
        parent = world.entity_addr(p["parent"]) if "parent" in p else None
        hb = world.config.heartbeat_us
        self.state = IrsnState(descriptor, parent_irss=parent, heartbeat_period_us=hb, next_heartbeat_us=hb)
        self.silence_at_us = p.get("silence_at_us", math.inf)

    def alive(self, t_us):
        return t_us < self.silence_at_us

    def position_at(self, t_us):
        if self.spec.ephemeris is not None:
            return super().position_at(t_us)
        return self.state.position_at(t_us)

    def descriptor_at(self, t_us) -> IrsnDescriptor:
        return self.state.descriptor.moved_to(self.position_at(t_us))

    def reflecting(self, t_us) -> bool:
        return self.alive(t_us) and self.state.active_pattern(t_us) != 0

    def _sync(self):
        if self.spec.ephemeris is not None:
            self.state.descriptor = self.descriptor_at(self.world.now)

    def start(self):
        if self.state.parent_irss is not None:
            self._advertise(self.state.parent_irss)
        self.world.schedule(self.world.config.tick_us, "Tick", self.id)

    def _advertise(self, dst):
        self._sync()
        self.world.send(self.id, dst, self.state.descriptor.to_advertisement())

    def on_event(self, kind, payload):
        w = self.world
        if kind != "Tick" or not self.alive(w.now):
            return
        self._sync()
        self.state, emitted = irsn_tick(self.state, w.now)
        for msg in emitted:
            if isinstance(msg, Status):
                w.send(self.id, self.state.parent_irss, msg)
            elif isinstance(msg, IrssSolicitation):
                self.solicit_stations()
        nxt = w.now + w.config.tick_us
        if nxt <= w.until_us:
            w.schedule(nxt, "Tick", self.id)

    def on_message(self, header, msg):
        w = self.world
        if isinstance(msg, Command):
            self._sync()
            try:
                self.state, status = irsn_apply_command(self.state, msg, w.now)
            except (RejectPastTimestamp, ValueError) as exc:
                w.record(self.id, "internal", "CommandRejected", str(exc))
                return
            w.send(self.id, header.source, status)
        elif isinstance(msg, IrssAdvertisement) and self.state.parent_irss is None:
            self.state.parent_irss = header.source
            w.record(self.id, "internal", "Attach", f"parent={header.source}")
            self._advertise(header.source)


class ServerActor(Actor):
    def __init__(self, world, spec):
        super().__init__(world, spec)
        children = sorted(
            world.entity_addr(e.id) for e in world.scenario.of_kind("irss")
            if e.get("server") == spec.id)
        self.state = ServerState(spec.addr, children)

    def start(self):
        kinds = {"protocol_defs": UpdateKind.ProtocolDefs, "optimizer": UpdateKind.Optimizer}
        for u in self.spec.get("updates", []):
            self.world.schedule(u["at_us"], "Push", self.id, (kinds[u["kind"]], u["version"]))

    def on_event(self, kind, payload):
        if kind != "Push":
            return
        update_kind, version = payload
        try:
            self.state, out = server_push_update(self.state, update_kind, version)
        except StaleVersion as exc:
            self.world.record(self.id, "internal", "StaleVersion", str(exc))
            return
        for child, msg in out:
            self.world.send(self.id, child, msg)

