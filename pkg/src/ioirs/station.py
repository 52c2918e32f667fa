"""IRS Station actor: registry upkeep, request scheduling and service orchestration."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .entities import Actor
from .graphroute import (
    Ephemeris,
    Feasibility,
    NoCoverage,
    feasibility_check,
    position_at,
    predict_handover,
    relative_angular_rate,
    relay_visible,
)
from .irss import (
    Confirmation,
    DecisionContext,
    Denial,
    DegenerateGeometry,
    OptimizerConfig,
    Registry,
    build_commands,
    optimize,
    order_anchors,
    pattern_for,
    report_bearings,
    triangulate,
)
from .model import IrsnDescriptor, IrssDescriptor, Position
from .nodes import apply_server_update
from .wire import (
    Assignment,
    Command,
    DenialReason,
    IrsnAdvertisement,
    IrssSolicitation,
    LocalizationQuery,
    LocalizationReport,
    ScheduleEntry,
    ServerUpdate,
    ServiceConfirmation,
    ServiceDenial,
    ServiceRequest,
    Status,
)


@dataclass(order=True)
class PendingRequest:
    sort_key: tuple
    source: object = field(compare=False)
    flow_label: int = field(compare=False)
    traffic_class: int = field(compare=False)
    request: ServiceRequest = field(compare=False)


@dataclass
class ActiveService:
    flow_key: str
    nodes: tuple
    end_us: float
    failed: bool = False
    # Reactive handover bookkeeping.
    tx: Optional[Ephemeris] = None
    rx: Optional[Ephemeris] = None
    relays: dict = field(default_factory=dict)
    serving: Optional[object] = None


@dataclass
class LocSession:
    item: PendingRequest
    request: ServiceRequest
    anchors: list
    k: int = 2
    limit: int = 2


def static_ephemeris(p: Position) -> Ephemeris:
    """A zero-rate orbit that pins a ground entity at *p*."""
    r = p.norm()
    if r == 0:
        return Ephemeris(0.0, 0.0)
    u = p.scale(1.0 / r)
    helper = Position(1.0, 0.0, 0.0) if abs(u.x) < 0.9 else Position(0.0, 1.0, 0.0)
    v = helper - u.scale(helper.dot(u))
    v = v.scale(1.0 / v.norm())
    return Ephemeris(r, 0.0, 0.0, tuple(u), tuple(v))


class StationActor(Actor):
    def __init__(self, world, spec):
        super().__init__(world, spec)
        cfg = world.config
        server = spec.get("server")
        self.descriptor = IrssDescriptor(
            addr=spec.addr,
            server_addr=world.entity_addr(server) if server else spec.addr,
            position=self.position_at(0.0),
            proto_versions_abc=tuple(spec.get("proto_versions", (1, 1, 1))),
            optimizer_version=spec.get("optimizer_version", 1),
            mac=spec.get("mac", 0),
        )
        self.registry = Registry(timeout_us=cfg.timeout_us)
        self.pending: list = []
        self._arrivals = 0
        self._sessions = 0
        self.services: dict = {}
        self.sessions: dict = {}
        self.decision_order: list = []
        self.candidate_log: list = []
        self.opt_config = OptimizerConfig(
            k_max=cfg.k_max,
            min_gain_threshold=cfg.min_gain_threshold,
            min_battery_pct=cfg.min_battery_pct,
            battery_capacity_mwh=cfg.battery_capacity_mwh,
            relocation_deadline_s=cfg.relocation_deadline_s,
            grid_step_m=cfg.grid_step_m,
            relocation_search_m=cfg.relocation_search_m,
            null_depth_db=cfg.null_depth_db,
            beam_step_rad=cfg.beam_step_rad,
            gain_offset_db=cfg.gain_offset_db,
        )

    def start(self):
        self.world.schedule(self.world.config.tick_us, "Tick", self.id)

    # --- message handling -----------------------------------------------

    def on_message(self, header, msg):
        w = self.world
        src = header.source
        if isinstance(msg, IrsnAdvertisement):
            self.registry.register_advertisement(IrsnDescriptor.from_advertisement(msg), w.now)
            w.record(self.id, "internal", "Register", f"irsn={msg.addr}")
        elif isinstance(msg, Status):
            if not self.registry.refresh(src, w.now, Position.from_cm(msg.position_cm), msg.battery_pct):
                w.record(self.id, "internal", "UnknownIrsn", f"irsn={src}")
        elif isinstance(msg, IrssSolicitation):
            w.send(self.id, src, self.descriptor.to_advertisement())
        elif isinstance(msg, ServerUpdate):
            self.descriptor = apply_server_update(self.descriptor, msg)
            w.record(self.id, "internal", "VersionUpdate",
                     f"{msg.update_kind.name}={msg.new_version}")
        elif isinstance(msg, ServiceRequest):
            self._arrivals += 1
            item = PendingRequest((-header.traffic_class, w.now, self._arrivals), src,
                                  header.flow_label, header.traffic_class, msg)
            if not self.pending:
                w.schedule(w.now + w.config.proc_delay_us, "Decide", self.id)
            self.pending.append(item)
        elif isinstance(msg, LocalizationReport):
            self._on_report(src, msg)

    def on_event(self, kind, payload):
        if kind == "Decide":
            batch, self.pending = sorted(self.pending), []
            for item in batch:
                self._decide(item)
        elif kind == "Tick":
            self._housekeeping()
            nxt = self.world.now + self.world.config.tick_us
            if nxt <= self.world.until_us:
                self.world.schedule(nxt, "Tick", self.id)
        elif kind == "HandoverCheck":
            self._reactive_check(payload)

    # --- decisions --------------------------------------------------------

    def _flow_key(self, source, label) -> str:
        return f"{self.world.id_of(source)}/{label}"

    def _reply(self, item: PendingRequest, msg):
        self.world.send(self.id, item.source, msg, traffic_class=item.traffic_class,
                        flow_label=item.flow_label)

    def _deny(self, item: PendingRequest, reason: DenialReason):
        self._reply(item, ServiceDenial(reason))

    def _decide(self, item: PendingRequest):
        w = self.world
        req = item.request
        key = self._flow_key(item.source, item.flow_label)
        self.decision_order.append(key)
        w.record(self.id, "internal", "Decide",
                 f"flow={key} traffic_class={item.traffic_class}")
        self.registry.expire_stale(w.now)
        if req.localization_flag:
            self._start_localization(item)
            return
        cset = self.registry.candidate_set(req.band, self.opt_config.min_battery_pct, w.now)
        self.candidate_log.append((w.now, tuple(n.addr for n in cset)))
        w.record(self.id, "internal", "CandidateSet",
                 f"flow={key} irsns={','.join(str(n.addr) for n in cset) or '-'}")
        tx_id, rx_id = w.id_of(item.source), w.id_of(req.target_rx_addr)
        if rx_id is None:
            self._deny(item, DenialReason.NoCandidates)
            return
        if w.config.handover != "none" and cset and all(w.spec(a).ephemeris for a in self._ids(cset)):
            self._decide_orbital(item, key, cset, tx_id, rx_id)
            return
        ctx = DecisionContext(
            tx=w.position_of(tx_id), rx=w.position_of(rx_id), freq_hz=w.config.frequency_hz,
            noise_dbm=w.config.noise_dbm, obstacles=w.occluders,
            eavesdroppers=w.eavesdropper_positions(), config=self.opt_config)
        decision = optimize(req, cset, ctx)
        if isinstance(decision, Denial):
            self._deny(item, decision.reason)
            return
        self._commit(item, key, decision)

    def _ids(self, nodes):
        return [self.world.id_of(n.addr) for n in nodes]

    def _node_delay(self, addr) -> float:
        w = self.world
        return w.hop_delay(self.position_at(w.now), w.position_of(w.id_of(addr)))

    def _commit(self, item: PendingRequest, key: str, decision: Confirmation):
        w = self.world
        delays = {n.addr: self._node_delay(n.addr) for n in decision.chain}
        commands, conf = build_commands(decision, int(math.ceil(w.now)), w.config.guard_us,
                                        w.config.prep_us, delays)
        end = conf.tx_start_time_us + conf.duration_ms * 1000
        for addr, cmd in commands:
            w.send(self.id, addr, cmd, flow_label=item.flow_label)
        self.registry.reserve(decision.addrs, end)
        self.services[key] = ActiveService(key, decision.addrs, end)
        w.register_service(key, [decision.addrs])
        self._reply(item, conf)

    # --- orbital handover -------------------------------------------------

    def _decide_orbital(self, item, key, cset, tx_id, rx_id):
        w = self.world
        cfg = w.config
        now_s = w.now * 1e-6
        tx_eph = w.spec(tx_id).ephemeris or static_ephemeris(w.position_of(tx_id))
        rx_eph = w.spec(rx_id).ephemeris or static_ephemeris(w.position_of(rx_id))
        relays = {}
        for n in cset:
            eph = w.spec(w.id_of(n.addr)).ephemeris
            rate = max(relative_angular_rate(eph, tx_eph, now_s), relative_angular_rate(eph, rx_eph, now_s))
            if feasibility_check(n, rate, cfg.beam_step_rad) is Feasibility.ACCEPT:
                relays[str(n.addr)] = (n, eph)
        if not relays:
            self._deny(item, DenialReason.MobilityInfeasible)
            return
        delays = {a: self._node_delay(n.addr) for a, (n, _) in relays.items()}
        activate = int(math.ceil(w.now + cfg.prep_us + max(delays.values())))
        tx_start = activate + cfg.guard_us
        end = tx_start + item.request.service_duration_ms * 1000
        ephs = {a: e for a, (_, e) in relays.items()}

        if cfg.handover == "predictive":
            try:
                plan = predict_handover(tx_eph, rx_eph, ephs, (tx_start, end), cfg.handover_step_us,
                                        w.occluders, cfg.frequency_hz)
            except NoCoverage as exc:
                w.record(self.id, "internal", "NoCoverage", f"flow={key} t_us={exc.t_us}")
                self._deny(item, DenialReason.NoCandidates)
                return
            schedules: dict = {}
            for i, iv in enumerate(plan.intervals):
                on = activate if i == 0 else int(math.ceil(iv.start_us))
                off = int(math.ceil(iv.end_us))
                n = relays[iv.serving][0]
                pattern = self._orbital_pattern(n, ephs[iv.serving], tx_eph, rx_eph, on)
                schedules.setdefault(iv.serving, []).extend([(on, pattern), (off, 0)])
            first = plan.intervals[0].serving
            w.metrics[key].handovers += plan.handovers
            for a in sorted(schedules):
                entries = tuple(ScheduleEntry(p, t) for t, p in _dedupe(schedules[a]))
                w.send(self.id, relays[a][0].addr, Command(entries), flow_label=item.flow_label)
            first_on = schedules[first][0]
        else:
            first = self._best_visible(tx_eph, rx_eph, ephs, tx_start)
            if first is None:
                self._deny(item, DenialReason.NoCandidates)
                return
            pattern = self._orbital_pattern(relays[first][0], ephs[first], tx_eph, rx_eph, activate)
            w.send(self.id, relays[first][0].addr,
                   Command((ScheduleEntry(pattern, activate), ScheduleEntry(0, end))),
                   flow_label=item.flow_label)
            first_on = (activate, pattern)
            w.schedule(tx_start + cfg.handover_step_us, "HandoverCheck", self.id, key)

        addrs = tuple(relays[a][0].addr for a in sorted(relays))
        self.registry.reserve(addrs, end)
        self.services[key] = ActiveService(key, addrs, end, tx=tx_eph, rx=rx_eph, relays=ephs,
                                           serving=first)
        w.register_service(key, [(a,) for a in addrs])
        conf = ServiceConfirmation(tx_start, item.request.service_duration_ms,
                                   (Assignment(relays[first][0].addr, first_on[1], first_on[0]),))
        self._reply(item, conf)

    def _orbital_pattern(self, node, eph, tx_eph, rx_eph, t_us) -> int:
        ts = t_us * 1e-6
        return pattern_for(node.moved_to(position_at(eph, ts)), position_at(tx_eph, ts),
                           position_at(rx_eph, ts))

    def _best_visible(self, tx_eph, rx_eph, ephs, t_us):
        ts = t_us * 1e-6
        tx, rx = position_at(tx_eph, ts), position_at(rx_eph, ts)
        ranked = sorted(
            (tx.distance_to(position_at(e, ts)) * position_at(e, ts).distance_to(rx), a)
            for a, e in ephs.items() if relay_visible(tx, rx, position_at(e, ts), self.world.occluders))
        return ranked[0][1] if ranked else None

    def _reactive_check(self, key):
        """Switch relays only once the serving one has been observed occluded."""
        w = self.world
        svc = self.services.get(key)
        if svc is None or w.now >= svc.end_us:
            return
        ts = w.now * 1e-6
        tx, rx = position_at(svc.tx, ts), position_at(svc.rx, ts)
        if not relay_visible(tx, rx, position_at(svc.relays[svc.serving], ts), w.occluders):
            nxt = self._best_visible(svc.tx, svc.rx, svc.relays, w.now)
            if nxt is not None and nxt != svc.serving:
                old = w.actor_by_addr_str(svc.serving)
                new = w.actor_by_addr_str(nxt)
                at = int(math.ceil(w.now + max(self._node_delay(old.addr), self._node_delay(new.addr))))
                w.send(self.id, old.addr, Command((ScheduleEntry(0, at),)))
                pattern = self._orbital_pattern(new.state.descriptor, svc.relays[nxt], svc.tx, svc.rx, at)
                w.send(self.id, new.addr,
                       Command((ScheduleEntry(pattern, at), ScheduleEntry(0, int(svc.end_us)))))
                w.record(self.id, "internal", "Handover", f"flow={key} {svc.serving}->{nxt}")
                w.metrics[key].handovers += 1
                svc.serving = nxt
        nxt_t = w.now + w.config.handover_step_us
        if nxt_t < svc.end_us and nxt_t <= w.until_us:
            w.schedule(nxt_t, "HandoverCheck", self.id, key)

    # --- localization -----------------------------------------------------

    def _start_localization(self, item: PendingRequest):
        w = self.world
        reference = w.position_of(w.id_of(item.source))
        anchors = order_anchors(self.registry, reference, w.now)
        if len(anchors) < 2:
            w.record(self.id, "internal", "InsufficientAnchors", f"live={len(anchors)}")
            self._deny(item, DenialReason.NoCandidates)
            return
        self._sessions += 1
        sid = self._sessions
        self.sessions[sid] = LocSession(item, item.request, anchors,
                                        k=2, limit=min(w.config.max_anchors, len(anchors)))
        self._query(sid)

    def _query(self, sid: int):
        w = self.world
        s = self.sessions[sid]
        w.session_anchors[(self.addr, sid)] = [a.addr for a in s.anchors[:s.k]]
        w.send(self.id, s.request.target_rx_addr, LocalizationQuery(sid, 1))

    def _on_report(self, src, report: LocalizationReport):
        w = self.world
        s = self.sessions.get(report.session)
        if s is None:
            return
        item = s.item
        used = s.anchors[:s.k]
        bearings = report_bearings(report, {a.addr: a.position for a in used})
        try:
            est = triangulate(bearings)
        except DegenerateGeometry:
            est = None
        if est is not None:
            w.record(self.id, "internal", "Estimate",
                     f"session={report.session} anchors={est.anchors_used} residual_cm={est.residual_cm:.3f}")
            w.localization_estimates.setdefault(self._flow_key(item.source, item.flow_label), []).append(est)
            if est.residual_cm <= s.request.error_bound_cm:
                del self.sessions[report.session]
                now = int(math.ceil(w.now))
                conf = ServiceConfirmation(now, s.request.service_duration_ms,
                                           tuple(Assignment(a.addr, 1, now) for a in used))
                self._reply(item, conf)
                return
        if s.k >= s.limit:
            del self.sessions[report.session]
            self._deny(item, DenialReason.NoImprovement)
            return
        s.k += 1
        self._query(report.session)

    # --- housekeeping -----------------------------------------------------

    def _housekeeping(self):
        w = self.world
        _, removed = self.registry.expire_stale(w.now)
        for addr in removed:
            w.record(self.id, "internal", "Expire", f"irsn={addr}")
        for key, svc in sorted(self.services.items()):
            lost = [a for a in svc.nodes if a in removed]
            if lost and not svc.failed and w.now < svc.end_us:
                svc.failed = True
                w.metrics[key].failed = True
                w.record(self.id, "internal", "ServiceFailed",
                         f"flow={key} lost={','.join(str(a) for a in lost)}")


def _dedupe(entries):
    """Collapse same-time entries (a switch-on wins over a switch-off)."""
    merged: dict = {}
    for t, p in entries:
        if t not in merged or p != 0:
            merged[t] = p
    return sorted(merged.items())
