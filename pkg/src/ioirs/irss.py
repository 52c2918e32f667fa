"""IRS Station decision engine.

Registry lifecycle, candidate-set formation, the exhaustive multi-objective
optimizer that yields a denial or a confirmation, command orchestration and
AoA/ToF localization.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from ipaddress import IPv6Address
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.optimize import least_squares

from .model import (
    SPEED_OF_LIGHT,
    IrsnDescriptor,
    LinkBudget,
    Position,
    capacity_bps_hz,
    eavesdropper_sinr_db,
    link_budget,
)
from .wire import (
    Assignment,
    Band,
    Command,
    DenialReason,
    LocalizationQuery,
    LocalizationReport,
    Measurement,
    ScheduleEntry,
    ServiceConfirmation,
    ServiceRequest,
)


class InsufficientAnchors(Exception):
    pass


class DegenerateGeometry(Exception):
    pass


# --- registry ---------------------------------------------------------------


@dataclass
class RegistryEntry:
    descriptor: IrsnDescriptor
    last_seen_us: float
    reserved_until_us: float = 0.0


@dataclass
class Registry:
    """IRSNs known to one station, keyed by address."""

    timeout_us: float = 30_000_000
    entries: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, addr):
        return IPv6Address(addr) in self.entries

    def get(self, addr) -> Optional[RegistryEntry]:
        return self.entries.get(IPv6Address(addr))

    def register_advertisement(self, d: IrsnDescriptor, now: float) -> Registry:
        entry = self.entries.get(d.addr)
        if entry is None:
            self.entries[d.addr] = RegistryEntry(d, now)
        else:
            entry.descriptor = d
            entry.last_seen_us = now
        return self

    def refresh(self, addr, now: float, position: Optional[Position] = None,
                battery_pct: Optional[int] = None) -> bool:
        """Apply a heartbeat; returns False for unknown nodes."""
        entry = self.get(addr)
        if entry is None:
            return False
        d = entry.descriptor
        if position is not None:
            d = d.moved_to(position)
        if battery_pct is not None:
            d = replace(d, battery_pct=battery_pct)
        entry.descriptor = d
        entry.last_seen_us = now
        return True

    def expire_stale(self, now: float, timeout_us: Optional[float] = None) -> tuple[Registry, list]:
        timeout = self.timeout_us if timeout_us is None else timeout_us
        if timeout <= 0:
            raise ValueError("timeout must be positive")
        removed = sorted(a for a, e in self.entries.items() if now - e.last_seen_us > timeout)
        for a in removed:
            del self.entries[a]
        return self, removed

    def is_live(self, entry: RegistryEntry, now: float) -> bool:
        return now - entry.last_seen_us <= self.timeout_us

    def live(self, now: float) -> list[IrsnDescriptor]:
        return [e.descriptor for a, e in sorted(self.entries.items()) if self.is_live(e, now)]

    def candidate_set(self, band: Band, min_battery_pct: float, now: float) -> list[IrsnDescriptor]:
        out = []
        for addr in sorted(self.entries):
            e = self.entries[addr]
            d = e.descriptor
            if (self.is_live(e, now) and band in d.bands and d.battery_pct >= min_battery_pct
                    and e.reserved_until_us <= now):
                out.append(d)
        return out

    def reserve(self, addrs: Iterable, until_us: float) -> None:
        for a in addrs:
            entry = self.get(a)
            if entry is not None:
                entry.reserved_until_us = max(entry.reserved_until_us, until_us)


# --- objective --------------------------------------------------------------


@dataclass(frozen=True)
class OptimizationWeights:
    w_sinr: float = 1.0
    w_latency: float = 0.0
    w_secrecy: float = 0.0
    w_power: float = 0.0

    def __post_init__(self):
        ws = (self.w_sinr, self.w_latency, self.w_secrecy, self.w_power)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError("weights must be nonnegative with at least one positive")

    @classmethod
    def from_wire(cls, raw: Sequence[int]) -> OptimizationWeights:
        # Wire order is (sinr, latency, secrecy, power).
        return cls(*(w / 255.0 for w in raw))

    def scaled(self, k: float) -> OptimizationWeights:
        return OptimizationWeights(self.w_sinr * k, self.w_latency * k,
                                   self.w_secrecy * k, self.w_power * k)


def squash(x: float) -> float:
    if math.isinf(x):
        return math.copysign(1.0, x)
    return x / (1.0 + abs(x))


@dataclass
class OptimizerConfig:
    k_max: int = 3
    min_gain_threshold: float = 0.0
    min_battery_pct: float = 5.0
    battery_capacity_mwh: float = 50_000.0
    relocation_deadline_s: float = 10.0
    grid_step_m: float = 1.0
    # Searching beyond speed * deadline surfaces MobilityInfeasible denials.
    relocation_search_m: float = 0.0
    max_joint_relocations: int = 20_000
    null_depth_db: float = 20.0
    beam_step_rad: float = 0.01
    gain_offset_db: float = 0.0


@dataclass
class DecisionContext:
    """Everything the optimizer needs besides the request and candidates."""

    tx: Position
    rx: Position
    freq_hz: float = 28e9
    noise_dbm: float = -90.0
    obstacles: Sequence = ()
    eavesdroppers: Sequence[Position] = ()
    angular_rates: dict = field(default_factory=dict)
    config: OptimizerConfig = field(default_factory=OptimizerConfig)


@dataclass(frozen=True)
class Evaluation:
    score: float
    budget: LinkBudget
    secrecy_bps_hz: float
    extra_delay_us: float
    added_power_mw: float

    @property
    def sinr_db(self) -> float:
        return self.budget.sinr_db


def evaluate(chain: Sequence[IrsnDescriptor], request: ServiceRequest, ctx: DecisionContext,
             weights: OptimizationWeights, relocations: Optional[dict] = None) -> Evaluation:
    relocations = relocations or {}
    placed = [n.moved_to(relocations[n.addr]) if n.addr in relocations else n for n in chain]
    cfg = ctx.config
    tx_power = request.tx_power_ddbm / 10.0
    budget = link_budget(ctx.tx, ctx.rx, placed, ctx.freq_hz, tx_power, ctx.noise_dbm,
                         ctx.obstacles, cfg.gain_offset_db)
    power = sum(n.power_active_mw - n.power_idle_mw for n in chain)
    if budget.blocked:
        return Evaluation(-math.inf, budget, 0.0, math.inf, power)
    eve = max((eavesdropper_sinr_db(budget, e, ctx.freq_hz, tx_power, ctx.noise_dbm, ctx.obstacles,
                                    cfg.null_depth_db, cfg.beam_step_rad)
               for e in ctx.eavesdroppers), default=-math.inf)
    secrecy = max(0.0, capacity_bps_hz(budget.sinr_db) - capacity_bps_hz(eve))
    delay_us = (budget.path_length_m - ctx.tx.distance_to(ctx.rx)) / SPEED_OF_LIGHT * 1e6
    score = (weights.w_sinr * squash(budget.sinr_db / 10.0)
             + weights.w_secrecy * squash(secrecy)
             - weights.w_latency * squash(delay_us)
             - weights.w_power * squash(power))
    return Evaluation(score, budget, secrecy, delay_us, power)


def evaluate_objective(chain: Sequence[IrsnDescriptor], request: ServiceRequest,
                       ctx: DecisionContext, weights: Optional[OptimizationWeights] = None,
                       relocations: Optional[dict] = None) -> float:
    if weights is None:
        weights = OptimizationWeights.from_wire(request.weights)
    return evaluate(chain, request, ctx, weights, relocations).score


# --- decisions --------------------------------------------------------------


@dataclass(frozen=True)
class Denial:
    reason: DenialReason


@dataclass(frozen=True)
class Confirmation:
    chain: tuple[IrsnDescriptor, ...]
    patterns: tuple[int, ...]
    relocations: dict
    duration_ms: int
    achieved_sinr_db: float
    objective_score: float
    baseline_score: float = -math.inf
    tx_start_time_us: Optional[int] = None

    @property
    def addrs(self) -> tuple[IPv6Address, ...]:
        return tuple(n.addr for n in self.chain)


ServiceDecision = Union[Denial, Confirmation]


def energy_drain_pct(node: IrsnDescriptor, duration_ms: float, capacity_mwh: float) -> float:
    return node.power_active_mw * (duration_ms / 3_600_000.0) / capacity_mwh * 100.0


def feasibility_ok(node: IrsnDescriptor, angular_rate: float, beam_step_rad: float) -> bool:
    return angular_rate <= node.max_switch_hz * beam_step_rad


def relocation_offsets(node: IrsnDescriptor, cfg: OptimizerConfig) -> list[tuple[float, Position, bool]]:
    """Grid targets as (displacement, position, reachable), nearest first."""
    if not node.is_mobile:
        return [(0.0, node.position, True)]
    reach = node.max_speed_mps * cfg.relocation_deadline_s
    radius = max(reach, cfg.relocation_search_m)
    m = int(math.floor(radius / cfg.grid_step_m + 1e-9))
    out = []
    for i in range(-m, m + 1):
        for j in range(-m, m + 1):
            d = math.hypot(i, j) * cfg.grid_step_m
            if d <= radius + 1e-9:
                out.append((d, i, j))
    out.sort()
    p = node.position
    return [(d, Position(p.x + i * cfg.grid_step_m, p.y + j * cfg.grid_step_m, p.z), d <= reach + 1e-9)
            for d, i, j in out]


def pattern_for(node: IrsnDescriptor, prev: Position, nxt: Position) -> int:
    """Opaque nonzero pattern id from the bisector of the incident/outgoing directions."""
    u, v = prev - node.position, nxt - node.position
    u = u.scale(1.0 / u.norm()) if u.norm() else u
    v = v.scale(1.0 / v.norm()) if v.norm() else v
    b = u + v
    azimuth = math.atan2(b.y, b.x) % (2 * math.pi)
    return 1 + int(azimuth / (2 * math.pi) * node.n_patterns) % node.n_patterns


@dataclass
class _Candidate:
    score: float
    chain: tuple
    relocations: dict
    evaluation: Evaluation
    mobility_ok: bool
    energy_ok: bool

    @property
    def feasible(self) -> bool:
        return self.mobility_ok and self.energy_ok


def _chain_candidates(chain, request, ctx, weights):
    cfg = ctx.config
    energy_ok = all(
        n.battery_pct - energy_drain_pct(n, request.service_duration_ms, cfg.battery_capacity_mwh)
        >= cfg.min_battery_pct for n in chain)
    rates_ok = all(feasibility_ok(n, ctx.angular_rates.get(n.addr, 0.0), cfg.beam_step_rad)
                   for n in chain)
    grids = [relocation_offsets(n, cfg) for n in chain]

    def make(choice):
        relocs = {n.addr: pos for n, (d, pos, _) in zip(chain, choice) if d > 0}
        ev = evaluate(chain, request, ctx, weights, relocs)
        reach_ok = all(ok for _, _, ok in choice)
        return _Candidate(ev.score, chain, relocs, ev, rates_ok and reach_ok, energy_ok)

    if math.prod(len(g) for g in grids) <= cfg.max_joint_relocations:
        for choice in itertools.product(*grids):
            yield make(choice)
        return
    # Coordinate-wise: one node at a time, others held at their best so far.
    choice = [g[0] for g in grids]
    for idx, grid in enumerate(grids):
        if len(grid) == 1:
            continue
        best = None
        for option in grid:
            trial = choice[:idx] + [option] + choice[idx + 1:]
            cand = make(trial)
            yield cand
            if best is None or cand.score > best[0]:
                best = (cand.score, option)
        choice[idx] = best[1]


def optimize(request: ServiceRequest, cset: Sequence[IrsnDescriptor], ctx: DecisionContext,
             weights: Optional[OptimizationWeights] = None) -> ServiceDecision:
    """Exhaustive search over ordered chains of 1..k_max candidates.

    Returns a :class:`Confirmation` when the best feasible configuration beats
    both the direct-link baseline and ``baseline + min_gain_threshold``;
    otherwise a :class:`Denial` carrying the most specific reason.
    """
    if not cset:
        return Denial(DenialReason.NoCandidates)
    if weights is None:
        weights = OptimizationWeights.from_wire(request.weights)
    cfg = ctx.config
    cset = sorted(cset, key=lambda n: n.addr)
    baseline = evaluate((), request, ctx, weights).score
    threshold = baseline + cfg.min_gain_threshold

    best_any = best_feasible = None
    for k in range(1, min(cfg.k_max, len(cset)) + 1):
        for chain in itertools.permutations(cset, k):
            for cand in _chain_candidates(chain, request, ctx, weights):
                # Strict '>' keeps the earliest: fewer nodes, then smaller addrs.
                if best_any is None or cand.score > best_any.score:
                    best_any = cand
                if cand.feasible and (best_feasible is None or cand.score > best_feasible.score):
                    best_feasible = cand

    if best_feasible is not None and best_feasible.score > baseline and best_feasible.score > threshold:
        return _confirm(best_feasible, request, ctx, baseline)
    if best_any.score > baseline and best_any.score > threshold:
        if not best_any.mobility_ok:
            return Denial(DenialReason.MobilityInfeasible)
        return Denial(DenialReason.EnergyBudget)
    if best_any.score > baseline:
        return Denial(DenialReason.CostOutweighsGain)
    return Denial(DenialReason.NoImprovement)


def _confirm(cand: _Candidate, request, ctx, baseline) -> Confirmation:
    placed = [n.moved_to(cand.relocations.get(n.addr, n.position)) for n in cand.chain]
    points = [ctx.tx] + [n.position for n in placed] + [ctx.rx]
    patterns = tuple(pattern_for(n, points[i], points[i + 2]) for i, n in enumerate(placed))
    return Confirmation(
        chain=tuple(cand.chain),
        patterns=patterns,
        relocations=dict(cand.relocations),
        duration_ms=request.service_duration_ms,
        achieved_sinr_db=cand.evaluation.sinr_db,
        objective_score=cand.score,
        baseline_score=baseline,
    )


def build_commands(decision: Confirmation, now: int, guard_us: int, prep_us: int = 1000,
                   node_delay_us: Optional[dict] = None, release: bool = True
                   ) -> tuple[list[tuple[IPv6Address, Command]], ServiceConfirmation]:
    """Per-IRSN commands plus the Tx confirmation for a confirmed decision.

    ``node_delay_us`` adds per-node control latency to the activation time so
    commands never arrive after the instant they schedule.  With ``release``
    each schedule ends with pattern 0 when the service expires.
    """
    node_delay_us = node_delay_us or {}
    activations = {n.addr: int(now + prep_us + math.ceil(node_delay_us.get(n.addr, 0)))
                   for n in decision.chain}
    ready = max(activations.values())
    for n in decision.chain:
        target = decision.relocations.get(n.addr)
        if target is not None:
            travel = n.position.distance_to(target) / n.max_speed_mps
            ready = max(ready, int(now + math.ceil(travel * 1e6)))
    tx_start = ready + guard_us
    end = tx_start + decision.duration_ms * 1000

    commands, assignments = [], []
    for n, pattern in zip(decision.chain, decision.patterns):
        at = activations[n.addr]
        schedule = [ScheduleEntry(pattern, at)]
        if release:
            schedule.append(ScheduleEntry(0, end))
        target = decision.relocations.get(n.addr)
        cmd = Command(tuple(schedule), target is not None,
                      target.to_cm() if target is not None else (0, 0, 0))
        commands.append((n.addr, cmd))
        assignments.append(Assignment(n.addr, pattern, at))
    return commands, ServiceConfirmation(tx_start, decision.duration_ms, tuple(assignments))


# --- localization -----------------------------------------------------------


@dataclass(frozen=True)
class Bearing:
    anchor: Position
    aoa_deg: float
    tof_ns: Optional[float] = None


@dataclass(frozen=True)
class LocalizationEstimate:
    position: Position
    residual_cm: float
    anchors_used: int


def _residuals(p, bearings, height):
    out = []
    for b in bearings:
        th = math.radians(b.aoa_deg)
        dx, dy = p[0] - b.anchor.x, p[1] - b.anchor.y
        parts = [-math.sin(th) * dx + math.cos(th) * dy]
        if b.tof_ns is not None:
            rng = SPEED_OF_LIGHT * b.tof_ns * 1e-9 / 2.0
            parts.append(math.sqrt(dx * dx + dy * dy + (height - b.anchor.z) ** 2) - rng)
        out.append(parts)
    return out


def triangulate(bearings: Sequence[Bearing], height: float = 0.0) -> LocalizationEstimate:
    """Least-squares fix from planar bearings and optional round-trip ToF.

    Bearings are lines through the anchor; ToF contributes a range residual
    with range = c * tof / 2.  The estimate lies at z = ``height``.
    """
    if len(bearings) < 2:
        raise DegenerateGeometry("need at least two measurements")
    A = np.array([[-math.sin(math.radians(b.aoa_deg)), math.cos(math.radians(b.aoa_deg))]
                  for b in bearings])
    rhs = np.array([A[i] @ (b.anchor.x, b.anchor.y) for i, b in enumerate(bearings)])
    s = np.linalg.svd(A, compute_uv=False)
    bearing_rank_ok = s[-1] > 1e-9 * s[0]

    if all(b.tof_ns is None for b in bearings):
        if not bearing_rank_ok:
            raise DegenerateGeometry("bearing lines are parallel")
        p = np.linalg.solve(A.T @ A, A.T @ rhs)
    else:
        if bearing_rank_ok:
            p0 = np.linalg.solve(A.T @ A, A.T @ rhs)
        else:
            pts = []
            for b in bearings:
                if b.tof_ns is not None:
                    r = SPEED_OF_LIGHT * b.tof_ns * 1e-9 / 2.0
                    th = math.radians(b.aoa_deg)
                    pts.append((b.anchor.x + r * math.cos(th), b.anchor.y + r * math.sin(th)))
            p0 = np.mean(pts, axis=0)

        def fun(p):
            return np.array([r for parts in _residuals(p, bearings, height) for r in parts])

        sol = least_squares(fun, p0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
        sv = np.linalg.svd(sol.jac, compute_uv=False)
        if sv[-1] <= 1e-9 * sv[0]:
            raise DegenerateGeometry("measurement geometry does not fix a position")
        p = sol.x

    per = [math.sqrt(sum(r * r for r in parts)) for parts in _residuals(p, bearings, height)]
    rms = math.sqrt(sum(r * r for r in per) / len(per))
    return LocalizationEstimate(Position(float(p[0]), float(p[1]), height), 100.0 * rms, len(bearings))


def simulate_report(anchors: Sequence[IrsnDescriptor], target: Position, session: int,
                    rng: Optional[np.random.Generator] = None, aoa_sigma_deg: float = 0.0,
                    tof_sigma_ns: float = 0.0, with_tof: bool = True) -> LocalizationReport:
    """Quantized AoA/ToF measurements of *target* as seen from each anchor's sweep."""
    items = []
    for a in anchors:
        aoa = math.degrees(math.atan2(target.y - a.position.y, target.x - a.position.x))
        if aoa_sigma_deg and rng is not None:
            aoa += rng.normal(0.0, aoa_sigma_deg)
        aoa = (aoa + 180.0) % 360.0 - 180.0
        tof = 0
        if with_tof:
            t = 2.0 * a.position.distance_to(target) / SPEED_OF_LIGHT * 1e9
            if tof_sigma_ns and rng is not None:
                t += rng.normal(0.0, tof_sigma_ns)
            tof = max(1, int(round(t)))
        items.append(Measurement(a.addr, int(round(aoa * 100)), tof, 0))
    return LocalizationReport(session, tuple(items))


def report_bearings(report: LocalizationReport, positions: dict) -> list[Bearing]:
    """Bearings for the measurements whose IRSN position is known; tof 0 means absent."""
    out = []
    for m in report.measurements:
        if m.irsn_addr in positions:
            out.append(Bearing(positions[m.irsn_addr], m.aoa_cdeg / 100.0, m.tof_ns or None))
    return out


def order_anchors(registry: Registry, reference: Position, now: float) -> list[IrsnDescriptor]:
    return sorted(registry.live(now), key=lambda d: (d.position.distance_to(reference), d.addr))


@dataclass
class LocalizationOutcome:
    estimates: list
    success: bool

    @property
    def final(self) -> Optional[LocalizationEstimate]:
        return self.estimates[-1] if self.estimates else None


def localization_session(request: ServiceRequest, registry: Registry, reference: Position,
                         measure: Callable[[list, LocalizationQuery], LocalizationReport],
                         max_anchors: int = 8, now: float = 0.0, session: int = 1,
                         height: float = 0.0) -> LocalizationOutcome:
    """Recruit anchors nearest-first until the residual meets the request's bound."""
    anchors = order_anchors(registry, reference, now)
    if len(anchors) < 2:
        raise InsufficientAnchors(f"{len(anchors)} live IRSN(s); need 2")
    limit = min(max_anchors, len(anchors))
    bound = request.error_bound_cm
    estimates = []
    k = 2
    while True:
        used = anchors[:k]
        report = measure(used, LocalizationQuery(session, 1))
        try:
            est = triangulate(report_bearings(report, {a.addr: a.position for a in used}), height)
        except DegenerateGeometry:
            est = None
        if est is not None:
            estimates.append(est)
            if est.residual_cm <= bound:
                return LocalizationOutcome(estimates, True)
        if k >= limit:
            return LocalizationOutcome(estimates, False)
        k += 1
