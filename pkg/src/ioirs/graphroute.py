"""LoS connectivity graphs, virtual-LoS path search and orbital handover planning."""
from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .model import (
    IrsnDescriptor,
    Position,
    Sphere,
    angle_between,
    array_gain_db,
    capacity_bps_hz,
    fspl_db,
    is_los,
    sinr_db,
)

EARTH_RADIUS_M = 6_371_000.0


class NoCoverage(Exception):
    def __init__(self, t_us: float):
        super().__init__(f"no IRSN has two-segment LoS at t={t_us:.0f} us")
        self.t_us = t_us


class Kind(enum.Enum):
    TX = "tx"
    RX = "rx"
    IRSN = "irsn"
    EAVESDROPPER = "eve"


@dataclass(frozen=True)
class Vertex:
    id: str
    position: Position
    kind: Kind
    gain_db: float = 0.0  # array gain when used as an intermediate reflector


@dataclass
class ConnectivityGraph:
    vertices: dict
    edges: dict  # (id_a, id_b) with id_a < id_b -> loss_db
    timestamp_us: float = 0.0
    _adjacency: Optional[dict] = field(default=None, init=False, repr=False, compare=False)

    def loss(self, a: str, b: str) -> Optional[float]:
        return self.edges.get((a, b) if a < b else (b, a))

    def has_edge(self, a: str, b: str) -> bool:
        return self.loss(a, b) is not None

    def neighbors(self, v: str) -> list[str]:
        if self._adjacency is None:
            adj = {vid: [] for vid in self.vertices}
            for a, b in self.edges:
                adj[a].append(b)
                adj[b].append(a)
            self._adjacency = {vid: sorted(ns) for vid, ns in adj.items()}
        return self._adjacency[v]

    def effective_gain(self, v: str) -> float:
        """Array gain of *v* clamped below its cheapest incident edge.

        Keeps every arc cost strictly positive so label-setting search stays
        exact.
        """
        vx = self.vertices[v]
        if vx.kind is not Kind.IRSN:
            return 0.0
        incident = [self.loss(v, u) for u in self.neighbors(v)]
        if not incident:
            return vx.gain_db
        cap = min(incident) - 1e-6
        return min(vx.gain_db, cap)

    def export_lines(self) -> list[str]:
        return [f"edge {a} {b} {loss:.6f}" for (a, b), loss in sorted(self.edges.items())]


def build_graph(entities: Iterable[Vertex], occluders: Sequence = (), freq_hz: float = 28e9,
                t_us: float = 0.0) -> ConnectivityGraph:
    vertices = {v.id: v for v in entities}
    if len(vertices) < 2:
        raise ValueError("a graph needs at least two entities")
    ids = sorted(vertices)
    edges = {}
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            pa, pb = vertices[a].position, vertices[b].position
            if pa == pb or not is_los(pa, pb, occluders):
                continue
            edges[(a, b)] = fspl_db(pa.distance_to(pb), freq_hz)
    return ConnectivityGraph(vertices, edges, t_us)


def irsn_vertex(d: IrsnDescriptor, vid: Optional[str] = None, gain_offset_db: float = 0.0) -> Vertex:
    return Vertex(vid or str(d.addr), d.position, Kind.IRSN, array_gain_db(d.n_elements, gain_offset_db))


@dataclass(frozen=True)
class PathResult:
    vertices: tuple[str, ...]
    cost_db: float
    secrecy_bps_hz: float = 0.0

    @property
    def intermediates(self) -> tuple[str, ...]:
        return self.vertices[1:-1]


def path_cost(g: ConnectivityGraph, path: Sequence[str]) -> float:
    """Sum of edge losses minus effective gain of every intermediate vertex."""
    cost = 0.0
    for i in range(1, len(path)):
        cost += g.loss(path[i - 1], path[i])
        if i < len(path) - 1:
            cost -= g.effective_gain(path[i])
    return cost


def best_path(g: ConnectivityGraph, src: str, dst: str, max_hops: int = 3) -> Optional[PathResult]:
    """Minimum-loss simple path with at most *max_hops* IRSN intermediates.

    Dijkstra over (vertex, intermediates-used) states; labels carry the path
    so ties resolve to the lexicographically smallest vertex sequence.
    """
    if src not in g.vertices or dst not in g.vertices:
        raise KeyError("src and dst must be graph vertices")
    heap = [(0.0, (src,))]
    settled = set()
    while heap:
        cost, path = heapq.heappop(heap)
        v = path[-1]
        if v == dst:
            return PathResult(path, cost)
        state = (v, len(path) - 1)
        if state in settled:
            continue
        settled.add(state)
        if len(path) - 1 > max_hops:
            continue
        for u in g.neighbors(v):
            if u in path:
                continue
            if u != dst and (g.vertices[u].kind is not Kind.IRSN or len(path) > max_hops):
                continue
            step = g.loss(v, u)
            nxt = cost + step
            if u != dst:
                nxt -= g.effective_gain(u)
            heapq.heappush(heap, (nxt, path + (u,)))
    return None


def simple_paths(g: ConnectivityGraph, src: str, dst: str, max_hops: int) -> list[tuple[str, ...]]:
    """All simple src-dst paths whose intermediates are IRSNs, at most *max_hops* of them."""
    out = []

    def walk(path):
        v = path[-1]
        for u in g.neighbors(v):
            if u in path:
                continue
            if u == dst:
                out.append(path + (u,))
            elif g.vertices[u].kind is Kind.IRSN and len(path) <= max_hops:
                walk(path + (u,))

    if src == dst:
        return []
    walk((src,))
    return out


def path_secrecy(g: ConnectivityGraph, path: Sequence[str], eavesdroppers: Sequence[str],
                 tx_power_dbm: float, noise_dbm: float, null_depth_db: float = 20.0,
                 min_null_separation_rad: float = 0.01) -> float:
    """Secrecy rate of *path* against the strongest eavesdropper vertex.

    An eavesdropper hears the path up to its last radiating vertex, then its
    own edge from that vertex; the chain's gain toward it is reduced by
    ``null_depth_db`` unless it lies within ``min_null_separation_rad`` of
    the receiver direction.
    """
    rx_sinr = sinr_db(tx_power_dbm, path_cost(g, path), noise_dbm)
    last, dst = path[-2], path[-1]
    relayed = len(path) > 2
    edges_to_last = sum(g.loss(path[i], path[i + 1]) for i in range(len(path) - 2))
    chain_gain = sum(g.effective_gain(v) for v in path[1:-1])
    eve_best = -math.inf
    for e in eavesdroppers:
        if e == last:
            eve_best = math.inf
            continue
        hop = g.loss(last, e)
        if hop is None:
            continue
        gain = chain_gain
        if relayed:
            pl, prx, pe = (g.vertices[x].position for x in (last, dst, e))
            if angle_between(prx - pl, pe - pl) >= min_null_separation_rad:
                gain -= null_depth_db
        eve_best = max(eve_best, sinr_db(tx_power_dbm, edges_to_last + hop - gain, noise_dbm))
    return max(0.0, capacity_bps_hz(rx_sinr) - capacity_bps_hz(eve_best))


def secrecy_path(g: ConnectivityGraph, src: str, dst: str, eavesdroppers: Sequence[str],
                 max_hops: int = 3, tx_power_dbm: float = 30.0, noise_dbm: float = -90.0,
                 null_depth_db: float = 20.0, min_null_separation_rad: float = 0.01
                 ) -> Optional[PathResult]:
    """Feasible path of maximum secrecy rate; ties by lower loss, then lexicographic."""
    if not eavesdroppers:
        res = best_path(g, src, dst, max_hops)
        if res is None:
            return None
        return PathResult(res.vertices, res.cost_db,
                          capacity_bps_hz(sinr_db(tx_power_dbm, res.cost_db, noise_dbm)))
    best = None
    for path in simple_paths(g, src, dst, max_hops):
        s = path_secrecy(g, path, eavesdroppers, tx_power_dbm, noise_dbm, null_depth_db,
                         min_null_separation_rad)
        key = (-s, path_cost(g, path), path)
        if best is None or key < best[0]:
            best = (key, PathResult(path, key[1], s))
    return best[1] if best else None


# --- orbits -----------------------------------------------------------------


@dataclass(frozen=True)
class Ephemeris:
    orbit_radius_m: float
    angular_rate_rad_s: float
    phase_rad: float = 0.0
    u: tuple = (1.0, 0.0, 0.0)
    v: tuple = (0.0, 1.0, 0.0)

    def __post_init__(self):
        u, v = np.asarray(self.u, float), np.asarray(self.v, float)
        if abs(np.linalg.norm(u) - 1) > 1e-9 or abs(np.linalg.norm(v) - 1) > 1e-9 or abs(u @ v) > 1e-9:
            raise ValueError("orbit plane basis must be orthonormal")

    @property
    def period_s(self) -> float:
        return 2 * math.pi / abs(self.angular_rate_rad_s)


def position_at(e: Ephemeris, t_s: float) -> Position:
    a = e.angular_rate_rad_s * t_s + e.phase_rad
    c, s = math.cos(a), math.sin(a)
    return Position(*(e.orbit_radius_m * (c * ui + s * vi) for ui, vi in zip(e.u, e.v)))


def earth(radius_m: float = EARTH_RADIUS_M) -> Sphere:
    return Sphere(Position(0.0, 0.0, 0.0), radius_m)


@dataclass(frozen=True)
class Interval:
    start_us: float
    end_us: float
    serving: str


@dataclass
class HandoverPlan:
    intervals: list
    switch_times_us: list = field(default_factory=list)

    def serving_at(self, t_us: float) -> Optional[str]:
        for iv in self.intervals:
            if iv.start_us <= t_us < iv.end_us:
                return iv.serving
        if self.intervals and t_us == self.intervals[-1].end_us:
            return self.intervals[-1].serving
        return None

    @property
    def handovers(self) -> int:
        return len(self.switch_times_us)


def relay_visible(tx: Position, rx: Position, relay: Position, occluders: Sequence) -> bool:
    return is_los(tx, relay, occluders) and is_los(relay, rx, occluders)


def _relay_loss(tx, rx, relay, freq_hz):
    return fspl_db(tx.distance_to(relay), freq_hz) + fspl_db(relay.distance_to(rx), freq_hz)


def _sample_times(start_us: float, end_us: float, step_us: float) -> list[float]:
    n = int(math.ceil((end_us - start_us) / step_us))
    return [start_us + k * step_us for k in range(max(n, 1))]


def _coalesce(times, choice, start_us, end_us, step_us) -> HandoverPlan:
    intervals, switches = [], []
    run_start, current = start_us, choice[0]
    for k in range(1, len(times)):
        if choice[k] != current:
            switch = times[k] - step_us / 2.0
            intervals.append(Interval(run_start, switch, current))
            switches.append(switch)
            run_start, current = switch, choice[k]
    intervals.append(Interval(run_start, end_us, current))
    return HandoverPlan(intervals, switches)


def predict_handover(tx_eph: Ephemeris, rx_eph: Ephemeris, irsn_ephs: Mapping[str, Ephemeris],
                     window: tuple[float, float], step_us: float, occluders: Sequence = (),
                     freq_hz: float = 28e9) -> HandoverPlan:
    """Look-ahead serving schedule from ephemerides.

    At each sample the unoccluded IRSN with the smallest relayed loss serves.
    A switch is placed half a step before the first sample of the new run, so
    it always precedes the sample where the previous server could lose LoS.
    """
    if step_us <= 0:
        raise ValueError("step_us must be positive")
    start, end = window
    times = _sample_times(start, end, step_us)
    ids = sorted(irsn_ephs)
    choice = []
    for t in times:
        ts = t * 1e-6
        tx, rx = position_at(tx_eph, ts), position_at(rx_eph, ts)
        best = None
        for vid in ids:
            p = position_at(irsn_ephs[vid], ts)
            if relay_visible(tx, rx, p, occluders):
                key = (_relay_loss(tx, rx, p, freq_hz), vid)
                best = key if best is None or key < best else best
        if best is None:
            raise NoCoverage(t)
        choice.append(best[1])
    return _coalesce(times, choice, start, end, step_us)


def reactive_handover(tx_eph: Ephemeris, rx_eph: Ephemeris, irsn_ephs: Mapping[str, Ephemeris],
                      window: tuple[float, float], step_us: float, occluders: Sequence = (),
                      freq_hz: float = 28e9) -> HandoverPlan:
    """Baseline without look-ahead: keep the server until a sample finds it
    occluded, then switch one step later to the best visible IRSN."""
    start, end = window
    times = _sample_times(start, end, step_us)
    ids = sorted(irsn_ephs)

    def best_at(ts):
        tx, rx = position_at(tx_eph, ts), position_at(rx_eph, ts)
        ranked = sorted((_relay_loss(tx, rx, position_at(irsn_ephs[v], ts), freq_hz), v)
                        for v in ids if relay_visible(tx, rx, position_at(irsn_ephs[v], ts), occluders))
        return ranked[0][1] if ranked else None

    current = best_at(times[0] * 1e-6) or ids[0]
    intervals, switches = [], []
    run_start = start
    pending = None
    for t in times:
        if pending is not None:
            intervals.append(Interval(run_start, t, current))
            switches.append(t)
            run_start, current, pending = t, pending, None
        ts = t * 1e-6
        tx, rx = position_at(tx_eph, ts), position_at(rx_eph, ts)
        if not relay_visible(tx, rx, position_at(irsn_ephs[current], ts), occluders):
            nxt = best_at(ts)
            if nxt is not None and nxt != current:
                pending = nxt
    intervals.append(Interval(run_start, end, current))
    return HandoverPlan(intervals, switches)


def outage_us(plan: HandoverPlan, tx_eph: Ephemeris, rx_eph: Ephemeris,
              irsn_ephs: Mapping[str, Ephemeris], window: tuple[float, float], step_us: float,
              occluders: Sequence = ()) -> float:
    """Time the plan's serving IRSN lacks two-segment LoS, sampled every *step_us*."""
    total = 0.0
    for t in _sample_times(window[0], window[1], step_us):
        ts = t * 1e-6
        serving = plan.serving_at(t)
        if serving is None or not relay_visible(position_at(tx_eph, ts), position_at(rx_eph, ts),
                                                position_at(irsn_ephs[serving], ts), occluders):
            total += step_us
    return total


class Feasibility(enum.Enum):
    ACCEPT = "accept"
    REJECT = "reject"


def feasibility_check(node: IrsnDescriptor, relative_angular_rate_rad_s: float,
                      beam_step_rad: float = 0.01) -> Feasibility:
    if abs(relative_angular_rate_rad_s) <= node.max_switch_hz * beam_step_rad:
        return Feasibility.ACCEPT
    return Feasibility.REJECT


def relative_angular_rate(observer: Ephemeris, target: Ephemeris, t_s: float, dt_s: float = 1e-3) -> float:
    """Rate at which the observer-to-target line of sight rotates (rad/s)."""
    def los(t):
        d = position_at(target, t) - position_at(observer, t)
        return d.scale(1.0 / d.norm())
    return angle_between(los(t_s - dt_s / 2), los(t_s + dt_s / 2)) / dt_s
