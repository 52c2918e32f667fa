"""Geometry, entity descriptors and the free-space link-budget model."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from ipaddress import IPv6Address
from typing import Optional, Sequence, Union

from .wire import Band, IrsnAdvertisement, IrssAdvertisement, Mobility

SPEED_OF_LIGHT = 299_792_458.0
_FSPL_CONST_DB = 20.0 * math.log10(4.0 * math.pi / SPEED_OF_LIGHT)

BAND_FREQUENCY_HZ = {Band.SUB6: 3.5e9, Band.MMWAVE: 28e9, Band.THZ: 300e9}


class ModelError(ValueError):
    pass


class DegenerateSegment(ModelError):
    pass


class NonPositiveInput(ModelError):
    pass


@dataclass(frozen=True)
class Position:
    x: float
    y: float
    z: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ModelError(f"non-finite position {self}")

    def __iter__(self):
        return iter((self.x, self.y, self.z))

    def __add__(self, other: Position) -> Position:
        return Position(self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other: Position) -> Position:
        return Position(self.x - other.x, self.y - other.y, self.z - other.z)

    def scale(self, k: float) -> Position:
        return Position(self.x * k, self.y * k, self.z * k)

    def dot(self, other: Position) -> float:
        return self.x * other.x + self.y * other.y + self.z * other.z

    def norm(self) -> float:
        return math.sqrt(self.dot(self))

    def distance_to(self, other: Position) -> float:
        return math.dist(tuple(self), tuple(other))

    def to_cm(self) -> tuple[int, int, int]:
        return tuple(int(round(c * 100)) for c in self)

    @classmethod
    def from_cm(cls, cm: Sequence[int]) -> Position:
        return cls(cm[0] / 100.0, cm[1] / 100.0, cm[2] / 100.0)

    @classmethod
    def of(cls, value) -> Position:
        if isinstance(value, Position):
            return value
        return cls(*(float(v) for v in value))


@dataclass(frozen=True)
class Sphere:
    center: Position
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ModelError("sphere radius must be positive")

    def blocks(self, a: Position, b: Position) -> bool:
        # Closest point of the closed segment strictly inside the ball.
        d = b - a
        t = (self.center - a).dot(d) / d.dot(d)
        t = min(1.0, max(0.0, t))
        closest = a + d.scale(t)
        return closest.distance_to(self.center) < self.radius


@dataclass(frozen=True)
class Box:
    lo: Position
    hi: Position

    def __post_init__(self):
        if not all(l < h for l, h in zip(self.lo, self.hi)):
            raise ModelError("box min must be below max on every axis")

    def blocks(self, a: Position, b: Position) -> bool:
        # Open segment against the open box: face contact is clear.
        t_lo, t_hi = 0.0, 1.0
        for p, q, lo, hi in zip(a, b, self.lo, self.hi):
            d = q - p
            if d == 0.0:
                if not lo < p < hi:
                    return False
                continue
            t1, t2 = (lo - p) / d, (hi - p) / d
            if t1 > t2:
                t1, t2 = t2, t1
            t_lo, t_hi = max(t_lo, t1), min(t_hi, t2)
            if t_lo >= t_hi:
                return False
        return t_lo < t_hi


Obstacle = Union[Sphere, Box]


@dataclass(frozen=True)
class IrsnDescriptor:
    addr: IPv6Address
    position: Position
    bands: frozenset = frozenset({Band.MMWAVE})
    n_elements: int = 100
    width_m: float = 1.0
    height_m: float = 1.0
    power_idle_mw: float = 50.0
    power_active_mw: float = 500.0
    n_patterns: int = 64
    mobility: Mobility = Mobility.STATIC
    max_speed_mps: float = 0.0
    max_switch_hz: float = 1000.0
    battery_pct: int = 100
    mac: int = 0

    def __post_init__(self):
        object.__setattr__(self, "addr", IPv6Address(self.addr))
        object.__setattr__(self, "position", Position.of(self.position))
        object.__setattr__(self, "bands", frozenset(Band(b) for b in self.bands))
        object.__setattr__(self, "mobility", Mobility(self.mobility))
        if self.n_elements < 1:
            raise ModelError("n_elements must be at least 1")
        if not self.bands:
            raise ModelError("an IRSN must support at least one band")
        if self.mobility == Mobility.STATIC and self.max_speed_mps != 0:
            raise ModelError("static IRSN with nonzero speed")
        if not 0 <= self.battery_pct <= 100:
            raise ModelError("battery_pct outside 0..100")

    @property
    def is_mobile(self) -> bool:
        return self.mobility == Mobility.MOBILE and self.max_speed_mps > 0

    def moved_to(self, position: Position) -> IrsnDescriptor:
        return replace(self, position=position)

    def to_advertisement(self) -> IrsnAdvertisement:
        mask = 0
        for b in self.bands:
            mask |= 1 << int(b)
        return IrsnAdvertisement(
            addr=self.addr,
            width_cm=int(round(self.width_m * 100)),
            height_cm=int(round(self.height_m * 100)),
            n_elements=self.n_elements,
            power_idle_mw=int(round(self.power_idle_mw)),
            power_active_mw=int(round(self.power_active_mw)),
            bands_mask=mask,
            n_patterns=self.n_patterns,
            mobility=self.mobility,
            max_speed_cmps=int(round(self.max_speed_mps * 100)),
            max_switch_hz=int(round(self.max_switch_hz)),
            position_cm=self.position.to_cm(),
            battery_pct=int(self.battery_pct),
            mac=self.mac,
        )

    @classmethod
    def from_advertisement(cls, adv: IrsnAdvertisement) -> IrsnDescriptor:
        return cls(
            addr=adv.addr,
            position=Position.from_cm(adv.position_cm),
            bands=frozenset(b for b in Band if adv.bands_mask & (1 << int(b))),
            n_elements=adv.n_elements,
            width_m=adv.width_cm / 100.0,
            height_m=adv.height_cm / 100.0,
            power_idle_mw=float(adv.power_idle_mw),
            power_active_mw=float(adv.power_active_mw),
            n_patterns=adv.n_patterns,
            mobility=adv.mobility,
            max_speed_mps=adv.max_speed_cmps / 100.0,
            max_switch_hz=float(adv.max_switch_hz),
            battery_pct=adv.battery_pct,
            mac=adv.mac,
        )


@dataclass(frozen=True)
class IrssDescriptor:
    addr: IPv6Address
    server_addr: IPv6Address
    position: Position
    proto_versions_abc: tuple[int, int, int] = (1, 1, 1)
    optimizer_version: int = 1
    mac: int = 0

    def __post_init__(self):
        object.__setattr__(self, "addr", IPv6Address(self.addr))
        object.__setattr__(self, "server_addr", IPv6Address(self.server_addr))
        object.__setattr__(self, "position", Position.of(self.position))
        if min(self.proto_versions_abc) < 1 or self.optimizer_version < 1:
            raise ModelError("versions start at 1")

    def to_advertisement(self) -> IrssAdvertisement:
        return IrssAdvertisement(self.server_addr, self.proto_versions_abc, self.optimizer_version,
                                 self.position.to_cm(), self.mac)


# --- propagation ------------------------------------------------------------


def is_los(a: Position, b: Position, obstacles: Sequence[Obstacle] = ()) -> bool:
    """True iff the open segment ``a``-``b`` crosses no obstacle interior."""
    if a == b:
        raise DegenerateSegment(f"segment endpoints coincide at {a}")
    return not any(ob.blocks(a, b) for ob in obstacles)


def fspl_db(distance_m: float, frequency_hz: float) -> float:
    if distance_m <= 0 or frequency_hz <= 0:
        raise NonPositiveInput("distance and frequency must be positive")
    return 20.0 * math.log10(distance_m) + 20.0 * math.log10(frequency_hz) + _FSPL_CONST_DB


def array_gain_db(n_elements: int, offset_db: float = 0.0) -> float:
    if n_elements < 1:
        raise ModelError("n_elements must be at least 1")
    return 20.0 * math.log10(n_elements) + offset_db


def sinr_db(tx_power_dbm: float, total_loss_db: float, noise_dbm: float,
            interference_dbm: Optional[float] = None) -> float:
    if total_loss_db == math.inf:
        return -math.inf
    received = tx_power_dbm - total_loss_db
    if interference_dbm is None:
        return received - noise_dbm
    floor = 10.0 ** (noise_dbm / 10.0) + 10.0 ** (interference_dbm / 10.0)
    return received - 10.0 * math.log10(floor)


def capacity_bps_hz(sinr: float) -> float:
    if sinr == -math.inf:
        return 0.0
    return math.log2(1.0 + 10.0 ** (sinr / 10.0))


@dataclass(frozen=True)
class Segment:
    start: Position
    end: Position
    loss_db: float
    clear: bool


@dataclass(frozen=True)
class LinkBudget:
    hops: tuple[Segment, ...]
    total_loss_db: float
    array_gain_db: float
    sinr_db: float
    blocked: bool

    @property
    def path_length_m(self) -> float:
        return sum(s.start.distance_to(s.end) for s in self.hops)


def link_budget(tx: Position, rx: Position, chain: Sequence[IrsnDescriptor], freq_hz: float,
                tx_power_dbm: float, noise_dbm: float, obstacles: Sequence[Obstacle] = (),
                gain_offset_db: float = 0.0,
                interference_dbm: Optional[float] = None) -> LinkBudget:
    """Friis loss along ``tx -> chain... -> rx`` with full array gain per node."""
    points = [Position.of(tx)] + [n.position for n in chain] + [Position.of(rx)]
    hops = []
    for a, b in zip(points, points[1:]):
        clear = is_los(a, b, obstacles)
        hops.append(Segment(a, b, fspl_db(a.distance_to(b), freq_hz), clear))
    gain = sum(array_gain_db(n.n_elements, gain_offset_db) for n in chain)
    blocked = not all(h.clear for h in hops)
    if blocked:
        total = math.inf
    else:
        total = sum(h.loss_db for h in hops) - gain
    return LinkBudget(tuple(hops), total, gain,
                      sinr_db(tx_power_dbm, total, noise_dbm, interference_dbm), blocked)


def angle_between(u: Position, v: Position) -> float:
    nu, nv = u.norm(), v.norm()
    if nu == 0 or nv == 0:
        return 0.0
    return math.acos(max(-1.0, min(1.0, u.dot(v) / (nu * nv))))


def eavesdropper_sinr_db(budget: LinkBudget, eve: Position, freq_hz: float, tx_power_dbm: float,
                         noise_dbm: float, obstacles: Sequence[Obstacle] = (),
                         null_depth_db: float = 20.0, min_null_separation_rad: float = 0.01) -> float:
    """SINR at an eavesdropper exposed to the final hop of *budget*.

    The eavesdropper sees everything up to the last radiating point, then a
    free-space hop toward itself.  With a nonempty chain the reflected beam is
    nulled by ``null_depth_db`` unless the eavesdropper sits within
    ``min_null_separation_rad`` of the receiver direction.
    """
    if budget.blocked:
        return -math.inf
    last = budget.hops[-1]
    if last.start == eve:
        return math.inf
    if not is_los(last.start, eve, obstacles):
        return -math.inf
    gain = budget.array_gain_db
    if len(budget.hops) > 1:
        sep = angle_between(last.end - last.start, eve - last.start)
        if sep >= min_null_separation_rad:
            gain -= null_depth_db
    prior = sum(h.loss_db for h in budget.hops[:-1])
    loss = prior + fspl_db(last.start.distance_to(eve), freq_hz) - gain
    return sinr_db(tx_power_dbm, loss, noise_dbm)
