"""IoIRS control packets: adapted IPv6 base header, IRS header and payloads.

Every packet is ``IPv6 base header (40) | IRS header (4) | body``.  All
multi-byte integers are big-endian.  Fixed-point units are used throughout:
centimeters, centi-degrees, deci-dB, microseconds.
"""
from __future__ import annotations

import dataclasses
import enum
import struct
from dataclasses import dataclass, field
from ipaddress import IPv6Address
from typing import ClassVar, Union

IRS_NEXT_HEADER = 253
IRS_PROTO_VERSION = 1
IPV6_HEADER_LEN = 40
IRS_HEADER_LEN = 4
MAX_BODY_LEN = 0xFFFF - IRS_HEADER_LEN

_IPV6_FMT = "!IHBB16s16s"
_IRS_HDR_FMT = "!BBH"


class WireError(ValueError):
    """Base class for codec failures; the class name is the error name."""

    @property
    def name(self) -> str:
        return type(self).__name__


class Truncated(WireError):
    pass


class NotIpv6(WireError):
    pass


class NotIrsProtocol(WireError):
    pass


class UnknownMessageType(WireError):
    pass


class LengthMismatch(WireError):
    pass


class OversizeBody(WireError):
    pass


class Malformed(WireError):
    """A field holds a value outside its enumeration or violates an invariant."""


class Band(enum.IntEnum):
    SUB6 = 0
    MMWAVE = 1
    THZ = 2


class Modulation(enum.IntEnum):
    BPSK = 0
    QPSK = 1
    QAM16 = 2
    QAM64 = 3
    QAM256 = 4


class DenialReason(enum.IntEnum):
    NoCandidates = 0
    NoImprovement = 1
    CostOutweighsGain = 2
    EnergyBudget = 3
    MobilityInfeasible = 4


class UpdateKind(enum.IntEnum):
    ProtocolDefs = 0
    Optimizer = 1


class Mobility(enum.IntEnum):
    STATIC = 0
    MOBILE = 1


def _enum(cls, value):
    try:
        return cls(value)
    except ValueError:
        raise Malformed(f"{cls.__name__} has no code {value}") from None


def _addr(value) -> IPv6Address:
    return value if isinstance(value, IPv6Address) else IPv6Address(value)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise Truncated(f"need {size} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def one(self, fmt: str):
        return self.take(fmt)[0]

    def addr(self) -> IPv6Address:
        return IPv6Address(self.one("!16s"))

    def mac(self) -> int:
        return int.from_bytes(self.one("!6s"), "big")

    def position(self) -> tuple[int, int, int]:
        return self.take("!3i")

    def done(self) -> None:
        if self.pos != len(self.data):
            raise LengthMismatch(f"{len(self.data) - self.pos} trailing bytes in body")


def _pack(fmt: str, *values) -> bytes:
    try:
        return struct.pack(fmt, *values)
    except struct.error as exc:
        raise Malformed(str(exc)) from None


def _pack_mac(mac: int) -> bytes:
    if not 0 <= mac < 1 << 48:
        raise Malformed(f"MAC {mac:#x} exceeds 48 bits")
    return mac.to_bytes(6, "big")


def _pack_count(items) -> bytes:
    if len(items) > 0xFF:
        raise Malformed(f"list of {len(items)} records exceeds the 8-bit count")
    return bytes([len(items)])


# --- message bodies ---------------------------------------------------------


@dataclass(frozen=True)
class ServiceRequest:
    TYPE: ClassVar[int] = 0x01

    service_duration_ms: int
    target_rx_addr: IPv6Address
    modulation: Modulation = Modulation.QPSK
    mimo_rank: int = 1
    band: Band = Band.MMWAVE
    tx_power_ddbm: int = 300
    min_sinr_ddb: int = 100
    weights: tuple[int, int, int, int] = (255, 0, 0, 0)
    wpt_flag: bool = False
    localization_flag: bool = False
    error_bound_cm: int = 0

    def __post_init__(self):
        object.__setattr__(self, "target_rx_addr", _addr(self.target_rx_addr))
        object.__setattr__(self, "modulation", _enum(Modulation, self.modulation))
        object.__setattr__(self, "band", _enum(Band, self.band))
        object.__setattr__(self, "weights", tuple(self.weights))
        if len(self.weights) != 4:
            raise Malformed("weights must have four entries")
        if not any(self.weights):
            raise Malformed("at least one optimization weight must be nonzero")
        if self.localization_flag and self.error_bound_cm <= 0:
            raise Malformed("localization requests need a positive error bound")

    def encode_body(self) -> bytes:
        return _pack(
            "!I16sBBBhh4BBBH",
            self.service_duration_ms, self.target_rx_addr.packed, self.modulation,
            self.mimo_rank, self.band, self.tx_power_ddbm, self.min_sinr_ddb,
            *self.weights, int(self.wpt_flag), int(self.localization_flag),
            self.error_bound_cm,
        )

    @classmethod
    def decode_body(cls, r: _Reader) -> ServiceRequest:
        f = r.take("!I16sBBBhh4BBBH")
        wpt, loc = f[11], f[12]
        if wpt > 1 or loc > 1:
            raise Malformed("boolean flag byte must be 0 or 1")
        return cls(f[0], IPv6Address(f[1]), f[2], f[3], f[4], f[5], f[6],
                   tuple(f[7:11]), bool(wpt), bool(loc), f[13])


@dataclass(frozen=True)
class Assignment:
    irsn_addr: IPv6Address
    pattern_id: int
    activate_time_us: int

    def __post_init__(self):
        object.__setattr__(self, "irsn_addr", _addr(self.irsn_addr))


@dataclass(frozen=True)
class ServiceConfirmation:
    TYPE: ClassVar[int] = 0x02

    tx_start_time_us: int
    duration_ms: int
    assignments: tuple[Assignment, ...]

    def __post_init__(self):
        object.__setattr__(self, "assignments", tuple(self.assignments))
        if not self.assignments:
            raise Malformed("confirmation carries no assignments")
        for a in self.assignments:
            if a.activate_time_us > self.tx_start_time_us:
                raise Malformed("assignment activates after transmission start")

    def encode_body(self) -> bytes:
        out = [_pack("!QI", self.tx_start_time_us, self.duration_ms), _pack_count(self.assignments)]
        for a in self.assignments:
            out.append(_pack("!16sHQ", a.irsn_addr.packed, a.pattern_id, a.activate_time_us))
        return b"".join(out)

    @classmethod
    def decode_body(cls, r: _Reader) -> ServiceConfirmation:
        start, duration = r.take("!QI")
        items = []
        for _ in range(r.one("!B")):
            addr, pattern, at = r.take("!16sHQ")
            items.append(Assignment(IPv6Address(addr), pattern, at))
        return cls(start, duration, tuple(items))


@dataclass(frozen=True)
class ServiceDenial:
    TYPE: ClassVar[int] = 0x03

    reason: DenialReason

    def __post_init__(self):
        object.__setattr__(self, "reason", _enum(DenialReason, self.reason))

    def encode_body(self) -> bytes:
        return _pack("!B", self.reason)

    @classmethod
    def decode_body(cls, r: _Reader) -> ServiceDenial:
        return cls(r.one("!B"))


@dataclass(frozen=True)
class LocalizationQuery:
    TYPE: ClassVar[int] = 0x04

    session: int
    sweep_count: int = 1

    def __post_init__(self):
        if self.sweep_count < 1:
            raise Malformed("sweep_count must be at least 1")

    def encode_body(self) -> bytes:
        return _pack("!IB", self.session, self.sweep_count)

    @classmethod
    def decode_body(cls, r: _Reader) -> LocalizationQuery:
        return cls(*r.take("!IB"))


@dataclass(frozen=True)
class Measurement:
    irsn_addr: IPv6Address
    aoa_cdeg: int
    tof_ns: int = 0
    rssi_ddb: int = 0

    def __post_init__(self):
        object.__setattr__(self, "irsn_addr", _addr(self.irsn_addr))


@dataclass(frozen=True)
class LocalizationReport:
    TYPE: ClassVar[int] = 0x05

    session: int
    measurements: tuple[Measurement, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "measurements", tuple(self.measurements))

    def encode_body(self) -> bytes:
        out = [_pack("!I", self.session), _pack_count(self.measurements)]
        for m in self.measurements:
            out.append(_pack("!16shIh", m.irsn_addr.packed, m.aoa_cdeg, m.tof_ns, m.rssi_ddb))
        return b"".join(out)

    @classmethod
    def decode_body(cls, r: _Reader) -> LocalizationReport:
        session = r.one("!I")
        items = []
        for _ in range(r.one("!B")):
            addr, aoa, tof, rssi = r.take("!16shIh")
            items.append(Measurement(IPv6Address(addr), aoa, tof, rssi))
        return cls(session, tuple(items))


@dataclass(frozen=True)
class ScheduleEntry:
    pattern_id: int
    activate_time_us: int


@dataclass(frozen=True)
class Command:
    TYPE: ClassVar[int] = 0x06

    schedule: tuple[ScheduleEntry, ...] = ()
    relocate_flag: bool = False
    target_position_cm: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(self.schedule))
        object.__setattr__(self, "target_position_cm", tuple(self.target_position_cm))
        times = [e.activate_time_us for e in self.schedule]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise Malformed("schedule timestamps must be strictly increasing")

    def encode_body(self) -> bytes:
        out = [_pack_count(self.schedule)]
        for e in self.schedule:
            out.append(_pack("!HQ", e.pattern_id, e.activate_time_us))
        out.append(_pack("!B3i", int(self.relocate_flag), *self.target_position_cm))
        return b"".join(out)

    @classmethod
    def decode_body(cls, r: _Reader) -> Command:
        schedule = tuple(ScheduleEntry(*r.take("!HQ")) for _ in range(r.one("!B")))
        flag = r.one("!B")
        if flag > 1:
            raise Malformed("relocate_flag must be 0 or 1")
        return cls(schedule, bool(flag), r.position())


@dataclass(frozen=True)
class Status:
    TYPE: ClassVar[int] = 0x07

    availability: int
    battery_pct: int
    position_cm: tuple[int, int, int]
    active_pattern: int
    timestamp_us: int

    def __post_init__(self):
        object.__setattr__(self, "position_cm", tuple(self.position_cm))
        if not 0 <= self.battery_pct <= 100:
            raise Malformed(f"battery_pct {self.battery_pct} outside 0..100")

    def encode_body(self) -> bytes:
        return _pack("!BB3iHQ", self.availability, self.battery_pct, *self.position_cm,
                     self.active_pattern, self.timestamp_us)

    @classmethod
    def decode_body(cls, r: _Reader) -> Status:
        f = r.take("!BB3iHQ")
        return cls(f[0], f[1], f[2:5], f[5], f[6])


@dataclass(frozen=True)
class IrsnAdvertisement:
    """Wire form of an IRSN descriptor (see :mod:`ioirs.model`)."""

    TYPE: ClassVar[int] = 0x08
    _FMT: ClassVar[str] = "!16sHHIIIBHBII3iB6s"

    addr: IPv6Address
    width_cm: int
    height_cm: int
    n_elements: int
    power_idle_mw: int
    power_active_mw: int
    bands_mask: int
    n_patterns: int
    mobility: Mobility
    max_speed_cmps: int
    max_switch_hz: int
    position_cm: tuple[int, int, int]
    battery_pct: int
    mac: int

    def __post_init__(self):
        object.__setattr__(self, "addr", _addr(self.addr))
        object.__setattr__(self, "mobility", _enum(Mobility, self.mobility))
        object.__setattr__(self, "position_cm", tuple(self.position_cm))
        if self.n_elements < 1:
            raise Malformed("n_elements must be at least 1")
        if not self.bands_mask or self.bands_mask & ~0b111:
            raise Malformed(f"bands mask {self.bands_mask:#x} must be a nonempty subset of 0b111")
        if self.n_patterns < 1:
            raise Malformed("n_patterns must be at least 1")
        if self.mobility == Mobility.STATIC and self.max_speed_cmps != 0:
            raise Malformed("static IRSN advertises nonzero speed")
        if not 0 <= self.battery_pct <= 100:
            raise Malformed(f"battery_pct {self.battery_pct} outside 0..100")

    def encode_body(self) -> bytes:
        return _pack(
            "!16sHHIIIBHBII3iB", self.addr.packed, self.width_cm, self.height_cm,
            self.n_elements, self.power_idle_mw, self.power_active_mw, self.bands_mask,
            self.n_patterns, self.mobility, self.max_speed_cmps, self.max_switch_hz,
            *self.position_cm, self.battery_pct,
        ) + _pack_mac(self.mac)

    @classmethod
    def decode_body(cls, r: _Reader) -> IrsnAdvertisement:
        f = r.take("!16sHHIIIBHBII3iB")
        return cls(IPv6Address(f[0]), *f[1:11], f[11:14], f[14], r.mac())


@dataclass(frozen=True)
class IrssSolicitation:
    TYPE: ClassVar[int] = 0x09

    position_cm: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "position_cm", tuple(self.position_cm))

    def encode_body(self) -> bytes:
        return _pack("!3i", *self.position_cm)

    @classmethod
    def decode_body(cls, r: _Reader) -> IrssSolicitation:
        return cls(r.position())


@dataclass(frozen=True)
class IrssAdvertisement:
    TYPE: ClassVar[int] = 0x0A

    server_addr: IPv6Address
    proto_versions_abc: tuple[int, int, int]
    optimizer_version: int
    position_cm: tuple[int, int, int]
    mac: int

    def __post_init__(self):
        object.__setattr__(self, "server_addr", _addr(self.server_addr))
        object.__setattr__(self, "proto_versions_abc", tuple(self.proto_versions_abc))
        object.__setattr__(self, "position_cm", tuple(self.position_cm))

    def encode_body(self) -> bytes:
        return _pack("!16s3BH3i", self.server_addr.packed, *self.proto_versions_abc,
                     self.optimizer_version, *self.position_cm) + _pack_mac(self.mac)

    @classmethod
    def decode_body(cls, r: _Reader) -> IrssAdvertisement:
        f = r.take("!16s3BH3i")
        return cls(IPv6Address(f[0]), f[1:4], f[4], f[5:8], r.mac())


@dataclass(frozen=True)
class ServerUpdate:
    TYPE: ClassVar[int] = 0x0B

    update_kind: UpdateKind
    new_version: int

    def __post_init__(self):
        object.__setattr__(self, "update_kind", _enum(UpdateKind, self.update_kind))

    def encode_body(self) -> bytes:
        return _pack("!BH", self.update_kind, self.new_version)

    @classmethod
    def decode_body(cls, r: _Reader) -> ServerUpdate:
        return cls(*r.take("!BH"))


IrsMessage = Union[
    ServiceRequest, ServiceConfirmation, ServiceDenial, LocalizationQuery,
    LocalizationReport, Command, Status, IrsnAdvertisement, IrssSolicitation,
    IrssAdvertisement, ServerUpdate,
]

MESSAGE_TYPES: dict[int, type] = {
    cls.TYPE: cls
    for cls in (
        ServiceRequest, ServiceConfirmation, ServiceDenial, LocalizationQuery,
        LocalizationReport, Command, Status, IrsnAdvertisement, IrssSolicitation,
        IrssAdvertisement, ServerUpdate,
    )
}


# --- headers and framing ----------------------------------------------------


@dataclass(frozen=True)
class Ipv6Header:
    traffic_class: int = 0
    flow_label: int = 0
    payload_length: int = 0
    next_header: int = IRS_NEXT_HEADER
    hop_limit: int = 64
    source: IPv6Address = field(default=IPv6Address(0))
    destination: IPv6Address = field(default=IPv6Address(0))
    version: int = 6

    def __post_init__(self):
        object.__setattr__(self, "source", _addr(self.source))
        object.__setattr__(self, "destination", _addr(self.destination))
        if not 0 <= self.traffic_class <= 0xFF:
            raise Malformed("traffic_class is 8 bits")
        if not 0 <= self.flow_label <= 0xFFFFF:
            raise Malformed("flow_label is 20 bits")

    def encode(self) -> bytes:
        word = (self.version << 28) | (self.traffic_class << 20) | self.flow_label
        return _pack(_IPV6_FMT, word, self.payload_length, self.next_header,
                     self.hop_limit, self.source.packed, self.destination.packed)

    @classmethod
    def decode(cls, data: bytes) -> Ipv6Header:
        if len(data) < IPV6_HEADER_LEN:
            raise Truncated(f"IPv6 header needs {IPV6_HEADER_LEN} bytes, have {len(data)}")
        word, plen, nxt, hlim, src, dst = struct.unpack_from(_IPV6_FMT, data)
        version = word >> 28
        if version != 6:
            raise NotIpv6(f"version nibble is {version}")
        return cls((word >> 20) & 0xFF, word & 0xFFFFF, plen, nxt, hlim,
                   IPv6Address(src), IPv6Address(dst), version)


def frame_body(message_type: int, body: bytes) -> bytes:
    """Prefix *body* with the 4-byte IRS header."""
    if len(body) > MAX_BODY_LEN:
        raise OversizeBody(f"body of {len(body)} bytes exceeds {MAX_BODY_LEN}")
    return struct.pack(_IRS_HDR_FMT, IRS_PROTO_VERSION, message_type, len(body)) + body


def encode_irs(msg: IrsMessage) -> bytes:
    """Encode the self-delimiting IRS packet (header + body) for *msg*."""
    return frame_body(msg.TYPE, msg.encode_body())


def decode_irs(data: bytes) -> IrsMessage:
    """Decode an IRS packet that occupies exactly *data*."""
    if len(data) < IRS_HEADER_LEN:
        raise Truncated(f"IRS header needs {IRS_HEADER_LEN} bytes, have {len(data)}")
    proto, mtype, body_len = struct.unpack_from(_IRS_HDR_FMT, data)
    if proto != IRS_PROTO_VERSION:
        raise Malformed(f"unsupported IRS protocol version {proto}")
    if IRS_HEADER_LEN + body_len > len(data):
        raise Truncated(f"body declares {body_len} bytes, have {len(data) - IRS_HEADER_LEN}")
    if IRS_HEADER_LEN + body_len < len(data):
        raise LengthMismatch("bytes follow the declared IRS body")
    cls = MESSAGE_TYPES.get(mtype)
    if cls is None:
        raise UnknownMessageType(f"message type {mtype:#04x}")
    reader = _Reader(data[IRS_HEADER_LEN:])
    msg = cls.decode_body(reader)
    reader.done()
    return msg


def encode_packet(header: Ipv6Header, msg: IrsMessage) -> bytes:
    """Serialize *header* and *msg*; ``payload_length`` is recomputed."""
    if header.next_header != IRS_NEXT_HEADER:
        raise NotIrsProtocol(f"next_header must be {IRS_NEXT_HEADER}, got {header.next_header}")
    irs = encode_irs(msg)
    header = dataclasses.replace(header, payload_length=len(irs))
    return header.encode() + irs


def decode_packet(data: bytes) -> tuple[Ipv6Header, IrsMessage]:
    data = bytes(data)
    header = Ipv6Header.decode(data)
    if header.next_header != IRS_NEXT_HEADER:
        raise NotIrsProtocol(f"next_header is {header.next_header}")
    available = len(data) - IPV6_HEADER_LEN
    if header.payload_length > available:
        raise Truncated(f"payload_length {header.payload_length} but only {available} bytes follow")
    if header.payload_length < available:
        raise LengthMismatch(f"payload_length {header.payload_length} but {available} bytes follow")
    if available < IRS_HEADER_LEN:
        raise Truncated("payload shorter than the IRS header")
    body_len = struct.unpack_from("!H", data, IPV6_HEADER_LEN + 2)[0]
    if header.payload_length != IRS_HEADER_LEN + body_len:
        raise LengthMismatch(
            f"payload_length {header.payload_length} != {IRS_HEADER_LEN} + body_length {body_len}")
    return header, decode_irs(data[IPV6_HEADER_LEN:])


# --- rendering --------------------------------------------------------------


def _render(value) -> str:
    if isinstance(value, enum.IntEnum):
        return value.name
    if isinstance(value, IPv6Address):
        return str(value)
    if dataclasses.is_dataclass(value):
        inner = " ".join(f"{f.name}={_render(getattr(value, f.name))}" for f in dataclasses.fields(value))
        return "{" + inner + "}"
    if isinstance(value, tuple) and value and dataclasses.is_dataclass(value[0]):
        return "[" + ", ".join(_render(v) for v in value) + "]"
    if isinstance(value, tuple):
        return "(" + ",".join(_render(v) for v in value) + ")"
    return str(value)


def describe(msg: IrsMessage) -> str:
    """One-line rendering: message name followed by ``field=value`` pairs."""
    parts = [type(msg).__name__]
    for f in dataclasses.fields(msg):
        value = getattr(msg, f.name)
        if f.name == "mac":
            value = ":".join(f"{b:02x}" for b in value.to_bytes(6, "big"))
        parts.append(f"{f.name}={_render(value)}")
    return " ".join(parts)


def describe_header(h: Ipv6Header) -> str:
    return (f"IPv6 version={h.version} traffic_class={h.traffic_class} flow_label={h.flow_label} "
            f"payload_length={h.payload_length} next_header={h.next_header} hop_limit={h.hop_limit} "
            f"source={h.source} destination={h.destination}")
