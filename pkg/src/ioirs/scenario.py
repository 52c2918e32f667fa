"""Declarative simulation input: JSON scenario files and their validation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from ipaddress import IPv6Address
from pathlib import Path
from typing import Any, Optional

import jsonschema

from .graphroute import Ephemeris
from .model import Box, Position, Sphere
from .wire import Band, Modulation

KINDS = ("tx", "rx", "irss", "irsn", "server", "router", "eavesdropper")
_BAND_NAMES = {"sub6": Band.SUB6, "sub-6": Band.SUB6, "mmwave": Band.MMWAVE, "thz": Band.THZ}
# Wire positions are signed 32-bit centimeters.
_MAX_COORD_M = (2**31 - 1) / 100.0


class InvalidScenario(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path or "<root>"
        self.message = message
        super().__init__(f"{self.path}: {message}")


_vec3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_num = {"type": "number"}
_int = {"type": "integer"}

_EPHEMERIS = {
    "type": "object",
    "additionalProperties": False,
    "required": ["orbit_radius_m", "angular_rate_rad_s"],
    "properties": {
        "orbit_radius_m": {"type": "number", "exclusiveMinimum": 0},
        "angular_rate_rad_s": _num,
        "phase_rad": _num,
        "u": _vec3,
        "v": _vec3,
    },
}

_ENTITY = {
    "type": "object",
    "additionalProperties": False,
    "required": ["id", "kind"],
    "properties": {
        "id": {"type": "string", "pattern": r"^[A-Za-z0-9_.:-]+$"},
        "kind": {"enum": list(KINDS)},
        "addr": {"type": "string"},
        "position": _vec3,
        "ephemeris": _EPHEMERIS,
        # tx
        "sinr_threshold_db": _num,
        # irss
        "server": {"type": "string"},
        "proto_versions": {"type": "array", "items": {"type": "integer", "minimum": 1},
                           "minItems": 3, "maxItems": 3},
        "optimizer_version": {"type": "integer", "minimum": 1},
        "mac": {"type": "integer", "minimum": 0, "maximum": 2**48 - 1},
        # irsn
        "bands": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "n_elements": {"type": "integer", "minimum": 1},
        "width_m": {"type": "number", "minimum": 0},
        "height_m": {"type": "number", "minimum": 0},
        "power_idle_mw": {"type": "number", "minimum": 0},
        "power_active_mw": {"type": "number", "minimum": 0},
        "n_patterns": {"type": "integer", "minimum": 1},
        "mobility": {"enum": ["static", "mobile"]},
        "max_speed_mps": {"type": "number", "minimum": 0},
        "max_switch_hz": {"type": "number", "minimum": 0},
        "battery_pct": {"type": "integer", "minimum": 0, "maximum": 100},
        "parent": {"type": "string"},
        "silence_at_us": {"type": "number", "minimum": 0},
        # server
        "updates": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["at_us", "kind", "version"],
                "properties": {
                    "at_us": {"type": "number", "minimum": 0},
                    "kind": {"enum": ["protocol_defs", "optimizer"]},
                    "version": {"type": "integer", "minimum": 1},
                },
            },
        },
    },
}

_OBSTACLE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "sphere": {
            "type": "object", "additionalProperties": False, "required": ["center", "radius"],
            "properties": {"center": _vec3, "radius": {"type": "number", "exclusiveMinimum": 0}},
        },
        "box": {
            "type": "object", "additionalProperties": False, "required": ["min", "max"],
            "properties": {"min": _vec3, "max": _vec3},
        },
    },
    "minProperties": 1,
    "maxProperties": 1,
}

_FLOW = {
    "type": "object",
    "additionalProperties": False,
    "required": ["tx", "rx"],
    "properties": {
        "tx": {"type": "string"},
        "rx": {"type": "string"},
        "start_us": {"type": "number", "minimum": 0},
        "traffic_class": {"type": "integer", "minimum": 0, "maximum": 255},
        "flow_label": {"type": "integer", "minimum": 0, "maximum": 0xFFFFF},
        "duration_ms": {"type": "integer", "minimum": 1, "maximum": 2**32 - 1},
        "band": {"type": "string"},
        "weights": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": 255},
                    "minItems": 4, "maxItems": 4},
        "min_sinr_db": _num,
        "tx_power_dbm": _num,
        "modulation": {"enum": [m.name for m in Modulation]},
        "mimo_rank": {"type": "integer", "minimum": 1, "maximum": 255},
        "wpt": {"type": "boolean"},
        "localization": {"type": "boolean"},
        "error_bound_cm": {"type": "integer", "minimum": 1, "maximum": 65535},
    },
}

_ROUTE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["at", "dst", "via"],
    "properties": {"at": {"type": "string"}, "dst": {"type": "string"}, "via": {"type": "string"}},
}

_INJECT = {
    "type": "object",
    "additionalProperties": False,
    "required": ["at_us", "from", "to", "message"],
    "properties": {
        "at_us": {"type": "number", "minimum": 0},
        "from": {"type": "string"},
        "to": {"type": "string"},
        "hop_limit": {"type": "integer", "minimum": 0, "maximum": 255},
        "message": {"enum": ["ServerUpdate", "IrssSolicitation"]},
    },
}


@dataclass
class SimConfig:
    seed: int = 0
    until_us: float = 60_000_000
    frequency_hz: float = 28e9
    noise_dbm: float = -90.0
    k_max: int = 3
    min_gain_threshold: float = 0.0
    min_battery_pct: float = 5.0
    battery_capacity_mwh: float = 50_000.0
    relocation_deadline_s: float = 10.0
    relocation_search_m: float = 0.0
    grid_step_m: float = 1.0
    null_depth_db: float = 20.0
    beam_step_rad: float = 0.01
    gain_offset_db: float = 0.0
    guard_us: int = 1000
    prep_us: int = 1000
    proc_delay_us: float = 100.0
    link_delay_us: float = 0.0
    hop_limit: int = 64
    heartbeat_us: float = 10_000_000
    timeout_us: float = 30_000_000
    tick_us: float = 1_000_000
    measure_period_us: float = 100_000
    discovery_window_us: float = 5_000
    discovery_range_m: float = math.inf
    retry_backoff_us: float = 5_000_000
    max_anchors: int = 8
    aoa_sigma_deg: float = 0.0
    tof_sigma_ns: float = 0.0
    measurement_noise_db: float = 0.0
    handover: str = "none"
    handover_step_us: float = 1_000_000
    earth_occluder_m: float = 0.0
    routes: list = field(default_factory=list)
    inject: list = field(default_factory=list)


_CONFIG_TYPES = {
    "handover": {"enum": ["none", "predictive", "reactive"]},
    "routes": {"type": "array", "items": _ROUTE},
    "inject": {"type": "array", "items": _INJECT},
    "seed": {"type": "integer", "minimum": 0},
    "k_max": {"type": "integer", "minimum": 1},
    "hop_limit": {"type": "integer", "minimum": 0, "maximum": 255},
    "max_anchors": {"type": "integer", "minimum": 2},
    "guard_us": {"type": "integer", "minimum": 0},
    "prep_us": {"type": "integer", "minimum": 0},
}

_POSITIVE = {"until_us", "frequency_hz", "heartbeat_us", "timeout_us", "tick_us",
             "measure_period_us", "discovery_window_us", "handover_step_us", "grid_step_m",
             "battery_capacity_mwh", "discovery_range_m"}

_CONFIG = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        f.name: _CONFIG_TYPES.get(
            f.name, {"type": "number", "exclusiveMinimum": 0} if f.name in _POSITIVE else _num)
        for f in fields(SimConfig)
    },
}

SCENARIO_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["entities"],
    "properties": {
        "entities": {"type": "array", "items": _ENTITY},
        "obstacles": {"type": "array", "items": _OBSTACLE},
        "flows": {"type": "array", "items": _FLOW},
        "config": _CONFIG,
    },
}


@dataclass
class EntitySpec:
    id: str
    kind: str
    addr: Optional[IPv6Address]
    position: Optional[Position]
    ephemeris: Optional[Ephemeris]
    params: dict

    def get(self, key, default=None):
        return self.params.get(key, default)


@dataclass
class FlowSpec:
    tx: str
    rx: str
    start_us: float = 0.0
    traffic_class: int = 0
    flow_label: int = 1
    duration_ms: int = 10_000
    band: Band = Band.MMWAVE
    weights: tuple = (255, 0, 0, 0)
    min_sinr_db: float = 10.0
    tx_power_dbm: float = 30.0
    modulation: Modulation = Modulation.QPSK
    mimo_rank: int = 1
    wpt: bool = False
    localization: bool = False
    error_bound_cm: int = 50

    @property
    def key(self) -> str:
        return f"{self.tx}/{self.flow_label}"


@dataclass
class Scenario:
    entities: list
    obstacles: list
    flows: list
    config: SimConfig

    def entity(self, eid: str) -> EntitySpec:
        for e in self.entities:
            if e.id == eid:
                return e
        raise KeyError(eid)

    def of_kind(self, kind: str) -> list:
        return [e for e in self.entities if e.kind == kind]

    @classmethod
    def from_dict(cls, doc: Any) -> Scenario:
        return _parse(doc)

    @classmethod
    def load(cls, path) -> Scenario:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidScenario("<file>", f"not valid JSON: {exc}") from None
        return _parse(doc)


def _path(parts) -> str:
    return "/".join(str(p) for p in parts)


def parse_band(name: str, where: str) -> Band:
    try:
        return _BAND_NAMES[name.lower()]
    except KeyError:
        raise InvalidScenario(where, f"unknown band {name!r}") from None


def _parse(doc: Any) -> Scenario:
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        err = errors[0]
        raise InvalidScenario(_path(err.absolute_path), err.message)

    entities, ids, addrs = [], set(), set()
    for i, raw in enumerate(doc["entities"]):
        where = f"entities/{i}"
        if raw["id"] in ids:
            raise InvalidScenario(f"{where}/id", f"duplicate id {raw['id']!r}")
        ids.add(raw["id"])
        addr = None
        if "addr" in raw:
            try:
                addr = IPv6Address(raw["addr"])
            except ValueError:
                raise InvalidScenario(f"{where}/addr", f"not an IPv6 address: {raw['addr']!r}") from None
            if addr in addrs:
                raise InvalidScenario(f"{where}/addr", f"duplicate address {addr}")
            addrs.add(addr)
        elif raw["kind"] != "eavesdropper":
            raise InvalidScenario(f"{where}/addr", "'addr' is a required property")
        if ("position" in raw) == ("ephemeris" in raw):
            raise InvalidScenario(where, "exactly one of 'position' or 'ephemeris' is required")
        position = ephemeris = None
        if "position" in raw:
            position = Position(*raw["position"])
            if max(abs(c) for c in position) > _MAX_COORD_M:
                raise InvalidScenario(f"{where}/position", "coordinate exceeds the 32-bit cm range")
        else:
            try:
                ephemeris = Ephemeris(**raw["ephemeris"])
            except ValueError as exc:
                raise InvalidScenario(f"{where}/ephemeris", str(exc)) from None
            if ephemeris.orbit_radius_m > _MAX_COORD_M:
                raise InvalidScenario(f"{where}/ephemeris/orbit_radius_m",
                                      "orbit exceeds the 32-bit cm position range")
        params = {k: v for k, v in raw.items() if k not in ("id", "kind", "addr", "position", "ephemeris")}
        if raw["kind"] == "irsn":
            params["bands"] = [parse_band(b, f"{where}/bands") for b in params.get("bands", ["mmwave"])]
            if params.get("mobility", "static") == "static" and params.get("max_speed_mps", 0):
                raise InvalidScenario(f"{where}/max_speed_mps", "static IRSN with nonzero speed")
        entities.append(EntitySpec(raw["id"], raw["kind"], addr, position, ephemeris, params))

    by_id = {e.id: e for e in entities}

    def ref(where, eid, kinds):
        e = by_id.get(eid)
        if e is None:
            raise InvalidScenario(where, f"unknown entity {eid!r}")
        if e.kind not in kinds:
            raise InvalidScenario(where, f"{eid!r} is a {e.kind}, expected {'/'.join(kinds)}")
        return e

    for i, e in enumerate(entities):
        if e.kind == "irsn" and "parent" in e.params:
            ref(f"entities/{i}/parent", e.params["parent"], ("irss",))
        if e.kind == "irss" and "server" in e.params:
            ref(f"entities/{i}/server", e.params["server"], ("server",))

    obstacles = []
    for raw in doc.get("obstacles", []):
        if "sphere" in raw:
            obstacles.append(Sphere(Position(*raw["sphere"]["center"]), raw["sphere"]["radius"]))
        else:
            lo, hi = Position(*raw["box"]["min"]), Position(*raw["box"]["max"])
            if not all(a < b for a, b in zip(lo, hi)):
                raise InvalidScenario("obstacles", "box min must be below max on every axis")
            obstacles.append(Box(lo, hi))

    flows, keys = [], set()
    for i, raw in enumerate(doc.get("flows", [])):
        where = f"flows/{i}"
        ref(f"{where}/tx", raw["tx"], ("tx",))
        ref(f"{where}/rx", raw["rx"], ("rx", "tx"))
        kw = dict(raw)
        if "band" in kw:
            kw["band"] = parse_band(kw["band"], f"{where}/band")
        if "modulation" in kw:
            kw["modulation"] = Modulation[kw["modulation"]]
        if "weights" in kw:
            if not any(kw["weights"]):
                raise InvalidScenario(f"{where}/weights", "at least one weight must be nonzero")
            kw["weights"] = tuple(kw["weights"])
        flow = FlowSpec(**kw)
        if flow.key in keys:
            raise InvalidScenario(f"{where}/flow_label", f"duplicate flow label for {flow.tx}")
        keys.add(flow.key)
        flows.append(flow)

    config = SimConfig(**doc.get("config", {}))
    for i, r in enumerate(config.routes):
        for k in ("at", "dst", "via"):
            ref(f"config/routes/{i}/{k}", r[k], KINDS)
    for i, r in enumerate(config.inject):
        ref(f"config/inject/{i}/from", r["from"], KINDS)
        ref(f"config/inject/{i}/to", r["to"], KINDS)
    return Scenario(entities, obstacles, flows, config)
