"""``ioirs`` command line: run scenarios, decode packets, export graphs."""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .graphroute import Kind, Vertex, build_graph, irsn_vertex
from .model import IrsnDescriptor
from .scenario import InvalidScenario, Scenario
from .sim import World, metrics_csv, trace_jsonl
from .wire import WireError, decode_packet, describe, describe_header


def _cmd_run(args) -> int:
    try:
        scenario = Scenario.load(args.file)
    except OSError as exc:
        print(f"error: cannot read {args.file}: {exc.strerror}", file=sys.stderr)
        return 2
    except InvalidScenario as exc:
        print(f"InvalidScenario: {exc}", file=sys.stderr)
        return 2
    world = World(scenario, seed=args.seed, until_us=args.until_us)
    trace, metrics = world.run()
    out = Path(args.out or os.environ.get("IOIRS_OUT") or ".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.jsonl").write_text(trace_jsonl(trace))
    (out / "metrics.csv").write_text(metrics_csv(metrics))
    print(f"{len(trace)} trace records, {len(metrics)} flows -> {out}")
    return 0


def _cmd_decode(args) -> int:
    text = "".join(args.hex.split())
    if len(text) % 2:
        print("BadHex: odd number of hex digits", file=sys.stderr)
        return 1
    try:
        data = bytes.fromhex(text)
    except ValueError:
        print("BadHex: non-hex characters", file=sys.stderr)
        return 1
    try:
        header, msg = decode_packet(data)
    except WireError as exc:
        print(f"{exc.name}: {exc}", file=sys.stderr)
        return 1
    print(describe_header(header))
    print(describe(msg))
    return 0


_KINDS = {"tx": Kind.TX, "rx": Kind.RX, "eavesdropper": Kind.EAVESDROPPER}


def graph_at(scenario: Scenario, t_us: float):
    """Connectivity graph of every radio entity at ``t_us``."""
    world = World(scenario, until_us=0)
    cfg = scenario.config
    vertices = []
    for e in scenario.entities:
        pos = world.position_of(e.id, t_us)
        if e.kind == "irsn":
            d: IrsnDescriptor = world.actors[e.id].state.descriptor.moved_to(pos)
            vertices.append(irsn_vertex(d, e.id, cfg.gain_offset_db))
        elif e.kind in _KINDS:
            vertices.append(Vertex(e.id, pos, _KINDS[e.kind]))
    return build_graph(vertices, world.occluders, cfg.frequency_hz, t_us)


def _cmd_graph(args) -> int:
    try:
        scenario = Scenario.load(args.file)
    except OSError as exc:
        print(f"error: cannot read {args.file}: {exc.strerror}", file=sys.stderr)
        return 2
    except InvalidScenario as exc:
        print(f"InvalidScenario: {exc}", file=sys.stderr)
        return 2
    for line in graph_at(scenario, args.at_us).export_lines():
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ioirs", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a scenario file")
    p.add_argument("file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory (default: $IOIRS_OUT or .)")
    p.add_argument("--until-us", type=float, default=None)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("decode", help="decode a hex IPv6 packet")
    p.add_argument("hex")
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("graph", help="export the connectivity graph")
    p.add_argument("file")
    p.add_argument("--at-us", type=float, required=True)
    p.set_defaults(func=_cmd_graph)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
