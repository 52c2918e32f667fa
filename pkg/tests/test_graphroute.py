import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ioirs.graphroute import (
    EARTH_RADIUS_M,
    Ephemeris,
    Feasibility,
    Kind,
    NoCoverage,
    Vertex,
    best_path,
    build_graph,
    earth,
    feasibility_check,
    outage_us,
    path_secrecy,
    position_at,
    predict_handover,
    reactive_handover,
    secrecy_path,
)
from ioirs.model import IrsnDescriptor, Position, Sphere, fspl_db, is_los

F = 28e9


def v(vid, x, y, z=0.0, kind=Kind.IRSN, gain=0.0):
    return Vertex(vid, Position(x, y, z), kind, gain)


# --- graph construction -------------------------------------------------------


def test_three_visible_entities_form_k3():
    g = build_graph([v("a", 0, 0, kind=Kind.TX), v("b", 10, 0), v("c", 0, 10, kind=Kind.RX)], [], F)
    assert set(g.edges) == {("a", "b"), ("a", "c"), ("b", "c")}
    assert g.loss("c", "b") == pytest.approx(fspl_db(math.dist((10, 0), (0, 10)), F), abs=1e-9)


def test_earth_occludes_opposite_satellites():
    r = EARTH_RADIUS_M + 500e3
    g = build_graph([v("s1", r, 0), v("s2", -r, 0)], [earth()], F)
    assert not g.edges


def test_bridging_irsn_connects_sparse_chain():
    wall = Sphere(Position(50, 0, 0), 10)
    chain = [v("s1", 0, 0, kind=Kind.TX), v("s2", 100, 0, kind=Kind.RX)]
    g = build_graph(chain, [wall], F)
    assert not g.edges and best_path(g, "s1", "s2") is None
    g = build_graph(chain + [v("r", 50, 40, gain=40)], [wall], F)
    assert set(g.edges) == {("r", "s1"), ("r", "s2")}
    assert best_path(g, "s1", "s2").vertices == ("s1", "r", "s2")


def test_single_edge_when_direct_is_cheapest():
    g = build_graph([v("a", 0, 0, kind=Kind.TX), v("b", 10, 0, kind=Kind.RX), v("m", 5, 30, gain=10)], [], F)
    res = best_path(g, "a", "b")
    assert res.vertices == ("a", "b") and res.cost_db == pytest.approx(g.loss("a", "b"))


def test_two_hop_route_cheaper_than_direct():
    g = build_graph([v("a", 0, 0, kind=Kind.TX), v("b", 100, 0, kind=Kind.RX),
                     v("m", 50, 5, gain=100), v("n", 50, -30, gain=10)], [], F)
    res = best_path(g, "a", "b")
    assert res.vertices == ("a", "m", "b")
    assert res.cost_db == pytest.approx(min(brute_costs(g, "a", "b", 3).values()), abs=1e-9)


# --- independent brute force --------------------------------------------------


def clamped_gain(g, x):
    vx = g.vertices[x]
    if vx.kind is not Kind.IRSN:
        return 0.0
    incident = [loss for (a, b), loss in g.edges.items() if x in (a, b)]
    return min([vx.gain_db] + [min(incident) - 1e-6] if incident else [vx.gain_db])


def enumerate_paths(g, src, dst, max_hops):
    irsns = sorted(k for k, vx in g.vertices.items() if vx.kind is Kind.IRSN and k not in (src, dst))
    for k in range(max_hops + 1):
        for mid in itertools.permutations(irsns, k):
            p = (src,) + mid + (dst,)
            if all(g.loss(a, b) is not None for a, b in zip(p, p[1:])):
                yield p


def brute_costs(g, src, dst, max_hops):
    out = {}
    for p in enumerate_paths(g, src, dst, max_hops):
        out[p] = sum(g.loss(a, b) for a, b in zip(p, p[1:])) - sum(clamped_gain(g, x) for x in p[1:-1])
    return out


def random_graph(rng, n_irsn, n_eve=0):
    verts = [v("tx", 0, 0, kind=Kind.TX), v("rx", rng.uniform(20, 80), rng.uniform(-10, 10), kind=Kind.RX)]
    for i in range(n_irsn):
        verts.append(v(f"n{i}", rng.uniform(-10, 90), rng.uniform(-40, 40), gain=rng.uniform(0, 80)))
    for i in range(n_eve):
        verts.append(v(f"e{i}", rng.uniform(0, 90), rng.uniform(-40, 40), kind=Kind.EAVESDROPPER))
    obstacles = [Sphere(Position(rng.uniform(0, 80), rng.uniform(-30, 30), 0), rng.uniform(2, 12))
                 for _ in range(rng.randint(0, 4))]
    obstacles = [o for o in obstacles if all(o.center.distance_to(x.position) > o.radius + 1e-6 for x in verts)]
    return build_graph(verts, obstacles, F)


@pytest.mark.parametrize("seed", range(40))
def test_best_path_matches_brute_force(seed):
    rng = random.Random(seed)
    g = random_graph(rng, rng.randint(0, 8))
    costs = brute_costs(g, "tx", "rx", 3)
    res = best_path(g, "tx", "rx", 3)
    if not costs:
        assert res is None
        return
    best = min(costs.values())
    assert res.cost_db == pytest.approx(best, abs=1e-9)
    assert res.vertices == min(p for p, c in costs.items() if c <= best + 1e-9)


@pytest.mark.parametrize("seed", range(30))
def test_secrecy_path_dominates_every_path(seed):
    rng = random.Random(1000 + seed)
    g = random_graph(rng, rng.randint(1, 6), rng.randint(1, 2))
    eves = [k for k, x in g.vertices.items() if x.kind is Kind.EAVESDROPPER]
    res = secrecy_path(g, "tx", "rx", eves, 3)
    paths = list(enumerate_paths(g, "tx", "rx", 3))
    if not paths:
        assert res is None
        return
    rates = {p: path_secrecy(g, p, eves, 30, -90) for p in paths}
    assert res.secrecy_bps_hz == pytest.approx(max(rates.values()), abs=1e-12)
    assert all(res.secrecy_bps_hz >= r - 1e-12 for r in rates.values())


def test_no_eavesdroppers_reduces_to_best_path():
    g = random_graph(random.Random(5), 6)
    bp, sp = best_path(g, "tx", "rx"), secrecy_path(g, "tx", "rx", [])
    assert sp.vertices == bp.vertices
    assert sp.secrecy_bps_hz == pytest.approx(math.log2(1 + 10 ** ((30 - bp.cost_db + 90) / 10)))


def test_eavesdropper_colocated_with_rx_zeroes_secrecy():
    verts = [v("tx", 0, 0, kind=Kind.TX), v("rx", 100, 0, kind=Kind.RX),
             v("eve", 100, 0, 0.0, kind=Kind.EAVESDROPPER), v("m", 50, 10, gain=40), v("n", 50, -20, gain=30)]
    g = build_graph(verts, [], F)
    res = secrecy_path(g, "tx", "rx", ["eve"])
    assert res.secrecy_bps_hz == 0.0
    # every path ties at zero, so the lowest-loss (max-capacity) path wins
    assert res.vertices == best_path(g, "tx", "rx").vertices


def test_eavesdropper_near_last_hop_diverts_path():
    # The cheap relay's last hop passes next to the eavesdropper; the other relay
    # points away from it, so nulling suppresses its exposure.
    verts = [v("tx", 0, 0, kind=Kind.TX), v("rx", 100, 0, kind=Kind.RX),
             v("eve", 100, 3, kind=Kind.EAVESDROPPER), v("a", 100, 50, gain=60), v("b", 50, -40, gain=55)]
    g = build_graph(verts, [Sphere(Position(50, 0, 0), 5)], F)
    res = secrecy_path(g, "tx", "rx", ["eve"])
    rates = {p: path_secrecy(g, p, ["eve"], 30, -90) for p in enumerate_paths(g, "tx", "rx", 3)}
    assert res.vertices == max(rates, key=lambda p: (rates[p], -brute_costs(g, "tx", "rx", 3)[p]))
    assert best_path(g, "tx", "rx").vertices == ("tx", "a", "rx")
    assert res.vertices == ("tx", "b", "rx") and res.secrecy_bps_hz > 0


# --- orbits -------------------------------------------------------------------


def test_position_at_reference_points():
    e = Ephemeris(7e6, 1e-3, 0.0, (0, 0, 1), (1, 0, 0))
    assert position_at(e, 0) == Position(0, 0, 7e6)
    q = position_at(e, e.period_s / 4)
    assert (q.x, q.y, q.z) == pytest.approx((7e6, 0, 0), abs=1e-6)


@given(st.floats(1e6, 5e7), st.floats(-0.1, 0.1), st.floats(-7, 7), st.floats(0, 1e5))
def test_circular_orbit_radius_invariant(r, w, phi, t):
    s = 1 / math.sqrt(2)
    p = position_at(Ephemeris(r, w, phi, (s, s, 0), (0, 0, 1)), t)
    assert p.norm() == pytest.approx(r, rel=1e-12)


def test_non_orthonormal_basis_rejected():
    with pytest.raises(ValueError):
        Ephemeris(7e6, 1e-3, 0, (1, 0, 0), (1, 0, 0))


# --- handover -----------------------------------------------------------------

RE = EARTH_RADIUS_M
OMEGA = 2 * math.pi / 100.0  # one relay revolution per 100 s
STEP = 100_000.0
WINDOW = (0.0, 200e6)


def ground(angle_deg, r=2 * RE):
    return Ephemeris(r, 0.0, math.radians(angle_deg))


def relay(phase):
    return Ephemeris(3.3 * RE, OMEGA, phase)


def visible(tx, rx, node, t_us, occ):
    ts = t_us * 1e-6
    a, b, p = position_at(tx, ts), position_at(rx, ts), position_at(node, ts)
    return is_los(a, p, occ) and is_los(p, b, occ)


def test_opposed_relays_alternate_with_zero_gap():
    tx, rx, occ = ground(-5), ground(5), [earth()]
    relays = {"r0": relay(0.0), "r1": relay(math.pi)}
    plan = predict_handover(tx, rx, relays, WINDOW, STEP, occ, F)
    assert plan.handovers >= 3
    assert {iv.serving for iv in plan.intervals} == {"r0", "r1"}
    for a, b in zip(plan.intervals, plan.intervals[1:]):
        assert a.end_us == b.start_us and a.serving != b.serving
    assert outage_us(plan, tx, rx, relays, WINDOW, STEP, occ) == 0
    # Dense oracle: the outgoing server still has LoS at the switch instant and
    # keeps it until strictly after.
    dense = STEP / 20
    for iv in plan.intervals[:-1]:
        t = iv.start_us
        while t <= iv.end_us:
            assert visible(tx, rx, relays[iv.serving], t, occ)
            t += dense
    # Every relay does lose LoS at some point, so coverage needs both.
    for node in relays.values():
        assert not all(visible(tx, rx, node, t, occ) for t in range(0, int(WINDOW[1]), int(STEP)))


def test_reactive_baseline_has_outage_where_predictive_has_none():
    tx, rx, occ = ground(-5), ground(5), [earth()]
    relays = {"r0": relay(0.0), "r1": relay(math.pi)}
    reactive = reactive_handover(tx, rx, relays, WINDOW, STEP, occ, F)
    assert outage_us(reactive, tx, rx, relays, WINDOW, STEP, occ) > 0
    assert outage_us(predict_handover(tx, rx, relays, WINDOW, STEP, occ, F),
                     tx, rx, relays, WINDOW, STEP, occ) == 0


def test_single_visible_relay_is_one_interval():
    tx, rx = ground(-5), ground(5)
    plan = predict_handover(tx, rx, {"g": Ephemeris(3.3 * RE, 0.0, 0.0)}, WINDOW, STEP, [earth()], F)
    assert len(plan.intervals) == 1 and plan.handovers == 0
    iv = plan.intervals[0]
    assert (iv.start_us, iv.end_us, iv.serving) == (*WINDOW, "g")


def test_simultaneous_occlusion_is_no_coverage():
    tx, rx, occ = ground(-5), ground(5), [earth()]
    relays = {"r0": relay(0.0), "r1": relay(0.1)}
    # oracle: some sample has neither relay visible
    gap = next(t for t in range(0, int(WINDOW[1]), int(STEP))
               if not any(visible(tx, rx, n, t, occ) for n in relays.values()))
    with pytest.raises(NoCoverage) as exc:
        predict_handover(tx, rx, relays, WINDOW, STEP, occ, F)
    assert exc.value.t_us == gap


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(0.5, 1.5), st.floats(1e6, 5e6))
def test_plan_partitions_window(phase, speed, step):
    tx, rx, occ = ground(-5), ground(5), [earth()]
    relays = {"r0": relay(phase), "r1": Ephemeris(3.3 * RE, OMEGA * speed, phase + math.pi)}
    try:
        plan = predict_handover(tx, rx, relays, WINDOW, step, occ, F)
    except NoCoverage:
        return
    assert plan.intervals[0].start_us == WINDOW[0] and plan.intervals[-1].end_us == WINDOW[1]
    for a, b in zip(plan.intervals, plan.intervals[1:]):
        assert a.end_us == b.start_us
    assert outage_us(plan, tx, rx, relays, WINDOW, step, occ) == 0


# --- feasibility --------------------------------------------------------------


def sat(hz):
    return IrsnDescriptor("::1", Position(0, 0, 0), max_switch_hz=hz)


def test_feasibility_boundary_and_linearity():
    assert feasibility_check(sat(100), 0.0) is Feasibility.ACCEPT
    assert feasibility_check(sat(100), 1.0, 0.01) is Feasibility.ACCEPT
    assert feasibility_check(sat(100), math.nextafter(1.0, 2), 0.01) is Feasibility.REJECT
    assert feasibility_check(sat(200), 2.0, 0.01) is Feasibility.ACCEPT
    assert feasibility_check(sat(200), 2.0001, 0.01) is Feasibility.REJECT


# --- graph properties ---------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_graph_is_symmetric_and_exact(seed):
    g = random_graph(random.Random(seed), 5, 1)
    ids = sorted(g.vertices)
    for a in ids:
        for b in ids:
            if a == b:
                continue
            assert g.has_edge(a, b) == g.has_edge(b, a)
            assert g.loss(a, b) == g.loss(b, a)
            if g.has_edge(a, b):
                pa, pb = g.vertices[a].position, g.vertices[b].position
                assert g.loss(a, b) == pytest.approx(fspl_db(pa.distance_to(pb), F), abs=1e-9)
