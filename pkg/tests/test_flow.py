import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from conewave import corpus, flow
from conewave.flow import (AT_CONE, DIFFRACTIVE, ESCAPED, GEOMETRIC, HORIZON, ConeHit, DiffractiveFan, EscapeSphere,
                           GeometricBranch, Policy, RayState, continuations, link_distance, relates, step, trace)
from conewave.surface import double_exterior


def test_continuations_three_pi():
    assert continuations(3 * math.pi, 0.0, GeometricBranch) == pytest.approx([math.pi, 2 * math.pi])


def test_continuations_four_pi():
    assert sorted(continuations(4 * math.pi, 0.3, GeometricBranch)) == pytest.approx([0.3 + math.pi, 0.3 + 3 * math.pi])


def test_continuations_small_cone_is_empty():
    assert continuations(1.5 * math.pi, 0.0, GeometricBranch) == []
    assert oracles.arc_scan(1.5 * math.pi, 0.0) == []


def test_continuations_flat_point_single():
    assert continuations(2 * math.pi, 0.0, GeometricBranch) == pytest.approx([math.pi])


@settings(max_examples=40, deadline=None)
@given(theta=st.floats(0.5, 6 * math.pi), frac=st.floats(0.0, 0.999))
def test_continuations_agree_with_arc_scan(theta, frac):
    if abs(theta - 2 * math.pi) < 1e-3:
        return  # tangential case, covered separately
    link_in = frac * theta
    got = sorted(continuations(theta, link_in, GeometricBranch))
    want = oracles.arc_scan(theta, link_in, n=20001)
    assert len(got) == len(want)
    for g, w in zip(got, want):
        assert link_distance(g, w, theta) < 1e-8


def test_fan_is_equispaced_and_anchored():
    outs = continuations(3 * math.pi, 1.0, DiffractiveFan(6))
    assert len(outs) == 6
    assert outs[0] == pytest.approx(1.0)
    gaps = np.diff(np.sort(outs))
    assert np.allclose(gaps, math.pi / 2)


def test_policy_parse():
    assert Policy.parse("geometric") == GeometricBranch
    assert Policy.parse("fan:12") == Policy("fan", 12)
    with pytest.raises(ValueError):
        Policy.parse("wobble")


def test_classify():
    assert flow.classify(0.0, math.pi, 3 * math.pi) == GEOMETRIC
    assert flow.classify(0.0, math.pi + 1e-6, 3 * math.pi) == DIFFRACTIVE


# ---------------------------------------------------------------------------
# stepping and tracing


def test_ray_at_vertex_hits_cone(square):
    p = RayState(0, [-1.5, -0.5], [1.0, 0.0])
    seg, hit = step(square, p)
    assert isinstance(hit, ConeHit)
    assert np.allclose(square.cone_pos[hit.cone], (-0.5, -0.5))
    assert seg.length == pytest.approx(1.0)


def test_outgoing_escape(square):
    p = RayState(0, [square.R1 + 1.0, 0.0], [1.0, 0.0])
    seg, hit = step(square, p)
    assert isinstance(hit, EscapeSphere) and hit.outgoing
    assert seg.length == 0.0


def test_start_at_cone_leaves_radially(square):
    start = flow.depart(square, 2, 0.4, 0.0)
    ch = trace(square, start, 0.3).chains[0]
    seg = ch.segments[0]
    assert np.allclose(seg.start, square.cone_pos[2])
    assert np.allclose(seg.dir, start.dir)


def test_convex_escape_bound(square):
    rng = np.random.default_rng(2)
    bound = 2 * square.R1 + square.diameter
    for _ in range(200):
        x = rng.uniform(-1.4, 1.4, 2)
        if square.closed_inside(x[None])[0]:
            continue
        th = rng.uniform(0, 2 * math.pi)
        res = trace(square, RayState(int(rng.integers(2)), x, [math.cos(th), math.sin(th)]), 50.0)
        assert all(c.terminal == ESCAPED for c in res.chains)
        if not any(c.interactions for c in res.chains):
            assert len(res.chains) == 1
            assert res.chains[0].total_time <= bound


def test_figure1_trapped_chain_under_backscatter(fig1):
    # start on the dashed segment, between the vertex (1, 0) and the face x = -1
    start = RayState(0, [0.0, 0.0], [1.0, 0.0])
    res = trace(fig1, start, 13.0, DiffractiveFan(4))
    trapped = [c for c in res.chains if c.terminal == HORIZON and len(c.interactions) == 3
               and all(i.cone == 6 and i.kind == DIFFRACTIVE for i in c.interactions)]
    assert trapped
    ch = trapped[0]
    # period: vertex to face and back, length 4
    t_in = [i.t_in for i in ch.interactions]
    assert np.allclose(np.diff(t_in), 4.0)


def test_figure1_geometric_flow_escapes(fig1):
    start = RayState(0, [0.0, 0.0], [1.0, 0.0])
    res = trace(fig1, start, 30.0)
    assert all(c.terminal == ESCAPED for c in res.chains)


def test_branch_cap_truncates(fig1):
    start = RayState(0, [0.0, 0.0], [1.0, 0.0])
    res = trace(fig1, start, 13.0, DiffractiveFan(8), cap=5)
    assert res.truncated


def test_chain_rows(fig1):
    start = RayState(0, [0.0, 0.0], [1.0, 0.0])
    res = trace(fig1, start, 6.0)
    rows = list(flow.chain_rows(res.chains))
    assert all(len(r) == len(flow.CHAIN_COLUMNS) for r in rows)
    buf = io.StringIO()
    csv.writer(buf).writerows([flow.CHAIN_COLUMNS, *rows])
    back = list(csv.DictReader(io.StringIO(buf.getvalue())))
    cones = [r for r in back if r["coneId"]]
    assert cones and all(r["coneId"] == "6" for r in cones)
    assert sum(1 for r in back if r["terminal"]) == len(res.chains)


def _random_exterior_ray(surface, rng):
    while True:
        x = rng.uniform(-1.4, 1.4, 2)
        if np.hypot(*x) < surface.R1 and not surface.closed_inside(x[None])[0]:
            break
    th = rng.uniform(0, 2 * math.pi)
    return RayState(int(rng.integers(2)), x, [math.cos(th), math.sin(th)])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), t1=st.floats(0.1, 1.5), t2=st.floats(0.1, 1.5))
def test_time_additivity(square, seed, t1, t2):
    p = _random_exterior_ray(square, np.random.default_rng(seed))
    whole = trace(square, p, t1 + t2, DiffractiveFan(3))
    first = trace(square, p, t1, DiffractiveFan(3))
    joined = []
    for ch in first.chains:
        if ch.terminal != HORIZON:
            joined.append(ch)
            continue
        rest = trace(square, ch.final, t2, DiffractiveFan(3))
        for r in rest.chains:
            joined.append(flow.GeodesicChain(ch.segments + r.segments, ch.interactions + r.interactions, r.terminal,
                                             r.final))

    def key(c):
        return (c.terminal, tuple((i.cone, round(i.link_out, 9)) for i in c.interactions))

    assert sorted(map(key, whole.chains)) == sorted(map(key, joined))
    for a in whole.chains:
        b = next(c for c in joined if key(c) == key(a))
        assert abs(a.total_time - b.total_time) < 1e-9
        assert np.allclose(a.final.pos, b.final.pos, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), t=st.floats(0.1, 2.5))
def test_reversibility(square, seed, t):
    p = _random_exterior_ray(square, np.random.default_rng(seed))
    ch = trace(square, p, t).chains[0]
    if ch.interactions or ch.terminal != HORIZON:
        return
    back = trace(square, ch.final.reversed(), t).chains[0]
    assert np.linalg.norm(back.final.pos - p.pos) < 1e-6 * t
    assert back.final.sheet == p.sheet


@pytest.mark.parametrize("seed", range(5))
def test_unfolding_matches_billiard(seed):
    tri = corpus.equilateral_triangle()
    surf = double_exterior(tri)
    rng = np.random.default_rng(seed)
    checked = 0
    while checked < 20:
        p = _random_exterior_ray(surf, rng)
        T = rng.uniform(0.5, 2.5)
        ch = trace(surf, p, T).chains[0]
        if ch.interactions:
            continue
        pos, d = oracles.billiard_position(tri.obstacles, p.pos, p.dir, ch.total_time)
        assert np.allclose(ch.final.pos, pos, atol=1e-9)
        assert np.allclose(ch.final.dir, d, atol=1e-9)
        checked += 1


def test_geometric_chains_reappear_in_fine_fan(square):
    # cone angle 3 pi: a fan of 3 k directions contains both geometric continuations
    p = RayState(0, [-1.5, -0.8], [1.0, 0.3])
    geo = trace(square, p, 3.0)
    fan = trace(square, p, 3.0, DiffractiveFan(6))
    assert any(c.interactions for c in geo.chains)
    for g in geo.chains:
        assert any(len(f.segments) == len(g.segments)
                   and all(np.allclose(a.start, b.start, atol=1e-9) and np.allclose(a.dir, b.dir, atol=1e-9)
                           for a, b in zip(f.segments, g.segments)) for f in fan.chains)


# ---------------------------------------------------------------------------
# relations


def test_relates_free_segment(square):
    p = RayState(0, [-1.2, 1.0], [1.0, 0.0])
    q = RayState(0, [0.8, 1.0], [1.0, 0.0])
    assert relates(square, p, q, 2.0, "G") is True
    assert relates(square, p, q, 2.0, "D") is True
    assert relates(square, p, q, 1.5, "D") is False


def test_relates_through_cone(square):
    V = square.cone_pos[0]
    p = RayState(0, V + [-0.8, -0.24], [1.0, 0.3])
    L = math.hypot(0.8, 0.24)
    hit = trace(square, p, L + 0.5).chains[0].interactions[0]
    for lo in continuations(square.cones[0], hit.link_in, GeometricBranch):
        q = trace(square, flow.depart(square, 0, lo, L), 0.4).chains[0].final
        assert relates(square, p, q, L + 0.4, "G") is True
    # a generic departure direction: diffractive only
    q = trace(square, flow.depart(square, 0, hit.link_in + 1.0, L), 0.4).chains[0].final
    assert relates(square, p, q, L + 0.4, "G") is False
    assert relates(square, p, q, L + 0.4, "D") is True


def test_relates_needs_positive_time(square):
    p = RayState(0, [-1.2, 1.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        relates(square, p, p, 0.0)


def test_closure_link_distance_tends_to_pi(square):
    V = square.cone_pos[1]  # (0.5, -0.5)
    errs = []
    for b in (1e-2, 1e-3, 1e-4, 1e-5, 1e-6):
        # pass below the vertex, outside the square, at impact parameter b
        p = RayState(0, V + np.array([-0.2 - 1.0, -b]), [1.0, 0.0])
        ch = trace(square, p, 2.0).chains[0]
        assert not ch.interactions
        errs.append((b, abs(flow.passage_link_distance(square, ch, 1, 0.1) - math.pi)))
    for b, e in errs:
        assert e <= 2.1 * b / 0.1  # the chord misses the centre of the ball by b
