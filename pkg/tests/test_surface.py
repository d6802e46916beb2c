import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from conewave import corpus
from conewave.surface import (AtConePoint, InteriorPointError, OnEdge, PolygonScene, SceneError, SurfacePoint,
                              UnsupportedGeometry, double_exterior, link_angle_audit, load_any, locate,
                              min_cone_distance, rigid_motion, save_surface, load_surface, scene_from_dict,
                              surface_distance, surface_distances, visible_many)


def test_square_cone_angles(square):
    assert square.n_sheets == 2
    assert len(square.cones) == 4
    for c in square.cones:
        assert abs(c.angle - 3 * math.pi) < 1e-12


def test_triangle_cone_angles(surfaces):
    for c in surfaces["triangle"].cones:
        assert abs(c.angle - 10 * math.pi / 3) < 1e-12


@pytest.mark.parametrize("name", ["unit-square", "triangle", "figure1", "slit-cover"])
def test_angle_audit(surfaces, name):
    assert link_angle_audit(surfaces[name]) < 1e-12


def test_every_edge_glued_to_its_mirror(square):
    for e in range(len(square.edge_a)):
        # the open (exterior) side of each edge is the right side, glued to itself on the other sheet
        assert square.cross(0, e, -1) == (1, -1)
        assert square.cross(1, e, -1) == (0, -1)
        assert square.cross(0, e, 1) is None


def test_removable_cone_point_rejected():
    rect = [(-0.5, -0.5), (0.0, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
    with pytest.raises(SceneError, match="removable cone point"):
        double_exterior(PolygonScene((rect,), 1.0, 1.5))


def test_drop_straight_vertices_recovers_square():
    rect = [(-0.5, -0.5), (0.0, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
    surf = double_exterior(PolygonScene((rect,), 1.0, 1.5).without_straight_vertices())
    assert len(surf.cones) == 4


def test_non_simple_loop_rejected():
    bow = [(-0.5, -0.5), (0.5, 0.5), (0.5, -0.5), (-0.5, 0.5)]
    with pytest.raises(SceneError):
        double_exterior(PolygonScene((bow,), 1.0, 1.5))


def test_intersecting_obstacles_rejected():
    a = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
    b = [(0.0, 0.0), (0.8, 0.0), (0.8, 0.8), (0.0, 0.8)]
    with pytest.raises(SceneError):
        double_exterior(PolygonScene((a, b), 1.5, 2.0))


def test_scene_needs_radii():
    with pytest.raises(SceneError):
        scene_from_dict({"obstacles": []})


def test_min_cone_distance_square(square):
    assert min_cone_distance(square) == pytest.approx(1.0, abs=1e-12)


def test_min_cone_distance_figure1(fig1):
    # the brute-force oracle: closest pair of vertices joined by a segment in the closed exterior
    obs = [np.asarray(o) for o in fig1.obstacles]
    V = fig1.cone_pos
    best = min(float(np.linalg.norm(V[i] - V[j])) for i in range(len(V)) for j in range(i + 1, len(V))
               if oracles.sees(obs, V[i], V[j]))
    assert min_cone_distance(fig1) == pytest.approx(best, abs=1e-12)
    assert best == pytest.approx(2.0)  # the gap between (1, 0) and the face corners


def test_single_cone_surface_warns():
    from conewave.surface import ConePoint, ConeSurface, Corner

    c = ConePoint(0, np.zeros(2), 3 * math.pi, (Corner(0, 0.0, 3 * math.pi, 1, 0.0),))
    surf = ConeSurface(1, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2), int), (), (c,), 1.0, 2.0, 1e-9)
    with pytest.warns(RuntimeWarning):
        assert min_cone_distance(surf) == math.inf


@pytest.mark.parametrize("angle,shift", [(0.3, (0.2, -0.1)), (2.0, (0.0, 0.5)), (math.pi / 2, (0.0, 0.0))])
def test_min_cone_distance_rigid_invariance(angle, shift):
    for sc in (corpus.unit_square(), corpus.figure1(), corpus.equilateral_triangle()):
        a = min_cone_distance(double_exterior(sc))
        b = min_cone_distance(double_exterior(rigid_motion(sc, angle, shift)))
        assert a == pytest.approx(b, rel=1e-12)


def test_locate(square):
    eps = square.eps_hit
    assert isinstance(locate(square, 0, (1.0, 1.0)), SurfacePoint)
    assert isinstance(locate(square, 0, (0.5 + 10 * eps, 0.5 + 10 * eps)), SurfacePoint)
    hit = locate(square, 1, (0.5, -0.5))
    assert isinstance(hit, AtConePoint)
    assert np.allclose(square.cone_pos[hit.cone], (0.5, -0.5))
    assert isinstance(locate(square, 0, (0.5, 0.1)), OnEdge)
    with pytest.raises(InteriorPointError, match="interior point"):
        locate(square, 0, (0.1, 0.1))


def test_surface_roundtrip(tmp_path, surfaces):
    for name, surf in surfaces.items():
        p = tmp_path / f"{name}.json"
        save_surface(surf, p)
        back = load_surface(p)
        assert [c.angle for c in back.cones] == pytest.approx([c.angle for c in surf.cones], rel=1e-15)
        assert load_any(p).n_sheets == surf.n_sheets


def test_curved_metric_refused(tmp_path, square):
    d = square.to_dict()
    d["metric"] = "conic"
    p = tmp_path / "curved.json"
    p.write_text(json.dumps(d))
    with pytest.raises(UnsupportedGeometry):
        load_surface(p)


def test_tampered_cone_angles_refused(tmp_path, square):
    d = square.to_dict()
    d["cone_angles"][0] += 1e-6
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    with pytest.raises(SceneError):
        load_surface(p)


# ---------------------------------------------------------------------------
# distances


def test_visibility_matches_sampling(square):
    rng = np.random.default_rng(3)
    A = rng.uniform(-1.5, 1.5, (300, 2))
    B = rng.uniform(-1.5, 1.5, (300, 2))
    keep = ~(square.closed_inside(A) | square.closed_inside(B))
    A, B = A[keep], B[keep]
    obs = [np.asarray(o) for o in square.obstacles]
    got = visible_many(square.obstacles, A, B)
    want = [oracles.sees(obs, a, b) for a, b in zip(A, B)]
    assert got.tolist() == want


def test_distances_against_brute_force(square):
    rng = np.random.default_rng(11)
    obs = [np.asarray(o) for o in square.obstacles]
    done = 0
    while done < 10:
        p, q = rng.uniform(-1.4, 1.4, (2, 2))
        if square.closed_inside(np.array([p, q])).any():
            continue
        a, b = (int(v) for v in rng.integers(0, 2, 2))
        d = surface_distance(square, (a, p), (b, q))
        o = oracles.doubled_distance(obs, p, a, q, b)
        # the oracle only bounds from above, within its boundary sampling
        assert d <= o + 1e-9
        assert o - d < 1e-3
        done += 1


def test_sheet_change_costs_at_least_reaching_the_boundary(square):
    assert surface_distance(square, (0, (-1.0, 0.0)), (1, (-1.0, 0.0))) == pytest.approx(1.0)
    assert surface_distance(square, (0, (-1.0, 0.0)), (0, (-1.0, 0.0))) == 0.0


def _exterior_points(surface, n, rng):
    out = []
    while len(out) < n:
        P = rng.uniform(-surface.R1, surface.R1, (2 * n, 2))
        out.extend(P[~surface.closed_inside(P)])
    return np.array(out[:n])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_sheet_swap_is_an_isometry(square, seed):
    rng = np.random.default_rng(seed)
    P, Q = _exterior_points(square, 200, rng), _exterior_points(square, 200, rng)
    sa, sb = rng.integers(0, 2, 200), rng.integers(0, 2, 200)
    d = surface_distances(square, sa, P, sb, Q)
    swapped = surface_distances(square, 1 - sa, P, 1 - sb, Q)
    assert np.all(np.isfinite(d))
    assert np.allclose(d, swapped, rtol=0, atol=1e-12)


def test_sheet_swap_fixes_exactly_the_boundary(square):
    rng = np.random.default_rng(5)
    P = _exterior_points(square, 100, rng)
    # a point and its image on the other sheet are apart unless the point is on the seam
    gap = surface_distances(square, np.zeros(100, int), P, np.ones(100, int), P)
    from conewave.surface import segment_distance
    to_seam = segment_distance(P, square.edge_a, square.edge_b).min(axis=1)
    assert np.allclose(gap, 2 * to_seam, atol=1e-12)
    b = np.array([[0.5, 0.2], [-0.1, -0.5], [0.5, 0.5]])
    assert np.allclose(surface_distances(square, 0, b, 1, b), 0.0)


def test_distance_symmetry_and_triangle_inequality(square):
    rng = np.random.default_rng(8)
    P, Q, R = (_exterior_points(square, 300, rng) for _ in range(3))
    s = [rng.integers(0, 2, 300) for _ in range(3)]
    pq = surface_distances(square, s[0], P, s[1], Q)
    qp = surface_distances(square, s[1], Q, s[0], P)
    assert np.allclose(pq, qp, atol=1e-12)
    qr = surface_distances(square, s[1], Q, s[2], R)
    pr = surface_distances(square, s[0], P, s[2], R)
    assert np.all(pr <= pq + qr + 1e-9)


def test_distances_need_a_doubled_exterior(slit):
    with pytest.raises(SceneError):
        surface_distance(slit, (0, (3.0, 3.0)), (1, (3.0, 3.0)))
