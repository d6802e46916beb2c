"""Polygon scenes and flat cone surfaces built from them.

A ``ConeSurface`` is a set of identical sheets (copies of the plane minus the
obstacles) together with gluings of the boundary edges.  Doubling a polygon
exterior glues every edge of sheet 0 to the same edge of sheet 1 (a mirror
identification); a branched cover over slits glues the upper lip of a slit on
one sheet to the lower lip on the other.  Every obstacle vertex or slit end
becomes a cone point whose link is assembled from the wedges of the sheets
meeting there.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

DIRICHLET = "dirichlet"
NEUMANN = "neumann"


class SceneError(ValueError):
    """Raised for invalid scene or surface data."""


class InteriorPointError(SceneError):
    pass


class UnsupportedGeometry(NotImplementedError):
    pass


# ---------------------------------------------------------------------------
# small planar helpers


def cross2(a, b) -> float:
    return a[0] * b[1] - a[1] * b[0]


def polar(v) -> float:
    return math.atan2(v[1], v[0]) % TWO_PI


def signed_area(loop: np.ndarray) -> float:
    x, y = loop[:, 0], loop[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_intersect(p1, p2, q1, q2, tol=0.0) -> bool:
    d1 = cross2(q2 - q1, p1 - q1)
    d2 = cross2(q2 - q1, p2 - q1)
    d3 = cross2(p2 - p1, q1 - p1)
    d4 = cross2(p2 - p1, q2 - p1)
    if ((d1 > tol and d2 < -tol) or (d1 < -tol and d2 > tol)) and (
        (d3 > tol and d4 < -tol) or (d3 < -tol and d4 > tol)
    ):
        return True

    def on_seg(a, b, c):
        return (
            min(a[0], b[0]) - tol <= c[0] <= max(a[0], b[0]) + tol
            and min(a[1], b[1]) - tol <= c[1] <= max(a[1], b[1]) + tol
        )

    if abs(d1) <= tol and on_seg(q1, q2, p1):
        return True
    if abs(d2) <= tol and on_seg(q1, q2, p2):
        return True
    if abs(d3) <= tol and on_seg(p1, p2, q1):
        return True
    if abs(d4) <= tol and on_seg(p1, p2, q2):
        return True
    return False


def points_in_polygon(points: np.ndarray, loop: np.ndarray) -> np.ndarray:
    """Even-odd point location; boundary points may land on either side."""
    points = np.atleast_2d(points)
    x, y = points[:, 0], points[:, 1]
    inside = np.zeros(len(points), dtype=bool)
    xs, ys = loop[:, 0], loop[:, 1]
    xe, ye = np.roll(xs, -1), np.roll(ys, -1)
    for x0, y0, x1, y1 in zip(xs, ys, xe, ye):
        cond = (y0 > y) != (y1 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= cond & (x < xcross)
    return inside


def segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to the segments ``a[k]-b[k]``; shape (P, E)."""
    points = np.atleast_2d(points)
    ab = b - a
    L2 = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300)
    ap = points[:, None, :] - a[None, :, :]
    s = np.clip(np.einsum("pej,ej->pe", ap, ab) / L2, 0.0, 1.0)
    closest = a[None] + s[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=-1)


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class PolygonScene:
    """Obstacles in the plane plus the radii used by the checks.

    Loops are stored counterclockwise (obstacle interior on the left of each
    edge) whatever orientation they were given in.
    """

    obstacles: tuple
    R0: float
    R1: float
    bc: str = DIRICHLET
    name: str = "scene"

    def __post_init__(self):
        loops = []
        for loop in self.obstacles:
            arr = np.asarray(loop, dtype=float).reshape(-1, 2)
            if len(arr) > 1 and np.allclose(arr[0], arr[-1]):
                arr = arr[:-1]
            if signed_area(arr) < 0:
                arr = arr[::-1]
            arr = arr.copy()
            arr.setflags(write=False)
            loops.append(arr)
        object.__setattr__(self, "obstacles", tuple(loops))
        bc = str(self.bc).lower()
        if bc not in (DIRICHLET, NEUMANN):
            raise SceneError(f"unknown boundary condition {self.bc!r}")
        object.__setattr__(self, "bc", bc)

    @property
    def vertices(self) -> np.ndarray:
        if not self.obstacles:
            return np.zeros((0, 2))
        return np.concatenate(self.obstacles)

    @property
    def diameter(self) -> float:
        v = self.vertices
        if len(v) == 0:
            return 2.0 * self.R0
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))

    def interior_angles(self) -> list[np.ndarray]:
        out = []
        for loop in self.obstacles:
            prev = np.roll(loop, 1, axis=0)
            nxt = np.roll(loop, -1, axis=0)
            a_out = np.arctan2(nxt[:, 1] - loop[:, 1], nxt[:, 0] - loop[:, 0])
            a_back = np.arctan2(prev[:, 1] - loop[:, 1], prev[:, 0] - loop[:, 0])
            out.append((a_back - a_out) % TWO_PI)
        return out

    def straight_vertices(self, tol: float = 1e-12) -> list[tuple[int, int]]:
        bad = []
        for k, ang in enumerate(self.interior_angles()):
            for i in np.flatnonzero(np.abs(ang - math.pi) <= tol):
                bad.append((k, int(i)))
        return bad

    def without_straight_vertices(self, tol: float = 1e-12) -> "PolygonScene":
        loops = []
        for loop, ang in zip(self.obstacles, self.interior_angles()):
            loops.append(loop[np.abs(ang - math.pi) > tol])
        return PolygonScene(tuple(loops), self.R0, self.R1, self.bc, self.name)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """True for points strictly inside some obstacle (boundary fuzzy)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.zeros(len(points), dtype=bool)
        for loop in self.obstacles:
            inside |= points_in_polygon(points, loop)
        return inside

    def validate(self) -> list[str]:
        """Return a list of problems; empty when the scene is admissible."""
        problems = []
        if not self.R1 > self.R0 > 0:
            problems.append(f"need R1 > R0 > 0, got R0={self.R0}, R1={self.R1}")
        for k, loop in enumerate(self.obstacles):
            if len(loop) < 3:
                problems.append(f"obstacle {k}: fewer than 3 vertices")
                continue
            if abs(signed_area(loop)) < 1e-14:
                problems.append(f"obstacle {k}: zero area")
            n = len(loop)
            for i in range(n):
                for j in range(i + 1, n):
                    if j == i + 1 or (i == 0 and j == n - 1):
                        continue
                    if _segments_intersect(loop[i], loop[(i + 1) % n], loop[j], loop[(j + 1) % n]):
                        problems.append(f"obstacle {k}: not simple (edges {i}, {j} meet)")
            if np.any(np.linalg.norm(loop, axis=1) >= self.R0):
                problems.append(f"obstacle {k}: not strictly inside the disc of radius R0")
        for k1 in range(len(self.obstacles)):
            for k2 in range(k1 + 1, len(self.obstacles)):
                A, B = self.obstacles[k1], self.obstacles[k2]
                hit = any(
                    _segments_intersect(A[i], A[(i + 1) % len(A)], B[j], B[(j + 1) % len(B)])
                    for i in range(len(A))
                    for j in range(len(B))
                )
                if hit or points_in_polygon(A[:1], B)[0] or points_in_polygon(B[:1], A)[0]:
                    problems.append(f"obstacles {k1} and {k2} intersect")
        for k, i in self.straight_vertices():
            problems.append(f"obstacle {k} vertex {i}: interior angle pi (removable cone point)")
        return problems

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "obstacles": [loop.tolist() for loop in self.obstacles],
            "R0": self.R0,
            "R1": self.R1,
            "bc": self.bc,
        }


@dataclass(frozen=True)
class SlitScene:
    """Slits (segments) in the plane; the two-sheeted cover branched along them."""

    slits: tuple
    R0: float
    R1: float
    bc: str = DIRICHLET
    name: str = "slits"

    def __post_init__(self):
        slits = []
        for s in self.slits:
            arr = np.asarray(s, dtype=float).reshape(2, 2).copy()
            arr.setflags(write=False)
            slits.append(arr)
        object.__setattr__(self, "slits", tuple(slits))

    @property
    def vertices(self) -> np.ndarray:
        return np.concatenate(self.slits) if self.slits else np.zeros((0, 2))

    @property
    def diameter(self) -> float:
        v = self.vertices
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0))) if len(v) else 2 * self.R0

    def validate(self) -> list[str]:
        problems = []
        if not self.R1 > self.R0 > 0:
            problems.append(f"need R1 > R0 > 0, got R0={self.R0}, R1={self.R1}")
        for k, s in enumerate(self.slits):
            if np.linalg.norm(s[1] - s[0]) <= 0:
                problems.append(f"slit {k}: zero length")
            if np.any(np.linalg.norm(s, axis=1) >= self.R0):
                problems.append(f"slit {k}: not strictly inside the disc of radius R0")
        for i in range(len(self.slits)):
            for j in range(i + 1, len(self.slits)):
                if _segments_intersect(*self.slits[i], *self.slits[j]):
                    problems.append(f"slits {i} and {j} intersect")
        return problems

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.zeros(len(np.atleast_2d(points)), dtype=bool)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "slits": [s.tolist() for s in self.slits],
            "R0": self.R0,
            "R1": self.R1,
            "bc": self.bc,
        }


def scene_from_dict(data: dict):
    try:
        R0, R1 = float(data["R0"]), float(data["R1"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneError(f"scene needs numeric R0 and R1 ({exc})") from None
    bc = data.get("bc", DIRICHLET)
    name = data.get("name", "scene")
    if "slits" in data:
        return SlitScene(tuple(data["slits"]), R0, R1, bc, name)
    if "obstacles" not in data:
        raise SceneError("scene needs an 'obstacles' (or 'slits') list")
    return PolygonScene(tuple(data["obstacles"]), R0, R1, bc, name)


def load_scene(path, drop_straight: bool = False):
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    scene = scene_from_dict(data)
    if drop_straight and isinstance(scene, PolygonScene):
        scene = scene.without_straight_vertices()
    return scene


# ---------------------------------------------------------------------------
# cone surfaces


@dataclass(frozen=True)
class Corner:
    """One sheet's wedge at a cone point, as a piece of the link.

    Link coordinate ``offset + u`` (``0 <= u <= width``) is the direction with
    polar angle ``start + orientation * u`` on ``sheet``.
    """

    sheet: int
    start: float
    width: float
    orientation: int
    offset: float


@dataclass(frozen=True)
class ConePoint:
    id: int
    position: np.ndarray
    angle: float
    corners: tuple

    def corner_at(self, link: float) -> tuple[Corner, float]:
        link = link % self.angle
        for c in self.corners:
            if c.offset - 1e-15 <= link <= c.offset + c.width + 1e-15:
                return c, min(max(link - c.offset, 0.0), c.width)
        c = self.corners[-1]
        return c, c.width

    def direction(self, link: float) -> tuple[int, np.ndarray]:
        """Sheet and unit vector of the outgoing direction at a link coordinate."""
        c, u = self.corner_at(link)
        ang = c.start + c.orientation * u
        return c.sheet, np.array([math.cos(ang), math.sin(ang)])

    def link_of(self, sheet: int, vec) -> float:
        """Link coordinate of the direction ``vec`` seen from the cone on ``sheet``.

        Directions pointing (by round-off) into a closed wedge snap to the
        nearest wedge boundary of that sheet.
        """
        ang = polar(vec)
        best, best_err = None, math.inf
        for c in self.corners:
            if c.sheet != sheet:
                continue
            u = ((ang - c.start) * c.orientation) % TWO_PI
            if u <= c.width:
                return (c.offset + u) % self.angle
            err = min(u - c.width, TWO_PI - u)
            if err < best_err:
                uu = c.width if u - c.width < TWO_PI - u else 0.0
                best, best_err = (c.offset + uu) % self.angle, err
        if best is None:
            raise SceneError(f"cone {self.id} has no wedge on sheet {sheet}")
        return best


@dataclass(frozen=True)
class Gluing:
    """Identify side ``side_a`` of ``edge`` on ``sheet_a`` with ``side_b`` on ``sheet_b``.

    Sides are +1 (left of the edge directed a->b) and -1 (right).  Matching
    sides make a mirror gluing; opposite sides let rays pass straight through.
    """

    edge: int
    sheet_a: int
    side_a: int
    sheet_b: int
    side_b: int

    @property
    def mirror(self) -> bool:
        return self.side_a == self.side_b


@dataclass(frozen=True)
class SurfacePoint:
    sheet: int
    pos: np.ndarray


@dataclass(frozen=True)
class OnEdge:
    sheet: int
    pos: np.ndarray
    edge: int


@dataclass(frozen=True)
class AtConePoint:
    cone: int
    distance: float


@dataclass(frozen=True, eq=False)
class ConeSurface:
    n_sheets: int
    edge_a: np.ndarray
    edge_b: np.ndarray
    edge_cones: np.ndarray  # (E, 2) cone ids of the endpoints
    gluings: tuple
    cones: tuple
    R0: float
    R1: float
    eps_hit: float
    obstacles: tuple = ()
    bc: str = DIRICHLET
    name: str = "surface"
    metric: str = "flat"
    kind: str = "double"
    _cross: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        table = {}
        for g in self.gluings:
            table[(g.sheet_a, g.edge, g.side_a)] = (g.sheet_b, g.side_b)
            table[(g.sheet_b, g.edge, g.side_b)] = (g.sheet_a, g.side_a)
        object.__setattr__(self, "_cross", table)
        d = self.edge_b - self.edge_a
        length = np.linalg.norm(d, axis=1)
        object.__setattr__(self, "edge_len", length)
        object.__setattr__(self, "edge_dir", d / length[:, None])
        object.__setattr__(self, "cone_pos", np.array([c.position for c in self.cones]).reshape(-1, 2))
        # open[s, e, k]: side (+1 if k == 0 else -1) of edge e exists on sheet s
        open_ = np.zeros((self.n_sheets, len(self.edge_a), 2), dtype=bool)
        for (s, e, side) in table:
            open_[s, e, 0 if side > 0 else 1] = True
        object.__setattr__(self, "open_side", open_)

    @property
    def n_cones(self) -> int:
        return len(self.cones)

    @property
    def diameter(self) -> float:
        v = self.cone_pos
        if len(v) < 2:
            return 2.0 * self.R0
        return float(np.linalg.norm(v.max(axis=0) - v.min(axis=0)))

    def cross(self, sheet: int, edge: int, side: int):
        """Partner of ``(sheet, edge, side)`` or None when that side is closed."""
        return self._cross.get((sheet, edge, side))

    def swap_sheets(self) -> "ConeSurface":
        """The same surface with sheets 0 and 1 relabelled."""
        if self.n_sheets != 2:
            raise SceneError("sheet swap needs exactly two sheets")

        def sw(s):
            return 1 - s

        gl = tuple(Gluing(g.edge, sw(g.sheet_a), g.side_a, sw(g.sheet_b), g.side_b) for g in self.gluings)
        return _assemble(self.edge_a, self.edge_b, self.edge_cones, gl, self.cone_pos, self.R0, self.R1,
                         self.eps_hit, self.obstacles, self.bc, self.name, self.kind, self.n_sheets)

    def closed_inside(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.zeros(len(points), dtype=bool)
        for loop in self.obstacles:
            inside |= points_in_polygon(points, loop)
        return inside

    def to_dict(self) -> dict:
        return {
            "format": "conewave-surface/1",
            "name": self.name,
            "kind": self.kind,
            "n_sheets": self.n_sheets,
            "R0": self.R0,
            "R1": self.R1,
            "eps_hit": self.eps_hit,
            "bc": self.bc,
            "metric": self.metric,
            "obstacles": [np.asarray(o).tolist() for o in self.obstacles],
            "edges": [[a.tolist(), b.tolist()] for a, b in zip(self.edge_a, self.edge_b)],
            "edge_cones": self.edge_cones.tolist(),
            "cone_positions": self.cone_pos.tolist(),
            "cone_angles": [c.angle for c in self.cones],
            "gluings": [[g.edge, g.sheet_a, g.side_a, g.sheet_b, g.side_b] for g in self.gluings],
        }


def surface_from_dict(data: dict) -> ConeSurface:
    if data.get("format") != "conewave-surface/1":
        raise SceneError("not a conewave surface file")
    if data.get("metric", "flat") != "flat":
        raise UnsupportedGeometry("unsupported geometry: only flat cone metrics are implemented")
    edges = np.asarray(data["edges"], dtype=float).reshape(-1, 2, 2)
    gl = tuple(Gluing(*map(int, g)) for g in data["gluings"])
    surf = _assemble(edges[:, 0], edges[:, 1], np.asarray(data["edge_cones"], dtype=int), gl,
                     np.asarray(data["cone_positions"], dtype=float), float(data["R0"]), float(data["R1"]),
                     float(data["eps_hit"]), tuple(np.asarray(o, dtype=float) for o in data["obstacles"]),
                     data.get("bc", DIRICHLET), data.get("name", "surface"), data.get("kind", "double"),
                     int(data["n_sheets"]))
    stored = data.get("cone_angles")
    if stored is not None and not np.allclose(stored, [c.angle for c in surf.cones], rtol=1e-12, atol=0):
        raise SceneError("stored cone angles disagree with the gluing data")
    return surf


def save_surface(surface: ConeSurface, path) -> None:
    Path(path).write_text(json.dumps(surface.to_dict(), indent=1), encoding="utf-8")


def load_surface(path) -> ConeSurface:
    return surface_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_any(path):
    """Scene or surface file -> ConeSurface."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if data.get("format") == "conewave-surface/1":
        return surface_from_dict(data)
    return build_surface(scene_from_dict(data))


def _incident(edge_a, edge_b, edge_cones, cone: int):
    """(polar angle, edge, side just counterclockwise of it) for edges at a cone."""
    out = []
    for e, (ca, cb) in enumerate(edge_cones):
        if ca == cone:
            out.append((polar(edge_b[e] - edge_a[e]), e, +1))
        if cb == cone:
            out.append((polar(edge_a[e] - edge_b[e]), e, -1))
    out.sort()
    return out


def _wedges(edge_a, edge_b, edge_cones, cone, open_side, sheet):
    """Open wedges of ``sheet`` around ``cone`` as dicts with boundary data."""
    inc = _incident(edge_a, edge_b, edge_cones, cone)
    wedges = []
    for i, (ang, e, side_after) in enumerate(inc):
        nxt_ang, nxt_e, nxt_after = inc[(i + 1) % len(inc)]
        width = (nxt_ang - ang) % TWO_PI
        if len(inc) == 1 or width == 0.0:
            width = TWO_PI if len(inc) == 1 else width
        if not open_side[sheet, e, 0 if side_after > 0 else 1]:
            continue
        wedges.append({
            "start_angle": ang,
            "width": width,
            "start": (e, side_after),
            "end": (nxt_e, -nxt_after),
        })
    return wedges


def _assemble(edge_a, edge_b, edge_cones, gluings, cone_positions, R0, R1, eps_hit, obstacles, bc, name,
              kind, n_sheets) -> ConeSurface:
    edge_a = np.asarray(edge_a, dtype=float)
    edge_b = np.asarray(edge_b, dtype=float)
    table = {}
    for g in gluings:
        for key in ((g.sheet_a, g.edge, g.side_a), (g.sheet_b, g.edge, g.side_b)):
            if key in table:
                raise SceneError(f"edge side {key} glued twice")
        table[(g.sheet_a, g.edge, g.side_a)] = (g.sheet_b, g.side_b)
        table[(g.sheet_b, g.edge, g.side_b)] = (g.sheet_a, g.side_a)
    open_side = np.zeros((n_sheets, len(edge_a), 2), dtype=bool)
    for (s, e, side) in table:
        open_side[s, e, 0 if side > 0 else 1] = True

    cones = []
    for cid, pos in enumerate(np.asarray(cone_positions, dtype=float)):
        wedges = {s: _wedges(edge_a, edge_b, edge_cones, cid, open_side, s) for s in range(n_sheets)}
        # walk the link: leave each wedge through its far boundary, follow the gluing
        todo = [(s, k) for s in range(n_sheets) for k in range(len(wedges[s]))]
        if not todo:
            raise SceneError(f"cone {cid} has no open wedge")
        s, k = todo[0]
        orient = +1
        corners, offset, seen = [], 0.0, set()
        while (s, k) not in seen:
            seen.add((s, k))
            w = wedges[s][k]
            if orient > 0:
                start, exit_ = w["start_angle"], w["end"]
            else:
                start, exit_ = (w["start_angle"] + w["width"]) % TWO_PI, w["start"]
            corners.append(Corner(s, start, w["width"], orient, offset))
            offset += w["width"]
            e, side = exit_
            partner = table.get((s, e, side))
            if partner is None:
                raise SceneError(f"edge {e} side {side} on sheet {s} is not glued")
            s2, side2 = partner
            found = None
            for k2, w2 in enumerate(wedges[s2]):
                if w2["start"] == (e, side2):
                    found = (k2, +1)
                elif w2["end"] == (e, side2):
                    found = (k2, -1)
                if found:
                    break
            if found is None:
                raise SceneError(f"gluing at cone {cid} leads to a closed side")
            s, (k, orient) = s2, found
        if len(seen) != len(todo):
            raise SceneError(f"cone {cid}: link is not a single circle")
        angle = sum(c.width for c in corners)
        if abs(angle - TWO_PI) <= 1e-12 * TWO_PI:
            raise SceneError(f"cone {cid}: angle 2*pi, removable cone point")
        cones.append(ConePoint(cid, pos.copy(), angle, tuple(corners)))
    return ConeSurface(n_sheets, edge_a, edge_b, np.asarray(edge_cones, dtype=int), tuple(gluings),
                       tuple(cones), float(R0), float(R1), float(eps_hit), tuple(obstacles), bc, name,
                       "flat", kind)


def default_eps_hit(diameter: float) -> float:
    return 1e-9 * max(diameter, 1e-300)


def double_exterior(scene: PolygonScene, eps_hit: float | None = None) -> ConeSurface:
    """Glue two copies of the exterior of ``scene`` along the obstacle boundary."""
    if not isinstance(scene, PolygonScene):
        raise SceneError("double_exterior needs a PolygonScene")
    problems = scene.validate()
    straight = [p for p in problems if "removable cone point" in p]
    if straight:
        raise SceneError("removable cone point: " + "; ".join(straight))
    if problems:
        raise SceneError("; ".join(problems))
    edge_a, edge_b, edge_cones, positions = [], [], [], []
    for loop in scene.obstacles:
        base = len(positions)
        n = len(loop)
        for i in range(n):
            positions.append(loop[i])
            edge_a.append(loop[i])
            edge_b.append(loop[(i + 1) % n])
            edge_cones.append((base + i, base + (i + 1) % n))
    # loops are counterclockwise, so the exterior is the right side (-1)
    gluings = tuple(Gluing(e, 0, -1, 1, -1) for e in range(len(edge_a)))
    eps = default_eps_hit(scene.diameter) if eps_hit is None else eps_hit
    surf = _assemble(edge_a, edge_b, edge_cones, gluings, positions, scene.R0, scene.R1, eps,
                     scene.obstacles, scene.bc, scene.name, "double", 2)
    # cone angles stored as 2(2 pi - interior angle) straight from the coordinates
    interior = np.concatenate(scene.interior_angles())
    fixed = []
    for c, th in zip(surf.cones, interior):
        exact = 2.0 * (TWO_PI - float(th))
        if abs(exact - c.angle) > 1e-12 * exact:
            raise SceneError(f"cone {c.id}: link walk gives {c.angle}, expected {exact}")
        fixed.append(ConePoint(c.id, c.position, exact, c.corners))
    object.__setattr__(surf, "cones", tuple(fixed))
    return surf


def branched_cover(scene: SlitScene, eps_hit: float | None = None) -> ConeSurface:
    """Two-sheeted cover of the plane branched along the slits of ``scene``."""
    problems = scene.validate()
    if problems:
        raise SceneError("; ".join(problems))
    edge_a = [s[0] for s in scene.slits]
    edge_b = [s[1] for s in scene.slits]
    edge_cones = [(2 * k, 2 * k + 1) for k in range(len(scene.slits))]
    positions = [p for s in scene.slits for p in s]
    gluings = []
    for e in range(len(edge_a)):
        gluings.append(Gluing(e, 0, +1, 1, -1))
        gluings.append(Gluing(e, 0, -1, 1, +1))
    eps = default_eps_hit(scene.diameter) if eps_hit is None else eps_hit
    return _assemble(edge_a, edge_b, edge_cones, tuple(gluings), positions, scene.R0, scene.R1, eps, (),
                     scene.bc, scene.name, "cover", 2)


def build_surface(scene) -> ConeSurface:
    if isinstance(scene, SlitScene):
        return branched_cover(scene)
    return double_exterior(scene)


# ---------------------------------------------------------------------------
# queries


def link_angle_audit(surface: ConeSurface) -> float:
    """Largest relative gap between stored cone angles and the gluing data."""
    worst = 0.0
    for c in surface.cones:
        rebuilt = sum(k.width for k in c.corners)
        worst = max(worst, abs(rebuilt - c.angle) / c.angle)
    return worst


def locate(surface: ConeSurface, sheet: int, pos, eps_hit: float | None = None):
    pos = np.asarray(pos, dtype=float)
    if not np.all(np.isfinite(pos)):
        raise SceneError("non-finite position")
    eps = surface.eps_hit if eps_hit is None else eps_hit
    if surface.n_cones:
        d = np.linalg.norm(surface.cone_pos - pos, axis=1)
        k = int(np.argmin(d))
        if d[k] < eps:
            return AtConePoint(k, float(d[k]))
    if len(surface.edge_a):
        de = segment_distance(pos[None], surface.edge_a, surface.edge_b)[0]
        e = int(np.argmin(de))
        if de[e] < eps:
            return OnEdge(sheet, pos, e)
    if surface.closed_inside(pos[None])[0]:
        raise InteriorPointError("interior point: position lies inside an obstacle")
    return SurfacePoint(sheet, pos)


def _direct_clear(surface: ConeSurface, i: int, j: int) -> bool:
    """Whether some sheet carries the straight segment between cones i and j."""
    from .flow import RayState, step, ConeHit, EdgeCross

    a, b = surface.cone_pos[i], surface.cone_pos[j]
    length = float(np.linalg.norm(b - a))
    d = (b - a) / length
    for c in surface.cones[i].corners:
        u = ((polar(d) - c.start) * c.orientation) % TWO_PI
        if u > c.width + 1e-12:
            continue
        ray = RayState(c.sheet, a.copy(), d, 0.0, cone=i)
        travelled = 0.0
        for _ in range(4 * len(surface.edge_a) + 4):
            seg, hit = step(surface, ray, horizon=length - travelled + 10 * surface.eps_hit)
            travelled += seg.length
            if isinstance(hit, ConeHit):
                if hit.cone == j:
                    return True
                break
            if isinstance(hit, EdgeCross) and not hit.mirror:
                ray = hit.ray
                continue
            break
    return False


def min_cone_distance(surface: ConeSurface) -> float:
    """Minimum surface distance between distinct cone points.

    Every surface path between two cone points is at least as long as the
    Euclidean distance between them, so scanning pairs by Euclidean distance
    and stopping at the first one joined by a straight segment on some sheet
    gives the minimum.
    """
    n = surface.n_cones
    if n < 2:
        warnings.warn("fewer than two cone points; minimum distance is +inf", RuntimeWarning, stacklevel=2)
        return math.inf
    pos = surface.cone_pos
    pairs = sorted(
        (float(np.linalg.norm(pos[i] - pos[j])), i, j) for i in range(n) for j in range(i + 1, n)
    )
    for dist, i, j in pairs:
        if _direct_clear(surface, i, j):
            return dist
    return math.inf


def visible_many(obstacles, A, B) -> np.ndarray:
    """Whether each straight segment A[k]-B[k] stays in the closed exterior (touching is allowed)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    ok = np.ones(len(A), dtype=bool)
    if not len(obstacles):
        return ok
    scale = 1e-12 * (1.0 + max(np.abs(A).max(), np.abs(B).max(), max(np.abs(o).max() for o in obstacles)))
    ab = B - A
    fr = np.linspace(0.0, 1.0, 9)[1:-1]
    for loop in obstacles:
        loop = np.asarray(loop, dtype=float)
        C, D = loop, np.roll(loop, -1, axis=0)
        cd = D - C
        # proper crossings, (segments, edges)
        d1 = ab[:, None, 0] * (C - A[:, None])[..., 1] - ab[:, None, 1] * (C - A[:, None])[..., 0]
        d2 = ab[:, None, 0] * (D - A[:, None])[..., 1] - ab[:, None, 1] * (D - A[:, None])[..., 0]
        d3 = cd[None, :, 0] * (A[:, None] - C)[..., 1] - cd[None, :, 1] * (A[:, None] - C)[..., 0]
        d4 = cd[None, :, 0] * (B[:, None] - C)[..., 1] - cd[None, :, 1] * (B[:, None] - C)[..., 0]
        s12 = ((d1 > scale) & (d2 < -scale)) | ((d1 < -scale) & (d2 > scale))
        s34 = ((d3 > scale) & (d4 < -scale)) | ((d3 < -scale) & (d4 > scale))
        ok &= ~np.any(s12 & s34, axis=1)
        # chords through the interior (e.g. diagonals between vertices)
        pts = (A[:, None] + fr[None, :, None] * ab[:, None]).reshape(-1, 2)
        inside = points_in_polygon(pts, loop)
        if inside.any():
            deep = np.zeros(len(pts), dtype=bool)
            deep[inside] = segment_distance(pts[inside], C, D).min(axis=1) > 1e-9
            ok &= ~deep.reshape(len(A), len(fr)).any(axis=1)
    return ok


def _cone_graph(surface: ConeSurface) -> np.ndarray:
    """All-pairs surface distances between cone points of a doubled exterior."""
    from scipy.sparse.csgraph import shortest_path

    V = surface.cone_pos
    n = len(V)
    i, j = np.triu_indices(n, 1)
    vis = visible_many(surface.obstacles, V[i], V[j])
    W = np.zeros((n, n))
    w = np.linalg.norm(V[i] - V[j], axis=1)
    W[i[vis], j[vis]] = W[j[vis], i[vis]] = np.maximum(w[vis], 1e-300)
    return shortest_path(W, directed=False)


def surface_distances(surface: ConeSurface, sa, P, sb, Q) -> np.ndarray:
    """Geodesic distance on a doubled exterior between (sa[k], P[k]) and (sb[k], Q[k]).

    Projected to the plane, any path is at least as long as the taut string
    around the obstacles, which the doubled surface realizes on either sheet
    through the cone points.  So on one sheet the distance is the straight
    segment or the taut string; across sheets a single bounce off an edge is
    also tried.  Paths with three or more bounces are not searched, which is
    exact for a single convex obstacle (a ray leaving it never returns).
    """
    if surface.kind != "double":
        raise SceneError("surface distances are implemented for doubled exteriors only")
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    m = len(P)
    sa = np.broadcast_to(np.asarray(sa), (m,))
    sb = np.broadcast_to(np.asarray(sb), (m,))
    obs = surface.obstacles
    V = surface.cone_pos
    n = len(V)
    # legs to the cone points
    rep = np.repeat(np.arange(m), n)
    cone = np.tile(np.arange(n), m)
    lp = np.where(visible_many(obs, P[rep], V[cone]), np.linalg.norm(P[rep] - V[cone], axis=1), np.inf)
    lq = np.where(visible_many(obs, Q[rep], V[cone]), np.linalg.norm(Q[rep] - V[cone], axis=1), np.inf)
    lp, lq = lp.reshape(m, n), lq.reshape(m, n)
    G = _cone_graph(surface)
    via = np.min(lp[:, :, None] + G[None] + lq[:, None, :], axis=(1, 2))
    same = sa == sb
    out = via.copy()
    direct = visible_many(obs, P, Q)
    d = np.linalg.norm(P - Q, axis=1)
    out[same & direct] = np.minimum(out[same & direct], d[same & direct])
    # one bounce: reflect Q in each edge line and intersect with the edge
    for e in range(len(surface.edge_a)):
        a, u = surface.edge_a[e], surface.edge_dir[e]
        nrm = np.array([-u[1], u[0]])
        hp = (P - a) @ nrm
        hq = (Q - a) @ nrm
        # both points on the open side of the edge (the obstacle is on the left)
        good = ~same & (hp <= 0) & (hq <= 0)
        if not good.any():
            continue
        tp, tq = (P - a) @ u, (Q - a) @ u
        den = hp + hq
        with np.errstate(divide="ignore", invalid="ignore"):
            tb = np.where(den < 0, tp + (tq - tp) * hp / np.where(den < 0, den, 1.0), tp)
        tb = np.clip(tb, 0.0, surface.edge_len[e])
        b = a + tb[:, None] * u
        L = np.linalg.norm(P - b, axis=1) + np.linalg.norm(b - Q, axis=1)
        idx = np.flatnonzero(good & (L < out))
        if len(idx):
            vis = visible_many(obs, P[idx], b[idx]) & visible_many(obs, b[idx], Q[idx])
            out[idx[vis]] = L[idx[vis]]
    return out


def surface_distance(surface: ConeSurface, a, b) -> float:
    """Distance between (sheet, pos) pairs ``a`` and ``b``."""
    return float(surface_distances(surface, [a[0]], [a[1]], [b[0]], [b[1]])[0])


def rigid_motion(scene, angle: float, shift: Sequence[float]):
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, -s], [s, c]])
    t = np.asarray(shift, dtype=float)
    grow = float(np.linalg.norm(t))
    if isinstance(scene, SlitScene):
        return SlitScene(tuple(s_ @ R.T + t for s_ in scene.slits), scene.R0 + grow, scene.R1 + grow,
                         scene.bc, scene.name)
    return PolygonScene(tuple(o @ R.T + t for o in scene.obstacles), scene.R0 + grow, scene.R1 + grow,
                        scene.bc, scene.name)


def iter_sheet_points(surface: ConeSurface) -> Iterable[int]:
    return range(surface.n_sheets)
