"""Straight-line geodesics on flat cone surfaces.

Rays travel in straight lines on a sheet, switch sheets (mirrored or not) at
glued edges, and stop at cone points, where the continuation is chosen in the
cone's link.  A continuation is geometric when the outgoing link coordinate is
at link distance exactly pi from the incoming one; every other continuation is
diffractive.
"""
from __future__ import annotations

import math
import weakref
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse.csgraph import dijkstra

from .surface import TWO_PI, ConeSurface, points_in_polygon, segment_distance

TOL_G = 1e-7

GEOMETRIC = "geometric"
DIFFRACTIVE = "diffractive"

HORIZON = "Horizon"
ESCAPED = "Escaped"
AT_CONE = "AtConePoint"


# ---------------------------------------------------------------------------
# state and events


@dataclass(frozen=True)
class RayState:
    sheet: int
    pos: np.ndarray
    dir: np.ndarray
    time: float = 0.0
    cone: Optional[int] = None  # cone the ray is leaving, excluded from hits
    edge: Optional[int] = None  # edge the ray is sitting on after a crossing

    def __post_init__(self):
        d = np.asarray(self.dir, dtype=float)
        n = float(np.hypot(d[0], d[1]))
        if not n > 0:
            raise ValueError("zero direction")
        object.__setattr__(self, "dir", d / n)
        object.__setattr__(self, "pos", np.asarray(self.pos, dtype=float))

    @classmethod
    def from_angle(cls, sheet, x, y, theta, time=0.0):
        return cls(int(sheet), np.array([x, y], dtype=float), np.array([math.cos(theta), math.sin(theta)]), time)

    def reversed(self) -> "RayState":
        return RayState(self.sheet, self.pos.copy(), -self.dir, self.time, self.cone, self.edge)


@dataclass(frozen=True)
class Segment:
    sheet: int
    start: np.ndarray
    dir: np.ndarray
    length: float
    t0: float

    @property
    def end(self) -> np.ndarray:
        return self.start + self.length * self.dir


@dataclass(frozen=True)
class ConeHit:
    cone: int
    time: float
    link_in: float
    sheet: int


@dataclass(frozen=True)
class EdgeCross:
    edge: int
    sheet: int
    side: int
    mirror: bool
    ray: RayState


@dataclass(frozen=True)
class EscapeSphere:
    ray: RayState
    outgoing: bool


@dataclass(frozen=True)
class HorizonReached:
    ray: RayState


@dataclass(frozen=True)
class Interaction:
    cone: int
    t_in: float
    link_in: float
    link_out: float
    kind: str


@dataclass(frozen=True)
class Policy:
    mode: str  # "geometric" | "fan" | "stop"
    k: int = 1

    def __post_init__(self):
        if self.mode not in ("geometric", "fan", "stop"):
            raise ValueError(f"unknown policy {self.mode!r}")
        if self.k < 1:
            raise ValueError("fan size must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "Policy":
        text = text.strip().lower()
        if text.startswith("fan"):
            _, _, k = text.partition(":")
            return cls("fan", int(k) if k else 64)
        return cls(text)


GeometricBranch = Policy("geometric")
Stop = Policy("stop")


def DiffractiveFan(k: int = 64) -> Policy:
    return Policy("fan", k)


@dataclass
class GeodesicChain:
    segments: list
    interactions: list
    terminal: str
    final: RayState

    @property
    def total_time(self) -> float:
        return float(sum(s.length for s in self.segments))

    @property
    def cones(self) -> list[int]:
        return [i.cone for i in self.interactions]

    def state_at(self, t: float) -> Optional[RayState]:
        """Ray state after elapsed time ``t`` from the start of the chain."""
        if not self.segments:
            return self.final if abs(t) < 1e-15 else None
        t0 = self.segments[0].t0
        for seg in self.segments:
            if seg.t0 - t0 - 1e-12 <= t <= seg.t0 - t0 + seg.length + 1e-12:
                tau = min(max(t - (seg.t0 - t0), 0.0), seg.length)
                return RayState(seg.sheet, seg.start + tau * seg.dir, seg.dir, seg.t0 + tau)
        return None

    @property
    def n_geometric(self) -> int:
        return sum(1 for i in self.interactions if i.kind == GEOMETRIC)


@dataclass
class TraceResult:
    chains: list
    truncated: bool = False
    branches: int = 0

    def __iter__(self):
        return iter(self.chains)

    def __len__(self):
        return len(self.chains)


# ---------------------------------------------------------------------------
# link arithmetic


def link_distance(a: float, b: float, theta: float) -> float:
    d = abs(a - b) % theta
    return min(d, theta - d)


def classify(link_in: float, link_out: float, theta: float, tol: float = TOL_G) -> str:
    return GEOMETRIC if abs(link_distance(link_in, link_out, theta) - math.pi) <= tol else DIFFRACTIVE


def continuations(cone, link_in: float, policy: Policy) -> list[float]:
    theta = cone.angle if hasattr(cone, "angle") else float(cone)
    link_in = link_in % theta
    if policy.mode == "stop":
        return []
    if policy.mode == "fan":
        return [(link_in + j * theta / policy.k) % theta for j in range(policy.k)]
    if theta < TWO_PI - 1e-12:
        # largest arc distance in the link is theta/2 < pi
        return []
    out = []
    for v in ((link_in + math.pi) % theta, (link_in - math.pi) % theta):
        if not any(link_distance(v, w, theta) <= 1e-12 for w in out):
            out.append(v)
    return out


def depart(surface: ConeSurface, cone: int, link: float, time: float) -> RayState:
    sheet, d = surface.cones[cone].direction(link)
    return RayState(sheet, surface.cone_pos[cone].copy(), d, time, cone=cone)


# ---------------------------------------------------------------------------
# stepping

K_HORIZON, K_CONE, K_EDGE, K_ESCAPE = 0, 1, 2, 3


def advance(surface: ConeSurface, sheet, p, d, remaining, depart_cone, last_edge, eps_hit=None):
    """First event along straight rays (vectorized over rays).

    Returns (t, kind, index, side): elapsed time, event code, cone or edge id
    and the side from which an edge is approached.
    """
    p = np.atleast_2d(p)
    d = np.atleast_2d(d)
    n = len(p)
    sheet = np.broadcast_to(np.asarray(sheet, dtype=int), (n,))
    remaining = np.broadcast_to(np.asarray(remaining, dtype=float), (n,)).copy()
    depart_cone = np.broadcast_to(np.asarray(depart_cone, dtype=int), (n,))
    last_edge = np.broadcast_to(np.asarray(last_edge, dtype=int), (n,))
    eps = surface.eps_hit if eps_hit is None else eps_hit
    tmin = 1e-3 * surface.eps_hit

    t_best = remaining
    kind = np.full(n, K_HORIZON, dtype=np.int64)
    index = np.full(n, -1, dtype=np.int64)
    side = np.zeros(n, dtype=np.int64)

    # escape through |z| = R1
    pd = np.einsum("ij,ij->i", p, d)
    pp = np.einsum("ij,ij->i", p, p)
    disc = pd * pd - pp + surface.R1 ** 2
    t_esc = np.where(disc >= 0, -pd + np.sqrt(np.maximum(disc, 0.0)), np.maximum(-pd, 0.0))
    t_esc = np.where((pp >= surface.R1 ** 2) & (pd >= 0), 0.0, np.maximum(t_esc, 0.0))
    m = t_esc < t_best
    t_best = np.where(m, t_esc, t_best)
    kind[m] = K_ESCAPE

    # glued edges
    E = len(surface.edge_a)
    if E:
        u = surface.edge_dir
        a = surface.edge_a
        L = surface.edge_len
        den = d[:, None, 0] * u[None, :, 1] - d[:, None, 1] * u[None, :, 0]  # cross(d, u)
        w = a[None, :, :] - p[:, None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (w[..., 0] * u[None, :, 1] - w[..., 1] * u[None, :, 0]) / den
            s = (w[..., 0] * d[:, None, 1] - w[..., 1] * d[:, None, 0]) / den
        approach = np.where(den > 0, +1, -1)  # cross(u, d) < 0  <=> coming from the left
        opened = np.where(approach > 0, surface.open_side[sheet, :, 0], surface.open_side[sheet, :, 1])
        ok = (
            (np.abs(den) > 1e-15)
            & (t > tmin)
            & (s > eps)
            & (s < L[None, :] - eps)
            & opened
            & (np.arange(E)[None, :] != last_edge[:, None])
        )
        t = np.where(ok, t, np.inf)
        j = np.argmin(t, axis=1)
        tj = t[np.arange(n), j]
        m = tj < t_best
        t_best = np.where(m, tj, t_best)
        kind[m] = K_EDGE
        index[m] = j[m]
        side[m] = approach[np.arange(n), j][m]

    # cone points, checked last so that near-vertex crossings resolve as hits
    C = surface.n_cones
    if C:
        w = surface.cone_pos[None, :, :] - p[:, None, :]
        t = w[..., 0] * d[:, None, 0] + w[..., 1] * d[:, None, 1]
        perp = np.abs(w[..., 0] * d[:, None, 1] - w[..., 1] * d[:, None, 0])
        ok = (perp < eps) & (t > tmin) & (np.arange(C)[None, :] != depart_cone[:, None])
        t = np.where(ok, t, np.inf)
        j = np.argmin(t, axis=1)
        tj = t[np.arange(n), j]
        # a vertex hit wins over an edge crossing just before it
        m = np.where(kind == K_EDGE, tj <= t_best + eps, tj <= t_best)
        t_best = np.where(m, tj, t_best)
        kind[m] = K_CONE
        index[m] = j[m]
        side[m] = 0
    return t_best, kind, index, side


def reflect(d: np.ndarray, u: np.ndarray) -> np.ndarray:
    return 2.0 * np.dot(d, u) * u - d


def step(surface: ConeSurface, ray: RayState, horizon: float = math.inf, eps_hit=None):
    """Maximal straight segment of ``ray`` and the event that ends it.

    ``horizon`` is the time budget for this segment.
    """
    t, kind, idx, side = advance(
        surface, ray.sheet, ray.pos, ray.dir, horizon,
        -1 if ray.cone is None else ray.cone, -1 if ray.edge is None else ray.edge, eps_hit,
    )
    t, kind, idx, side = float(t[0]), int(kind[0]), int(idx[0]), int(side[0])
    seg = Segment(ray.sheet, ray.pos.copy(), ray.dir.copy(), t, ray.time)
    end = ray.pos + t * ray.dir
    if kind == K_CONE:
        cone = surface.cones[idx]
        link_in = cone.link_of(ray.sheet, -ray.dir)
        return seg, ConeHit(idx, ray.time + t, link_in, ray.sheet)
    if kind == K_EDGE:
        partner = surface.cross(ray.sheet, idx, side)
        sheet2, side2 = partner
        mirror = side2 == side
        d2 = reflect(ray.dir, surface.edge_dir[idx]) if mirror else ray.dir.copy()
        nxt = RayState(sheet2, end, d2, ray.time + t, None, idx)
        return seg, EdgeCross(idx, ray.sheet, side, mirror, nxt)
    nxt = RayState(ray.sheet, end, ray.dir.copy(), ray.time + t, None, None)
    if kind == K_ESCAPE:
        return seg, EscapeSphere(nxt, bool(np.dot(end, ray.dir) >= 0))
    return seg, HorizonReached(nxt)


# ---------------------------------------------------------------------------
# tracing


def trace(surface: ConeSurface, start: RayState, horizon: float, policy: Policy = GeometricBranch,
          cap: int = 10 ** 6, eps_hit=None, tol_g: float = TOL_G) -> TraceResult:
    """Depth-first expansion of all chains from ``start`` up to elapsed time ``horizon``."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    t_end = start.time + horizon
    stack = [(start, (), ())]
    chains = []
    branches = 0
    truncated = False
    max_steps = 10 ** 6
    while stack:
        ray, segs, inters = stack.pop()
        segs, inters = list(segs), list(inters)
        for _ in range(max_steps):
            seg, hit = step(surface, ray, t_end - ray.time, eps_hit)
            if seg.length > 0:
                segs.append(seg)
            if isinstance(hit, EdgeCross):
                ray = hit.ray
                continue
            if isinstance(hit, EscapeSphere):
                chains.append(GeodesicChain(segs, inters, ESCAPED, hit.ray))
            elif isinstance(hit, HorizonReached):
                chains.append(GeodesicChain(segs, inters, HORIZON, hit.ray))
            else:
                cone = surface.cones[hit.cone]
                outs = continuations(cone, hit.link_in, policy)
                at = RayState(hit.sheet, surface.cone_pos[hit.cone].copy(), ray.dir, hit.time, hit.cone)
                if not outs or hit.time >= t_end:
                    inter = Interaction(hit.cone, hit.time, hit.link_in, math.nan, "")
                    chains.append(GeodesicChain(segs, inters + [inter], AT_CONE, at))
                else:
                    for lo in reversed(outs):
                        if branches >= cap:
                            truncated = True
                            break
                        branches += 1
                        inter = Interaction(hit.cone, hit.time, hit.link_in, lo,
                                            classify(hit.link_in, lo, cone.angle, tol_g))
                        stack.append((depart(surface, hit.cone, lo, hit.time), tuple(segs),
                                      tuple(inters + [inter])))
            break
        if truncated:
            break
    return TraceResult(chains, truncated or bool(stack), branches)


def trace_one(surface, start, horizon, eps_hit=None) -> GeodesicChain:
    """Single chain that stops at the first cone point."""
    return trace(surface, start, horizon, Stop, eps_hit=eps_hit).chains[0]


CHAIN_COLUMNS = ("chainId", "segIndex", "sheet", "x0", "y0", "dirx", "diry", "length", "coneId", "linkIn",
                 "linkOut", "kind", "terminal")


def chain_rows(chains):
    """One row per segment; the cone columns are filled when the segment ends at a cone point."""
    for cid, ch in enumerate(chains):
        pending = list(ch.interactions)
        for k, seg in enumerate(ch.segments):
            row = [cid, k, seg.sheet, f"{seg.start[0]:.12g}", f"{seg.start[1]:.12g}", f"{seg.dir[0]:.12g}",
                   f"{seg.dir[1]:.12g}", f"{seg.length:.12g}", "", "", "", "", ""]
            if pending and abs(pending[0].t_in - (seg.t0 + seg.length)) < 1e-9:
                it = pending.pop(0)
                row[8:12] = [it.cone, f"{it.link_in:.12g}",
                             "" if math.isnan(it.link_out) else f"{it.link_out:.12g}", it.kind]
            if k == len(ch.segments) - 1:
                row[12] = ch.terminal
            yield row


# ---------------------------------------------------------------------------
# cone-to-cone segments


@dataclass(frozen=True)
class ConeSegment:
    alpha: int
    beta: int
    link_out: float  # departure link coordinate at alpha
    link_in: float  # arrival link coordinate at beta (direction back along the segment)
    length: float
    sheet: int  # departure sheet
    crossings: tuple = ()


def _fan_itineraries(surface: ConeSurface, cone: int, links: np.ndarray, max_length: float):
    """Itinerary code and first hit of straight rays leaving ``cone`` at ``links``."""
    c = surface.cones[cone]
    n = len(links)
    sheet = np.empty(n, dtype=int)
    d = np.empty((n, 2))
    for i, lk in enumerate(links):
        s, v = c.direction(lk)
        sheet[i] = s
        d[i] = v
    p = np.repeat(surface.cone_pos[cone][None], n, axis=0)
    code = sheet.astype(np.uint64) + np.uint64(1)
    travelled = np.zeros(n)
    dep = np.full(n, cone)
    last = np.full(n, -1)
    active = np.ones(n, dtype=bool)
    hit = np.full(n, -1)
    prime = np.uint64(1000003)
    for _ in range(64 * max(len(surface.edge_a), 1)):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        t, kind, j, side = advance(surface, sheet[idx], p[idx], d[idx], max_length - travelled[idx],
                                   dep[idx], last[idx])
        travelled[idx] += t
        p[idx] += t[:, None] * d[idx]
        term = kind != K_EDGE
        tag = np.where(kind == K_CONE, 10 + j, np.where(kind == K_EDGE, 10 ** 6 + 4 * j + side + 1, kind))
        tag = tag.astype(np.uint64) + (sheet[idx].astype(np.uint64) << np.uint64(40))
        with np.errstate(over="ignore"):
            code[idx] = code[idx] * prime + tag
        hit[idx[kind == K_CONE]] = j[kind == K_CONE]
        active[idx[term]] = False
        e_idx = idx[~term]
        for r, e, sd in zip(e_idx, j[~term], side[~term]):
            s2, sd2 = surface.cross(sheet[r], e, sd)
            if sd2 == sd:
                d[r] = reflect(d[r], surface.edge_dir[e])
            sheet[r] = s2
            last[r] = e
            dep[r] = -1
    return code, hit, travelled


def _unfold_segment(surface: ConeSurface, cone: int, link: float, max_length: float, eps_hit=None):
    """Trace the straight ray from ``cone`` at ``link`` to the first event, with crossings."""
    ray = depart(surface, cone, link, 0.0)
    crossings = []
    for _ in range(64 * max(len(surface.edge_a), 1)):
        seg, hit = step(surface, ray, max_length - ray.time, eps_hit)
        if isinstance(hit, EdgeCross):
            crossings.append((hit.edge, hit.mirror))
            ray = hit.ray
            continue
        return hit, crossings, ray
    return None, crossings, ray


def _reflect_point(x: np.ndarray, a: np.ndarray, u: np.ndarray) -> np.ndarray:
    w = x - a
    return a + 2.0 * np.dot(w, u) * u - w


def _polish(surface: ConeSurface, alpha: int, link: float, max_length: float):
    hit, crossings, _ = _unfold_segment(surface, alpha, link, max_length * (1 + 1e-9) + surface.eps_hit,
                                        eps_hit=1e3 * surface.eps_hit)
    if not isinstance(hit, ConeHit):
        return None
    beta = hit.cone
    # straight line from alpha to the unfolded image of beta
    img = surface.cone_pos[beta].copy()
    for e, mirror in reversed(crossings):
        if mirror:
            img = _reflect_point(img, surface.edge_a[e], surface.edge_dir[e])
    v = img - surface.cone_pos[alpha]
    length = float(np.hypot(*v))
    sheet0, _ = surface.cones[alpha].direction(link)
    exact = surface.cones[alpha].link_of(sheet0, v)
    if link_distance(exact, link, surface.cones[alpha].angle) > 1e-6:
        return None
    hit2, crossings2, _ = _unfold_segment(surface, alpha, exact, length + 10 * surface.eps_hit)
    if not isinstance(hit2, ConeHit) or hit2.cone != beta:
        return None
    if length > max_length * (1 + 1e-12):
        return None
    return ConeSegment(alpha, beta, exact, hit2.link_in, length, sheet0, tuple(crossings2))


_SEG_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def cone_segments(surface: ConeSurface, max_length: float, n_fan: int = 4096, refine: bool = True,
                  cache: bool = True) -> "SegmentSet":
    """All straight cone-to-cone geodesic segments of length <= ``max_length``.

    Departure links are sampled on a fan of ``n_fan`` points per cone; every
    pair of neighbouring samples with different itineraries brackets a cone
    hit, which is located by bisection and then solved exactly by unfolding
    the mirror crossings.  With ``refine`` the search is repeated at twice the
    resolution and any disagreement is reported.
    """
    key = (n_fan, refine)
    if cache:
        stored = _SEG_CACHE.get(surface, {}).get(key)
        if stored is not None and stored.max_length >= max_length:
            return stored.restricted(max_length)
    found = _segments_at(surface, max_length, n_fan)
    agreed = True
    if refine:
        fine = _segments_at(surface, max_length, 2 * n_fan)
        agreed = _seg_keys(fine) == _seg_keys(found)
        if not agreed:
            found = _merge(found, fine)
    out = SegmentSet(found, max_length, n_fan, agreed)
    if cache:
        _SEG_CACHE.setdefault(surface, {})[key] = out
    return out


def _seg_keys(segs):
    return {(s.alpha, s.beta, round(s.link_out, 7), round(s.length, 7)) for s in segs}


def _merge(a, b):
    keys = _seg_keys(a)
    return list(a) + [s for s in b if (s.alpha, s.beta, round(s.link_out, 7), round(s.length, 7)) not in keys]


def _segments_at(surface: ConeSurface, max_length: float, n_fan: int) -> list:
    out = []
    for alpha, cone in enumerate(surface.cones):
        theta = cone.angle
        links = (np.arange(n_fan) + 0.5) * theta / n_fan
        code, hit, _ = _fan_itineraries(surface, alpha, links, max_length * (1 + 1e-9) + surface.eps_hit)
        candidates = set()
        for i in range(n_fan):
            j = (i + 1) % n_fan
            if hit[i] >= 0:
                candidates.add(links[i])
            if code[i] == code[j]:
                continue
            lo, hi = links[i], links[j] + (theta if j == 0 else 0.0)
            c_lo = code[i]
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                cm, hm, _ = _fan_itineraries(surface, alpha, np.array([mid % theta]),
                                             max_length * (1 + 1e-9) + surface.eps_hit)
                if hm[0] >= 0:
                    lo = hi = mid
                    break
                if cm[0] == c_lo:
                    lo = mid
                else:
                    hi = mid
                if hi - lo < 1e-15 * theta:
                    break
            candidates.add((0.5 * (lo + hi)) % theta)
        for lk in sorted(candidates):
            seg = _polish(surface, alpha, lk, max_length)
            if seg is None:
                continue
            if any(s.beta == seg.beta and abs(s.length - seg.length) < 1e-9
                   and link_distance(s.link_out, seg.link_out, theta) < 1e-9 for s in out if s.alpha == alpha):
                continue
            out.append(seg)
    return out


@dataclass
class SegmentSet:
    segments: list
    max_length: float
    n_fan: int
    agreed: bool

    def restricted(self, max_length: float) -> "SegmentSet":
        return SegmentSet([s for s in self.segments if s.length <= max_length * (1 + 1e-12)], max_length,
                          self.n_fan, self.agreed)

    def __iter__(self):
        return iter(self.segments)

    def __len__(self):
        return len(self.segments)

    def from_cone(self, alpha: int) -> list:
        return [s for s in self.segments if s.alpha == alpha]


# ---------------------------------------------------------------------------
# relations


def _near(state: RayState, q: RayState, tol: float) -> bool:
    return (state.sheet == q.sheet and float(np.hypot(*(state.pos - q.pos))) <= tol
            and float(np.hypot(*(state.dir - q.dir))) <= tol)


def _chains_reach(result: TraceResult, q: RayState, t: float, tol: float) -> bool:
    for ch in result.chains:
        for dt in (0.0, -tol, tol):
            st = ch.state_at(t + dt)
            if st is not None and _near(st, q, tol):
                return True
    return False


def _walk_lengths(segs: SegmentSet, alpha: int, beta: int, target: float, tol: float) -> bool:
    """Is there a walk of cone-to-cone segments from alpha to beta of length target?"""
    if alpha == beta and abs(target) <= tol:
        return True
    frontier = {(alpha, 0.0)}
    by_cone = {}
    for s in segs:
        by_cone.setdefault(s.alpha, []).append(s)
    seen = set()
    while frontier:
        nxt = set()
        for c, length in frontier:
            for s in by_cone.get(c, []):
                L = length + s.length
                if L > target + tol:
                    continue
                if s.beta == beta and abs(L - target) <= tol:
                    return True
                key = (s.beta, round(L / max(tol, 1e-12)))
                if key not in seen:
                    seen.add(key)
                    nxt.add((s.beta, L))
        frontier = nxt
    return False


def relates(surface: ConeSurface, p: RayState, q: RayState, t: float, kind: str = "G", tol: float = 1e-6,
            cap: int = 10 ** 5):
    """Decide p ~ q at time t for kind 'G' (geometric) or 'D' (diffractive).

    Returns True, False or None when the search was truncated.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    kind = kind.upper()
    res = trace(surface, p, t + 2 * tol, GeometricBranch, cap=cap)
    if _chains_reach(res, q, t, tol):
        return True
    if kind == "G":
        return None if res.truncated else False
    # diffractive: free flight of p to a cone alpha, of reversed q to a cone beta,
    # and a walk of cone-to-cone segments in between
    fwd = trace_one(surface, p, t + 2 * tol)
    if fwd.terminal != AT_CONE:
        return None if res.truncated else False
    alpha, t1 = fwd.interactions[-1].cone, fwd.total_time
    back = trace_one(surface, q.reversed(), t - t1 + 2 * tol, eps_hit=max(tol, surface.eps_hit))
    if back.terminal != AT_CONE:
        return None if res.truncated else False
    beta, t2 = back.interactions[-1].cone, back.total_time
    remaining = t - t1 - t2
    if remaining < -2 * tol:
        return False
    if alpha == beta and abs(remaining) <= 2 * tol:
        return True
    segs = cone_segments(surface, max(remaining + 2 * tol, 1e-9))
    return _walk_lengths(segs, alpha, beta, remaining, 2 * tol)


def passage_link_distance(surface: ConeSurface, chain: GeodesicChain, cone: int, rho: float) -> float:
    """Link distance at ``cone`` between where ``chain`` enters and leaves the ball of radius rho."""
    c = surface.cones[cone]
    x = surface.cone_pos[cone]
    pts = []
    for seg in chain.segments:
        w = seg.start - x
        b = float(np.dot(w, seg.dir))
        disc = b * b - (float(np.dot(w, w)) - rho * rho)
        if disc < 0:
            continue
        for tau in (-b - math.sqrt(disc), -b + math.sqrt(disc)):
            if -1e-12 <= tau <= seg.length + 1e-12:
                pts.append((seg.t0 + tau, seg.sheet, seg.start + tau * seg.dir))
    if len(pts) < 2:
        raise ValueError("chain does not cross the ball around the cone twice")
    pts.sort(key=lambda r: r[0])
    (_, s_in, p_in), (_, s_out, p_out) = pts[0], pts[-1]
    return link_distance(c.link_of(s_in, p_in - x), c.link_of(s_out, p_out - x), c.angle)


# ---------------------------------------------------------------------------
# shortest paths in the exterior


def _cross(u, v) -> float:
    return float(u[0] * v[1] - u[1] * v[0])


def _visible(obstacles, a, b) -> bool:
    if np.allclose(a, b):
        return True
    for loop in obstacles:
        n = len(loop)
        for i in range(n):
            c, d = loop[i], loop[(i + 1) % n]
            d1 = _cross(b - a, c - a)
            d2 = _cross(b - a, d - a)
            d3 = _cross(d - c, a - c)
            d4 = _cross(d - c, b - c)
            scale = 1e-12 * (1.0 + float(np.abs(np.concatenate([a, b, c, d])).max()))
            if ((d1 > scale and d2 < -scale) or (d1 < -scale and d2 > scale)) and (
                (d3 > scale and d4 < -scale) or (d3 < -scale and d4 > scale)
            ):
                return False
    fr = np.linspace(0.0, 1.0, 9)[1:-1]
    pts = a[None] + fr[:, None] * (b - a)[None]
    for loop in obstacles:
        inside = points_in_polygon(pts, loop)
        if inside.any():
            edist = segment_distance(pts[inside], loop, np.roll(loop, -1, axis=0)).min(axis=1)
            if np.any(edist > 1e-9):
                return False
    return True


@dataclass(frozen=True)
class ShortestPath:
    length: float
    cones: tuple
    points: np.ndarray


def shortest_path(obstacles, src, dst) -> ShortestPath:
    """Shortest path from src to dst avoiding the obstacles (visibility graph)."""
    verts = [np.asarray(v, dtype=float) for loop in obstacles for v in np.asarray(loop)]
    nodes = [np.asarray(src, dtype=float)] + verts + [np.asarray(dst, dtype=float)]
    n = len(nodes)
    W = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if _visible(obstacles, nodes[i], nodes[j]):
                W[i, j] = W[j, i] = max(float(np.hypot(*(nodes[i] - nodes[j]))), 1e-300)
    dist, pred = dijkstra(W, directed=False, indices=0, return_predecessors=True)
    if not np.isfinite(dist[n - 1]):
        return ShortestPath(math.inf, (), np.zeros((0, 2)))
    path = [n - 1]
    while path[-1] != 0:
        path.append(int(pred[path[-1]]))
    path.reverse()
    return ShortestPath(float(dist[n - 1]), tuple(k - 1 for k in path[1:-1]), np.array([nodes[k] for k in path]))


# ---------------------------------------------------------------------------
# batched free flight


@dataclass
class Flight:
    status: np.ndarray  # event code that ended the flight
    time: np.ndarray
    sheet: np.ndarray
    pos: np.ndarray
    dir: np.ndarray
    cone: np.ndarray  # cone hit, -1 otherwise
    crossings: np.ndarray


def batch_flight(surface: ConeSurface, sheet, pos, dirs, horizon, depart_cone=-1, eps_hit=None,
                 max_crossings: int = 100000) -> Flight:
    """Straight rays with gluings, each stopped at its first cone hit, escape or horizon."""
    pos = np.array(pos, dtype=float, copy=True).reshape(-1, 2)
    n = len(pos)
    d = np.array(dirs, dtype=float, copy=True).reshape(-1, 2)
    d /= np.linalg.norm(d, axis=1)[:, None]
    sheet = np.array(np.broadcast_to(sheet, (n,)), dtype=int)
    horizon = np.broadcast_to(np.asarray(horizon, dtype=float), (n,))
    dep = np.array(np.broadcast_to(depart_cone, (n,)), dtype=int)
    time = np.zeros(n)
    last = np.full(n, -1)
    crossings = np.zeros(n, dtype=int)
    status = np.full(n, -1)
    cone = np.full(n, -1)
    for _ in range(max_crossings):
        idx = np.flatnonzero(status < 0)
        if len(idx) == 0:
            break
        t, kind, j, side = advance(surface, sheet[idx], pos[idx], d[idx], horizon[idx] - time[idx], dep[idx],
                                   last[idx], eps_hit)
        time[idx] += t
        pos[idx] += t[:, None] * d[idx]
        done = kind != K_EDGE
        status[idx[done]] = kind[done]
        hit = idx[kind == K_CONE]
        cone[hit] = j[kind == K_CONE]
        pos[hit] = surface.cone_pos[cone[hit]]
        for r, e, sd in zip(idx[~done], j[~done], side[~done]):
            s2, sd2 = surface.cross(sheet[r], e, sd)
            if sd2 == sd:
                d[r] = reflect(d[r], surface.edge_dir[e])
            sheet[r] = s2
            last[r] = e
            dep[r] = -1
            crossings[r] += 1
    return Flight(status, time, sheet, pos, d, cone, crossings)
