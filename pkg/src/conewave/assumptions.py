"""Checkers for non-trapping, collinearity of cone points and conjugate cone points."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import qmc

from . import flow
from .flow import (ESCAPED, HORIZON, K_CONE, K_ESCAPE, K_HORIZON, GeometricBranch, RayState, batch_flight,
                   cone_segments, link_distance, trace)
from .surface import ConeSurface, UnsupportedGeometry, min_cone_distance, segment_distance

PASS, FAIL, INDETERMINATE = "Pass", "Fail", "Indeterminate"


def _chain_dict(chain) -> dict:
    return {
        "terminal": chain.terminal,
        "total_time": chain.total_time,
        "segments": [
            {"sheet": s.sheet, "start": s.start.tolist(), "dir": s.dir.tolist(), "length": s.length}
            for s in chain.segments
        ],
        "interactions": [
            {"cone": i.cone, "t_in": i.t_in, "link_in": i.link_in, "link_out": i.link_out, "kind": i.kind}
            for i in chain.interactions
        ],
    }


# ---------------------------------------------------------------------------
# non-trapping


@dataclass
class NonTrappingReport:
    verdict: str
    T0: Optional[float]
    samples: int
    horizon: float
    max_escape: float = 0.0
    margin: float = 0.0
    cell: float = 0.0
    max_bounces: int = 0
    branched: int = 0
    chain: object = None
    start: Optional[RayState] = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "assumption": 1,
            "verdict": self.verdict,
            "parameters": {"samples": self.samples, "horizon": self.horizon, "cell": self.cell},
            "T0": self.T0,
            "max_escape": self.max_escape,
            "margin": self.margin,
            "max_bounces": self.max_bounces,
            "branched_samples": self.branched,
            "witnesses": [],
            "certificates": [],
            "notes": list(self.notes),
        }
        if self.chain is not None:
            out["witnesses"].append(_chain_dict(self.chain))
        if self.T0 is not None:
            out["certificates"].append({"T0": self.T0, "max_escape": self.max_escape, "margin": self.margin})
        return out


def sample_phase_space(surface: ConeSurface, n: int, seed: int = 0):
    """Quasi-uniform (sheet, position, angle) samples over the disc |z| <= R1 minus the obstacles."""
    sampler = qmc.Halton(d=3, scramble=True, seed=seed)
    u = sampler.random(n)
    r = surface.R1 * np.sqrt(u[:, 0])
    phi = 2 * np.pi * u[:, 1]
    pos = np.column_stack([r * np.cos(phi), r * np.sin(phi)])
    theta = 2 * np.pi * u[:, 2]
    sheet = np.arange(n) % surface.n_sheets
    keep = ~surface.closed_inside(pos)
    # clear of the edges so that no sample sits on a glued seam
    if len(surface.edge_a):
        keep &= segment_distance(pos, surface.edge_a, surface.edge_b).min(axis=1) > 1e3 * surface.eps_hit
    return sheet[keep], pos[keep], theta[keep]


def check_nontrapping(surface: ConeSurface, n_samples: int = 8192, horizon: Optional[float] = None,
                      seed: int = 0, extra_starts=(), cap: int = 10 ** 6) -> NonTrappingReport:
    """Sampled test that every geometric geodesic from the interaction region leaves |z| <= R1.

    Rays that hit a cone point are re-traced with full geometric branching.
    The reported T0 is the largest escape time seen plus a margin covering
    one sample cell: (cell + cell * Tmax) * (1 + most edge crossings).
    """
    R1 = surface.R1
    if horizon is None:
        horizon = 10.0 * (2 * R1 + surface.diameter)
    if not horizon > 2 * R1:
        raise ValueError("horizon must exceed 2*R1")
    sheet, pos, theta = sample_phase_space(surface, n_samples, seed)
    starts = [RayState(int(s), p, [math.cos(th), math.sin(th)]) for s, p, th in extra_starts]
    if starts:
        sheet = np.concatenate([sheet, [r.sheet for r in starts]]).astype(int)
        pos = np.concatenate([pos, [r.pos for r in starts]])
        theta = np.concatenate([theta, [math.atan2(r.dir[1], r.dir[0]) for r in starts]])
    fl = batch_flight(surface, sheet, pos, np.column_stack([np.cos(theta), np.sin(theta)]), horizon)
    status, time, bounces = fl.status, fl.time, fl.crossings
    n = len(pos)
    cell = (math.pi * R1 ** 2 * 2 * math.pi * surface.n_sheets / max(n_samples, 1)) ** (1 / 3)
    report = NonTrappingReport(PASS, None, n, horizon, cell=cell)

    def start_of(i):
        return RayState(int(sheet[i]), pos[i].copy(), [math.cos(theta[i]), math.sin(theta[i])])

    esc = status == K_ESCAPE
    max_escape = float(time[esc].max()) if esc.any() else 0.0
    max_bounces = int(bounces.max()) if n else 0
    trapped = np.flatnonzero(status == K_HORIZON)
    if len(trapped):
        i = int(trapped[0])
        res = trace(surface, start_of(i), horizon, GeometricBranch, cap=cap)
        chain = next((c for c in res.chains if c.terminal == HORIZON), res.chains[0])
        report.verdict, report.chain, report.start = FAIL, chain, start_of(i)
        report.notes.append(f"{len(trapped)} of {n} sampled rays still inside at the horizon")
        report.max_escape = max_escape
        return report
    hit = np.flatnonzero(status == K_CONE)
    report.branched = len(hit)
    multi = 0
    for i in hit:
        res = trace(surface, start_of(int(i)), horizon, GeometricBranch, cap=cap)
        if res.truncated:
            report.verdict = INDETERMINATE
            report.notes.append(f"branch cap {cap} reached for sample {int(i)}")
            return report
        for ch in res.chains:
            if ch.terminal == HORIZON:
                report.verdict, report.chain, report.start = FAIL, ch, start_of(int(i))
                return report
            if ch.terminal == ESCAPED:
                max_escape = max(max_escape, ch.total_time)
            multi += ch.n_geometric >= 2
    if multi:
        # such chains may have no approximating family of ordinary rays; kept, but flagged
        report.notes.append(f"{multi} chains with two or more geometric interactions included")
    report.max_escape = max_escape
    report.max_bounces = max_bounces
    report.margin = (cell + cell * max_escape) * (1 + max_bounces)
    report.T0 = max_escape + report.margin
    return report


def trapped_orbit(surface: ConeSurface, cone: int, max_length: float, periods: int = 3):
    """Chain bouncing back and forth along the shortest closed segment from ``cone`` to itself.

    Each return to the cone point is continued by backscatter, so the chain
    never escapes; returns None when no such segment exists.
    """
    loops = [s for s in cone_segments(surface, max_length) if s.alpha == cone and s.beta == cone]
    if not loops:
        return None
    seg = min(loops, key=lambda s: s.length)
    start = flow.depart(surface, cone, seg.link_out, 0.0)
    res = trace(surface, start, periods * seg.length + 10 * surface.eps_hit, flow.Policy("fan", 1), cap=periods + 1)
    return res.chains[0] if res.chains else None


# ---------------------------------------------------------------------------
# collinear cone points


@dataclass
class Witness:
    cones: tuple
    link_distance: float
    lengths: tuple
    chain: object = None

    def to_dict(self) -> dict:
        out = {"cones": list(self.cones), "link_distance": self.link_distance, "lengths": list(self.lengths)}
        if self.chain is not None:
            out["chain"] = _chain_dict(self.chain)
        return out


@dataclass
class CollinearityReport:
    verdict: str
    max_length: float
    witnesses: list
    n_segments: int
    resolution: int
    refined_agree: bool

    @property
    def triples(self) -> set:
        return {w.cones for w in self.witnesses}

    def to_dict(self) -> dict:
        return {
            "assumption": 2,
            "verdict": self.verdict,
            "parameters": {"max_length": self.max_length, "fan": self.resolution,
                           "refinement_agrees": self.refined_agree},
            "segments": self.n_segments,
            "witnesses": [w.to_dict() for w in self.witnesses],
            "certificates": [],
        }


def _witness_chain(surface, first, second):
    start = flow.depart(surface, first.alpha, first.link_out, 0.0)
    horizon = first.length + second.length + 10 * surface.eps_hit
    res = trace(surface, start, horizon, GeometricBranch, cap=10 ** 4)
    for ch in res.chains:
        if ch.cones[:2] == [first.beta, second.beta]:
            return ch
    return None


def check_collinear(surface: ConeSurface, max_length: Optional[float] = None, tol_g: float = flow.TOL_G,
                    n_fan: int = 4096) -> CollinearityReport:
    """Look for geometric geodesics through three cone points.

    Every cone-to-cone segment up to ``max_length`` is enumerated; a pair
    alpha->beta, beta->gamma is a witness when the arrival and departure link
    coordinates at beta are at link distance pi.
    """
    if max_length is None:
        max_length = 4.0 * min_cone_distance(surface)
        if not math.isfinite(max_length):
            max_length = 2.0 * surface.R1
    segs = cone_segments(surface, max_length, n_fan=n_fan)
    witnesses, seen = [], set()
    for a in segs:
        theta = surface.cones[a.beta].angle
        for b in segs.from_cone(a.beta):
            ld = link_distance(a.link_in, b.link_out, theta)
            if abs(ld - math.pi) > tol_g:
                continue
            key = (a.alpha, a.beta, b.beta, round(a.length, 9), round(b.length, 9), round(a.link_out, 9))
            if key in seen:
                continue
            seen.add(key)
            witnesses.append(Witness((a.alpha, a.beta, b.beta), ld, (a.length, b.length),
                                     _witness_chain(surface, a, b)))
    verdict = FAIL if witnesses else PASS
    return CollinearityReport(verdict, max_length, witnesses, len(segs), segs.n_fan, segs.agreed)


# ---------------------------------------------------------------------------
# conjugate cone points


@dataclass(frozen=True)
class JacobiFrame:
    a: float
    b: float


def transport_jacobi(frame: JacobiFrame, length: float) -> JacobiFrame:
    if length < 0:
        raise ValueError("length must be non-negative")
    return JacobiFrame(frame.a + frame.b * length, frame.b)


@dataclass
class ConjugacyReport:
    verdict: str
    Tmax: float
    certificates: list

    def to_dict(self) -> dict:
        return {"assumption": 3, "verdict": self.verdict, "parameters": {"Tmax": self.Tmax},
                "witnesses": [], "certificates": self.certificates}


def conjugacy_certificate(length: float) -> dict:
    """Normal Jacobi fields vanishing at both ends of a segment of the given length.

    W(t) = a + b t with W(0) = 0 and W(length) = 0; the system has
    determinant ``length`` and so only the zero solution.
    """
    M = np.array([[1.0, 0.0], [1.0, length]])
    det = float(np.linalg.det(M))
    sol = np.linalg.solve(M, np.zeros(2)) if det != 0 else None
    return {"matrix": M.tolist(), "det": det,
            "solution": None if sol is None else sol.tolist(), "conjugate": det == 0}


def check_conjugacy(surface: ConeSurface, Tmax: Optional[float] = None, n_fan: int = 4096) -> ConjugacyReport:
    if getattr(surface, "metric", "flat") != "flat":
        raise UnsupportedGeometry("unsupported geometry: conjugacy needs the Jacobi equation of a curved metric")
    if Tmax is None:
        Tmax = 4.0 * min_cone_distance(surface)
        if not math.isfinite(Tmax):
            Tmax = 2.0 * surface.R1
    segs = cone_segments(surface, Tmax, n_fan=n_fan)
    certs, verdict = [], PASS
    for s in segs:
        c = conjugacy_certificate(s.length)
        c.update({"alpha": s.alpha, "beta": s.beta, "length": s.length, "link_out": s.link_out})
        if c["conjugate"] or any(abs(v) > 0 for v in c["solution"]):
            verdict = FAIL
        certs.append(c)
    return ConjugacyReport(verdict, Tmax, certs)
