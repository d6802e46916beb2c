"""Phase-space partitions, words of propagators and their regularity bookkeeping.

A word lists partition elements in operator order: the flow runs from the
last letter to the first, and ``times[l]`` is the travel time from
``letters[l + 1]`` to ``letters[l]``.  Each adjacent pair gets a tag:

    G  joined through a cone point by a geometric continuation
    D  joined through a cone point, but only diffractively
    N  joined by a free path that meets no cone point
    X  not joined at all
    ?  undecided
"""
from __future__ import annotations

import csv
import functools
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import flow
from .flow import K_CONE, K_HORIZON, batch_flight, cone_segments
from .surface import TWO_PI, ConeSurface, min_cone_distance


class PartitionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# letters


@dataclass(frozen=True)
class Cell:
    """Phase-space box: sheet x [x0, x0+s] x [y0, y0+s] x [th0, th0+ds]."""

    sheet: int
    ix: int
    iy: int
    it: int

    def __str__(self):
        return f"A{self.sheet}.{self.ix}.{self.iy}.{self.it}"


@dataclass(frozen=True)
class Psi:
    cone: int

    def __str__(self):
        return f"psi{self.cone}"


@dataclass(frozen=True)
class Upsilon:
    def __str__(self):
        return "Y"


# ---------------------------------------------------------------------------
# partition


@dataclass
class Partition:
    surface: ConeSurface
    delta_A: float
    delta_psi: float
    side: float  # spatial side of a cell
    n_theta: int
    origin: float
    mask: np.ndarray  # (sheets, nx, nx) admissible spatial cells
    seed: int = 0

    @property
    def dtheta(self) -> float:
        return TWO_PI / self.n_theta

    @property
    def n_patches(self) -> int:
        return int(self.mask.sum()) * self.n_theta

    @property
    def cell_diameter(self) -> float:
        return math.sqrt(2 * self.side ** 2 + self.dtheta ** 2)

    def region(self, sheet: int, pos, theta: float):
        """Partition element containing a phase-space point."""
        pos = np.asarray(pos, dtype=float)
        S = self.surface
        if S.n_cones:
            d = np.hypot(*(S.cone_pos - pos).T)
            k = int(np.argmin(d))
            if d[k] < self.delta_psi:
                return Psi(k)
        if np.hypot(*pos) > S.R0:
            return Upsilon()
        ix, iy = np.floor((pos - self.origin) / self.side).astype(int)
        it = int(math.floor((theta % TWO_PI) / self.dtheta)) % self.n_theta
        return Cell(int(sheet), int(ix), int(iy), it)

    def is_patch(self, cell: Cell) -> bool:
        nx = self.mask.shape[1]
        return (0 <= cell.ix < nx and 0 <= cell.iy < nx and 0 <= cell.sheet < self.mask.shape[0]
                and bool(self.mask[cell.sheet, cell.ix, cell.iy]))

    def cell_box(self, cell: Cell):
        x0 = self.origin + cell.ix * self.side
        y0 = self.origin + cell.iy * self.side
        return (x0, y0, self.side), (cell.it * self.dtheta, self.dtheta)

    def patches(self):
        for s, ix, iy in zip(*np.nonzero(self.mask)):
            for it in range(self.n_theta):
                yield Cell(int(s), int(ix), int(iy), it)

    def audit(self, n: int = 20000, seed: Optional[int] = None) -> dict:
        """Fraction of sampled phase points of the disc R1 that land in exactly one element."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        S = self.surface
        r = S.R1 * np.sqrt(rng.random(n))
        phi = TWO_PI * rng.random(n)
        pos = np.column_stack([r * np.cos(phi), r * np.sin(phi)])
        theta = TWO_PI * rng.random(n)
        sheet = rng.integers(0, S.n_sheets, n)
        keep = ~S.closed_inside(pos)
        counts = {"A": 0, "psi": 0, "Y": 0, "uncovered": 0}
        for s, p, th in zip(sheet[keep], pos[keep], theta[keep]):
            reg = self.region(int(s), p, float(th))
            if isinstance(reg, Cell):
                counts["A" if self.is_patch(reg) else "uncovered"] += 1
            elif isinstance(reg, Psi):
                counts["psi"] += 1
            else:
                counts["Y"] += 1
        total = int(keep.sum())
        counts["total"] = total
        counts["coverage"] = 1.0 - counts["uncovered"] / max(total, 1)
        return counts


def build_partition(surface: ConeSurface, delta_A: float, delta_psi: float, seed: int = 0) -> Partition:
    """Cover of the unit tangent bundle over the disc R0 by boxes of diameter below delta_A.

    Cells meeting the cone neighbourhoods (radius delta_psi) are kept; the
    region class of a point is decided by ``Partition.region``.
    """
    if not delta_A > 0:
        raise PartitionError("delta_A must be positive")
    L = min_cone_distance(surface) if surface.n_cones >= 2 else math.inf
    if not delta_psi < L / 200:
        raise PartitionError(f"constraint violation: delta_psi = {delta_psi} must be below L/200 = {L / 200}")
    radius = 0.49 * delta_A
    side = 2 * radius / math.sqrt(3.0)
    n_theta = max(int(math.ceil(TWO_PI / side)), 1)
    R0 = surface.R0
    nx = int(math.ceil(2 * R0 / side)) + 2
    origin = -side * nx / 2
    centers = origin + (np.arange(nx) + 0.5) * side
    X, Y = np.meshgrid(centers, centers, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    h2 = side / math.sqrt(2.0)
    # a cell is kept when it meets the disc and is not buried inside an obstacle
    in_disc = np.hypot(pts[:, 0], pts[:, 1]) < R0 + h2
    inside = surface.closed_inside(pts)
    if len(surface.edge_a):
        from .surface import segment_distance
        near_edge = segment_distance(pts, surface.edge_a, surface.edge_b).min(axis=1) < h2
        inside &= ~near_edge
    spatial = (in_disc & ~inside).reshape(nx, nx)
    if R0 <= 0:
        spatial[:] = False
    mask = np.repeat(spatial[None], surface.n_sheets, axis=0)
    return Partition(surface, delta_A, delta_psi, side, n_theta, origin, mask, seed)


# ---------------------------------------------------------------------------
# words and pair tags


@dataclass
class Word:
    letters: tuple
    times: tuple
    tags: tuple = ()

    def __post_init__(self):
        if len(self.times) != len(self.letters) - 1:
            raise ValueError("a word needs one time per adjacent pair of letters")
        if any(not t > 0 for t in self.times):
            raise ValueError("times must be positive")

    def __str__(self):
        return " ".join(str(x) for x in self.letters)


def _letter_samples(part: Partition, letter, m: int):
    """Sample positions of a letter: (sheets, positions, angle interval or None)."""
    S = part.surface
    if isinstance(letter, Cell):
        (x0, y0, s), (t0, dt) = part.cell_box(letter)
        g = (np.arange(m) + 0.5) / m
        X, Y = np.meshgrid(x0 + g * s, y0 + g * s, indexing="ij")
        pos = np.column_stack([X.ravel(), Y.ravel()])
        sheets = np.full(len(pos), letter.sheet)
        return sheets, pos, (t0, dt), s / m
    if isinstance(letter, Psi):
        r = part.delta_psi * np.sqrt((np.arange(m * m) + 0.5) / (m * m))
        phi = np.arange(m * m) * 2.399963229728653
        pos = S.cone_pos[letter.cone] + np.column_stack([r * np.cos(phi), r * np.sin(phi)])
        pos = np.repeat(pos, S.n_sheets, axis=0)
        sheets = np.tile(np.arange(S.n_sheets), m * m)
        return sheets, pos, None, part.delta_psi / m
    # Upsilon: the annulus R0 < |z| < R1
    k = m * m
    r = np.sqrt(S.R0 ** 2 + (S.R1 ** 2 - S.R0 ** 2) * (np.arange(k) + 0.5) / k)
    phi = np.arange(k) * 2.399963229728653
    pos = np.column_stack([r * np.cos(phi), r * np.sin(phi)])
    pos = np.repeat(pos, S.n_sheets, axis=0)
    sheets = np.tile(np.arange(S.n_sheets), k)
    return sheets, pos, None, (S.R1 - S.R0) / m


def _angle_in(theta, interval, slack):
    if interval is None:
        return np.ones(np.shape(theta), dtype=bool)
    t0, dt = interval
    u = (np.asarray(theta) - t0 + slack) % TWO_PI
    return u <= dt + 2 * slack


def _contains(part: Partition, letter, sheets, pos, dirs, slack):
    S = part.surface
    theta = np.arctan2(dirs[:, 1], dirs[:, 0])
    if isinstance(letter, Cell):
        (x0, y0, s), interval = part.cell_box(letter)
        ok = (sheets == letter.sheet)
        ok &= (pos[:, 0] >= x0 - slack) & (pos[:, 0] <= x0 + s + slack)
        ok &= (pos[:, 1] >= y0 - slack) & (pos[:, 1] <= y0 + s + slack)
        return ok & _angle_in(theta, interval, slack)
    if isinstance(letter, Psi):
        return np.hypot(*(pos - S.cone_pos[letter.cone]).T) <= part.delta_psi + slack
    return np.hypot(pos[:, 0], pos[:, 1]) >= S.R0 - slack


def _aimed(part: Partition, letter, cone: int, m: int, outgoing: bool):
    """Sample points of ``letter`` whose direction points at (or away from) ``cone`` within the letter.

    Returns sheets, distances to the cone and link coordinates of the
    sample positions seen from the cone, for the straight unobstructed legs.
    """
    S = part.surface
    sheets, pos, interval, h = _letter_samples(part, letter, m)
    c = S.cone_pos[cone]
    v = c - pos
    dist = np.hypot(v[:, 0], v[:, 1])
    good = dist > 1e-12
    u = np.zeros_like(v)
    u[good] = v[good] / dist[good, None]
    motion = -u if outgoing else u
    theta = np.arctan2(motion[:, 1], motion[:, 0])
    slack = h / np.maximum(dist, h)  # angular size of a sample cell seen from the cone
    good &= _angle_in(theta, interval, slack)
    good &= ~S.closed_inside(pos)
    idx = np.flatnonzero(good)
    if len(idx) == 0:
        return np.zeros(0, int), np.zeros(0), np.zeros(0), h
    # the leg towards the cone must be free of edges and other cone points
    fl = batch_flight(S, sheets[idx], pos[idx], u[idx], dist[idx] + 10 * S.eps_hit)
    ok = (fl.status == K_CONE) & (fl.cone == cone) & (fl.crossings == 0)
    idx = idx[ok]
    links = np.array([S.cones[cone].link_of(int(sheets[i]), pos[i] - c) for i in idx])
    return sheets[idx], dist[idx], links, h


@dataclass
class PairResult:
    tag: str
    geometric: bool = False
    diffractive: bool = False
    free: bool = False
    cones: tuple = ()


def classify_pair(part: Partition, source, target, t: float, m: int = 8, cone_reach: Optional[float] = None
                  ) -> PairResult:
    """Tag of the pair where the flow runs from ``source`` for time ``t`` into ``target``.

    At most one cone interaction is searched for.  Sample points of the
    source aimed at a cone give arrival times and links; sample points of the
    target aimed away from the same cone give departure times; a diffractive
    connection needs the times to add up to ``t``, a geometric one also needs
    the exact continuation at link distance pi to land in the target.
    """
    S = part.surface
    res = PairResult("X")
    # free paths
    sheets, pos, interval, h = _letter_samples(part, source, m)
    k = m
    if interval is None:
        angles = (np.arange(2 * k * k) + 0.5) * TWO_PI / (2 * k * k)
        ang_step = TWO_PI / (2 * k * k)
    else:
        angles = interval[0] + (np.arange(k) + 0.5) * interval[1] / k
        ang_step = interval[1] / k
    P = np.repeat(pos, len(angles), axis=0)
    Sh = np.repeat(sheets, len(angles))
    A = np.tile(angles, len(pos))
    keep = ~S.closed_inside(P)
    P, Sh, A = P[keep], Sh[keep], A[keep]
    slack = (1.0 + t) * max(h, ang_step)
    if len(P):
        fl = batch_flight(S, Sh, P, np.column_stack([np.cos(A), np.sin(A)]), t)
        done = fl.status == K_HORIZON
        if np.any(_contains(part, target, fl.sheet[done], fl.pos[done], fl.dir[done], slack)):
            res.free = True
    # one cone interaction
    for cone in range(S.n_cones):
        s_src, a, lin, hs = _aimed(part, source, cone, m, outgoing=False)
        if len(a) == 0 or a.min() > t:
            continue
        s_dst, b, lout, hd = _aimed(part, target, cone, m, outgoing=True)
        slack_t = 2 * (hs + hd)
        if len(b):
            bs = np.sort(b)
            need = t - a
            j = np.clip(np.searchsorted(bs, need), 1, len(bs) - 1) if len(bs) > 1 else np.zeros(len(a), int)
            gap = np.minimum(np.abs(bs[j] - need), np.abs(bs[j - 1] - need)) if len(bs) > 1 else np.abs(bs[0] - need)
            if np.any(gap <= slack_t):
                res.diffractive = True
                res.cones += (cone,)
        # geometric: follow both continuations exactly
        sel = np.flatnonzero(a < t)
        starts_s, starts_d, rem = [], [], []
        for i in sel:
            for lo in flow.continuations(S.cones[cone], lin[i], flow.GeometricBranch):
                sh, d = S.cones[cone].direction(lo)
                starts_s.append(sh)
                starts_d.append(d)
                rem.append(t - a[i])
        if starts_s:
            fl = batch_flight(S, np.array(starts_s), np.repeat(S.cone_pos[cone][None], len(starts_s), axis=0),
                              np.array(starts_d), np.array(rem), depart_cone=cone)
            done = fl.status == K_HORIZON
            slack_g = (1.0 + t) * hs
            if np.any(_contains(part, target, fl.sheet[done], fl.pos[done], fl.dir[done], slack_g)):
                res.geometric = True
                res.diffractive = True
                if cone not in res.cones:
                    res.cones += (cone,)
    if res.geometric:
        res.tag = "G"
    elif res.diffractive:
        res.tag = "D"
    elif res.free:
        res.tag = "N"
    return res


def classify_word(part: Partition, word: Word, m: int = 8) -> tuple:
    tags = []
    for l, t in enumerate(word.times):
        # flow runs from letters[l + 1] into letters[l]
        tags.append(classify_pair(part, word.letters[l + 1], word.letters[l], t, m).tag)
    word.tags = tuple(tags)
    return word.tags


def interaction_pattern(tags: Sequence[str]) -> str:
    """Cone-interaction tags in flow order (last pair first)."""
    return "".join(t for t in reversed(tuple(tags)) if t in ("G", "D"))


# ---------------------------------------------------------------------------
# forbidden words


@dataclass
class Violation:
    word: Word
    cones: tuple
    pattern: str


@dataclass
class ScanResult:
    violations: list
    candidates: int
    complete: bool = True
    words: list = field(default_factory=list)  # every classified candidate

    def __iter__(self):
        return iter(self.violations)

    def __len__(self):
        return len(self.violations)

    def __bool__(self):
        return bool(self.violations)


def _admissible(part: Partition, sheet, pos, theta):
    S = part.surface
    if S.closed_inside(np.asarray(pos)[None])[0]:
        return None
    reg = part.region(sheet, pos, theta)
    if isinstance(reg, Cell) and part.is_patch(reg):
        return reg
    return None


def forbidden_scan(part: Partition, max_word_len: int = 4, horizon: Optional[float] = None, m: int = 8,
                   cap: int = 10000) -> ScanResult:
    """Four-letter words with three cone interactions whose middle one is geometric.

    Candidates follow pairs of cone-to-cone segments alpha->beta->gamma: one
    letter before alpha, one on each segment, one after gamma.
    """
    if max_word_len < 4:
        return ScanResult([], 0)
    S = part.surface
    if horizon is None:
        horizon = 4.0 * min_cone_distance(S) if S.n_cones >= 2 else 0.0
    if not math.isfinite(horizon) or horizon <= 0:
        return ScanResult([], 0)
    segs = cone_segments(S, horizon)
    off = part.delta_psi + 2 * part.cell_diameter
    out, n, seen = [], 0, []
    for s1 in segs:
        for s2 in segs.from_cone(s1.beta):
            if n >= cap:
                return ScanResult(out, n, False, seen)
            ca, cc = S.cones[s1.alpha], S.cones[s2.beta]
            # before alpha, moving into it along the straight continuation of s1
            sh0, d0 = ca.direction(s1.link_out + math.pi)
            p0 = S.cone_pos[s1.alpha] + off * d0
            l0 = _admissible(part, sh0, p0, math.atan2(-d0[1], -d0[0]))
            # middles of both segments
            st1 = flow.trace_one(S, flow.depart(S, s1.alpha, s1.link_out, 0.0), s1.length / 2)
            st2 = flow.trace_one(S, flow.depart(S, s2.alpha, s2.link_out, 0.0), s2.length / 2)
            l1 = _admissible(part, st1.final.sheet, st1.final.pos, math.atan2(st1.final.dir[1], st1.final.dir[0]))
            l2 = _admissible(part, st2.final.sheet, st2.final.pos, math.atan2(st2.final.dir[1], st2.final.dir[0]))
            # after gamma, leaving along the straight continuation of s2
            sh3, d3 = cc.direction(s2.link_in + math.pi)
            p3 = S.cone_pos[s2.beta] + off * d3
            l3 = _admissible(part, sh3, p3, math.atan2(d3[1], d3[0]))
            if None in (l0, l1, l2, l3):
                continue
            n += 1
            word = Word((l3, l2, l1, l0), (off + s2.length / 2, (s1.length + s2.length) / 2, off + s1.length / 2))
            tags = classify_word(part, word, m)
            seen.append(word)
            pattern = interaction_pattern(tags)
            if len(pattern) == 3 and all(t in "GD" for t in tags) and tags[1] == "G":
                out.append(Violation(word, (s1.alpha, s1.beta, s2.beta), pattern))
    return ScanResult(out, n, True, seen)


# ---------------------------------------------------------------------------
# regularity ledger


@functools.total_ordering
@dataclass(frozen=True)
class Order:
    """Sobolev order ``value`` or ``value - eps`` (below value by an arbitrary small amount)."""

    value: Fraction
    minus_eps: bool = False

    def __lt__(self, other):
        if self.value != other.value:
            return self.value < other.value
        return self.minus_eps and not other.minus_eps

    def __str__(self):
        v = str(self.value)
        return f"{v}-eps" if self.minus_eps else v


SMOOTHED, ESCAPED, RESIDUAL, INDETERMINATE = "Smoothed", "Escaped", "Residual", "Indeterminate"


@dataclass(frozen=True)
class LedgerEntry:
    kind: str
    order: Optional[Order]
    rule: str
    pattern: str
    gain: int  # nonfocusing gain n - 1

    def __str__(self):
        return f"{self.kind}({self.order})" if self.order is not None else self.kind


def _frac(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(str(x))


def smoothing_ledger(word, n: int = 2, s_in=0) -> LedgerEntry:
    """Regularity of the output of a word's propagator for input in H^s_in.

    ``word`` is a Word with tags or a string of tags.  Only the cone
    interactions (G and D) enter the pattern; at most three are allowed.
    """
    tags = word.tags if isinstance(word, Word) else tuple(str(word))
    if n < 2:
        raise ValueError("dimension must be at least 2")
    s = _frac(s_in)
    gain = n - 1
    raw = "".join(tags)
    if "?" in raw:
        return LedgerEntry(INDETERMINATE, None, "undecided tag", raw, gain)
    if "X" in raw:
        return LedgerEntry(RESIDUAL, None, "unrealizable pair", raw, gain)
    pattern = "".join(t for t in raw if t in "GD")
    if len(pattern) > 3:
        raise ValueError("more than three cone interactions; split the word first")
    if "DD" in pattern:
        return LedgerEntry(SMOOTHED, Order(s + Fraction(gain, 2), True), "two successive diffractions", pattern, gain)
    if len(pattern) == 3 and pattern[1] == "G":
        return LedgerEntry(RESIDUAL, None, "geometric middle interaction is not realizable", pattern, gain)
    if pattern == "GDG":
        return LedgerEntry(ESCAPED, Order(s), "reaches the outgoing set", pattern, gain)
    return LedgerEntry(ESCAPED, Order(s), "fewer than three interactions", pattern, gain)


def ledger_csv(rows) -> str:
    """CSV (word, times, tags, rule, outputOrder) for (Word, LedgerEntry) rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["word", "times", "tags", "rule", "outputOrder"])
    for word, entry in rows:
        w.writerow([str(word), " ".join(f"{t:.9g}" for t in word.times), "".join(word.tags), entry.rule, str(entry)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class Schedule:
    k: int
    T_s: float
    tau_min: Optional[float] = None
    tau_max: Optional[float] = None


def huygens_schedule(s_target, n: int, T0: float, delta_psi: Optional[float] = None,
                     L: Optional[float] = None) -> Schedule:
    """Number k of smoothing rounds for s_target derivatives and the waiting time 5 k T0."""
    s = _frac(s_target)
    if s < 0 or n < 2 or not T0 > 0:
        raise ValueError("need s_target >= 0, n >= 2, T0 > 0")
    k = math.ceil(2 * s / (n - 1))
    tau_min = tau_max = None
    if delta_psi is not None and L is not None:
        tau_min, tau_max = 2 * delta_psi, L / 50
        if not tau_min < tau_max:
            raise ValueError("empty range for the cone offset: need 2*delta_psi < L/50")
    return Schedule(int(k), 5 * k * T0, tau_min, tau_max)
