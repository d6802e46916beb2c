"""Leapfrog finite differences for u_tt = Laplace(u) + f outside polygonal obstacles.

Nodes sit at cell centres x_i = -D + (i + 1/2) h, so an obstacle face that
lies on a multiple of h falls exactly half way between a free node and an
obstacle node.  Boundary handling for a free node with ``n_obs`` obstacle
neighbours:

    Neumann    the obstacle neighbours are dropped (graph Laplacian)
    Dirichlet  odd ghost value -u, adding -2 * n_obs * u
    doubled    the neighbour across the face is the same node on the other
               sheet, adding n_obs * (u_other - u)

With these choices the sheet sum of a doubled run obeys the Neumann scheme
and the sheet difference obeys the Dirichlet scheme exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np
from scipy import signal, special

from .surface import DIRICHLET, NEUMANN, ConeSurface, points_in_polygon

MODE_NEUMANN, MODE_DIRICHLET, MODE_DOUBLED = 0, 1, 2


class CFLError(ValueError):
    pass


class SourceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class GridSpec:
    h: float
    dt: float
    D: float  # half-width of the square domain
    T: float
    sponge: float = 0.0  # width of the absorbing layer
    sigma_max: Optional[float] = None

    @property
    def n(self) -> int:
        return int(round(2 * self.D / self.h))

    @property
    def steps(self) -> int:
        return int(math.ceil(self.T / self.dt - 1e-9))

    @property
    def axis(self) -> np.ndarray:
        return -self.D + (np.arange(self.n) + 0.5) * self.h

    def check(self):
        if not self.dt <= self.h / math.sqrt(2.0):
            raise CFLError(f"CFL violation: dt = {self.dt} exceeds h/sqrt(2) = {self.h / math.sqrt(2.0)}")
        if self.dt <= 0 or self.h <= 0:
            raise ValueError("h and dt must be positive")
        if self.sponge and self.sponge < 20 * self.h:
            raise ValueError("sponge narrower than 20 cells")

    @classmethod
    def make(cls, h, D, T, cfl=0.6, sponge=0.0, sigma_max=None):
        return cls(h, cfl * h, D, T, sponge, sigma_max)


@dataclass(frozen=True)
class Source:
    """Gaussian in space times a Ricker wavelet in time."""

    x: float
    y: float
    f0: float
    sigma: float
    sheet: int = 0
    amplitude: float = 1.0
    t0: Optional[float] = None

    @property
    def delay(self) -> float:
        return 1.7 / self.f0 if self.t0 is None else self.t0

    def wavelet(self, t):
        a = (math.pi * self.f0 * (np.asarray(t) - self.delay)) ** 2
        return self.amplitude * (1.0 - 2.0 * a) * np.exp(-a)


# ---------------------------------------------------------------------------
# kernels


@numba.njit(parallel=True, cache=True, fastmath=True)
def _leapfrog(u0, u1, diag, cross, g, c2, bi, bj):
    """One step in place: u0 (level n-1) is overwritten with level n+1.

    Arrays carry a one-node zero pad.  ``diag`` holds the integer diagonal of
    the stencil and ``cross`` the coupling to the other sheet (shape (1, 1)
    when there is none).  ``g`` is the padded 1-D damping profile times dt/2;
    a node is damped by the larger of its row and column values.  Obstacle
    nodes (bi, bj) are reset to zero afterwards.
    """
    S, N2, _ = u1.shape
    coupled = cross.shape[0] > 1
    for i in numba.prange(1, N2 - 1):
        gi = g[i]
        dr = diag[i]
        for s in range(S):
            a = u1[s, i - 1]
            b = u1[s, i]
            c = u1[s, i + 1]
            o = u0[s, i]
            if coupled:
                cr = cross[i]
                q = u1[1 - s, i]
                for j in range(1, N2 - 1):
                    v = b[j]
                    gg = max(gi, g[j])
                    lap = a[j] + c[j] + b[j - 1] + b[j + 1] + np.float64(dr[j]) * v + np.float64(cr[j]) * q[j]
                    o[j] = (2.0 * v - (1.0 - gg) * o[j] + c2 * lap) / (1.0 + gg)
            else:
                for j in range(1, N2 - 1):
                    v = b[j]
                    gg = max(gi, g[j])
                    lap = a[j] + c[j] + b[j - 1] + b[j + 1] + np.float64(dr[j]) * v
                    o[j] = (2.0 * v - (1.0 - gg) * o[j] + c2 * lap) / (1.0 + gg)
    for s in range(S):
        for k in range(len(bi)):
            u0[s, bi[k], bj[k]] = 0.0


@numba.njit(parallel=True, cache=True)
def _laplacian_dot(u, v, diag, cross):
    """Row partial sums of <L u, v> (without the 1/h^2 factor), padded arrays."""
    S, N2, _ = u.shape
    coupled = cross.shape[0] > 1
    out = np.zeros(N2)
    for i in numba.prange(1, N2 - 1):
        acc = 0.0
        for s in range(S):
            for j in range(1, N2 - 1):
                c = u[s, i, j]
                lap = u[s, i - 1, j] + u[s, i + 1, j] + u[s, i, j - 1] + u[s, i, j + 1] + diag[i, j] * c
                if coupled:
                    lap += cross[i, j] * u[1 - s, i, j]
                acc += lap * v[s, i, j]
        out[i] = acc
    return out


@numba.njit(parallel=True, cache=True)
def _local_energy(u0, u1, free, chi, inv_dt, inv_h):
    """Row partial sums of chi * (u_t^2 + grad u1 . grad u0) between levels n-1 and n.

    Forward differences, taken only between two free nodes; padded arrays.
    """
    S, N2, _ = u1.shape
    out = np.zeros(N2)
    for i in numba.prange(1, N2 - 1):
        acc = 0.0
        for s in range(S):
            for j in range(1, N2 - 1):
                w = chi[s, i - 1, j - 1]
                if w == 0.0 or not free[i, j]:
                    continue
                ut = (u1[s, i, j] - u0[s, i, j]) * inv_dt
                e = ut * ut
                if free[i + 1, j]:
                    e += (u1[s, i + 1, j] - u1[s, i, j]) * (u0[s, i + 1, j] - u0[s, i, j]) * inv_h * inv_h
                if free[i, j + 1]:
                    e += (u1[s, i, j + 1] - u1[s, i, j]) * (u0[s, i, j + 1] - u0[s, i, j]) * inv_h * inv_h
                acc += w * e
        out[i] = acc
    return out


# ---------------------------------------------------------------------------
# solver


def obstacle_mask(obstacles, axis: np.ndarray) -> np.ndarray:
    """True at nodes inside an obstacle (staircase approximation)."""
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    inside = np.zeros(len(pts), dtype=bool)
    for loop in obstacles:
        loop = np.asarray(loop, dtype=float)
        lo, hi = loop.min(axis=0), loop.max(axis=0)
        box = np.all((pts >= lo) & (pts <= hi), axis=1)
        inside[box] |= points_in_polygon(pts[box], loop)
    return inside.reshape(len(axis), len(axis))


def sponge_profile(grid: GridSpec) -> np.ndarray:
    """Damping along one axis; the 2-D damping is the max of the row and column values."""
    ax = grid.axis
    if not grid.sponge:
        return np.zeros(grid.n)
    depth = np.maximum(np.abs(ax) - (grid.D - grid.sponge), 0.0) / grid.sponge
    smax = grid.sigma_max if grid.sigma_max is not None else 3.0 * math.log(1e4) / grid.sponge
    return smax * depth ** 2


class Solver:
    """Leapfrog state for one or two coupled sheets."""

    def __init__(self, grid: GridSpec, obstacles=(), mode: int = MODE_DIRICHLET, sheets: int = 1):
        grid.check()
        if mode == MODE_DOUBLED and sheets != 2:
            raise ValueError("doubled mode needs two sheets")
        self.grid = grid
        self.mode = mode
        self.sheets = sheets
        ax = grid.axis
        self.axis = ax
        n = grid.n
        blocked = obstacle_mask(obstacles, ax) if len(obstacles) else np.zeros((n, n), dtype=bool)
        self.free = ~blocked
        fp = np.pad(self.free, 1, constant_values=False)
        bp = np.pad(blocked, 1, constant_values=False)

        def neighbours(m):
            out = np.zeros_like(m, dtype=np.int8)
            out[1:-1, 1:-1] = (m[:-2, 1:-1].astype(np.int8) + m[2:, 1:-1] + m[1:-1, :-2] + m[1:-1, 2:])
            return out

        nfree, nobs = neighbours(fp), neighbours(bp)
        weight = {MODE_NEUMANN: 0, MODE_DIRICHLET: 2, MODE_DOUBLED: 1}[mode]
        self.diag = np.where(fp, -nfree - weight * nobs, 0).astype(np.int8)
        self.cross = np.where(fp, nobs, 0).astype(np.int8) if mode == MODE_DOUBLED else np.zeros((1, 1), np.int8)
        self.free_padded = fp
        bi, bj = np.nonzero(bp)
        self._bi, self._bj = bi.astype(np.int64), bj.astype(np.int64)
        self.sx = sponge_profile(grid)
        self._g = np.pad(self.sx * 0.5 * grid.dt, 1)
        self.c2 = (grid.dt / grid.h) ** 2
        shape = (sheets, n + 2, n + 2)
        self._prev = np.zeros(shape)
        self._cur = np.zeros(shape)
        self.n = 0  # u1 holds the field at time n * dt
        self.sources = []

    @property
    def t(self) -> float:
        return self.n * self.grid.dt

    @property
    def u0(self) -> np.ndarray:
        """Field one step back."""
        return self._prev[:, 1:-1, 1:-1]

    @property
    def u1(self) -> np.ndarray:
        return self._cur[:, 1:-1, 1:-1]

    u = u1

    def node(self, x, y) -> tuple[int, int]:
        g = self.grid
        return (int(np.clip(np.floor((x + g.D) / g.h), 0, g.n - 1)),
                int(np.clip(np.floor((y + g.D) / g.h), 0, g.n - 1)))

    def add_source(self, src: Source, obstacles=()):
        g = self.grid
        lam = 1.0 / src.f0
        if lam < 10 * g.h:
            raise SourceError(f"wavelength {lam} shorter than 10 grid cells")
        if not 0 <= src.sheet < self.sheets:
            raise SourceError("source sheet out of range")
        ax = self.axis
        r = 6.0 * src.sigma
        ix = np.flatnonzero(np.abs(ax - src.x) <= r)
        iy = np.flatnonzero(np.abs(ax - src.y) <= r)
        if not len(ix) or not len(iy):
            raise SourceError("source outside the grid")
        X, Y = np.meshgrid(ax[ix], ax[iy], indexing="ij")
        w = np.exp(-((X - src.x) ** 2 + (Y - src.y) ** 2) / (2 * src.sigma ** 2))
        w[(X - src.x) ** 2 + (Y - src.y) ** 2 > r * r] = 0.0
        if len(obstacles):
            pts = np.column_stack([X.ravel(), Y.ravel()])
            for loop in obstacles:
                if points_in_polygon(np.array([[src.x, src.y]]), np.asarray(loop))[0]:
                    raise SourceError("source inside obstacle")
            near = np.zeros(len(pts), dtype=bool)
            for loop in obstacles:
                near |= points_in_polygon(pts, np.asarray(loop))
            if np.any(near & (w.ravel() > 1e-12)):
                raise SourceError("source support overlaps an obstacle")
            verts = np.concatenate([np.asarray(o, dtype=float) for o in obstacles])
            if np.min(np.hypot(*(verts - [src.x, src.y]).T)) < 5 * g.h:
                raise SourceError("source closer than 5h to a vertex")
        w *= self.free[np.ix_(ix, iy)]
        self.sources.append((src, ix, iy, w))

    def _force(self, t: float, out: np.ndarray, scale: float):
        for src, ix, iy, w in self.sources:
            out[src.sheet, ix[0] + 1:ix[-1] + 2, iy[0] + 1:iy[-1] + 2] += scale * float(src.wavelet(t)) * w

    def step(self):
        g = self.grid
        _leapfrog(self._prev, self._cur, self.diag, self.cross, self._g, self.c2, self._bi, self._bj)
        if self.sources:
            self._force(self.t, self._prev, g.dt ** 2)  # sources never sit in the sponge
        self._prev, self._cur = self._cur, self._prev
        self.n += 1

    def energy(self) -> float:
        """Discrete energy between the two stored levels (conserved without sponge and sources)."""
        g = self.grid
        v = (self._cur - self._prev) / g.dt
        kin = 0.5 * float(np.sum(v * v)) * g.h ** 2
        pot = -0.5 * float(np.sum(_laplacian_dot(self._cur, self._prev, self.diag, self.cross)))
        return kin + pot

    def local_energy(self, chi: np.ndarray) -> float:
        """Energy in the weight ``chi`` between the two stored levels (time t - dt/2)."""
        g = self.grid
        return 0.5 * g.h ** 2 * float(np.sum(_local_energy(self._prev, self._cur, self.free_padded, chi,
                                                           1.0 / g.dt, 1.0 / g.h)))


# ---------------------------------------------------------------------------
# runs


@dataclass
class Probe:
    x: float
    y: float
    sheet: int = 0


@dataclass
class ProbeSeries:
    t: np.ndarray
    u: np.ndarray  # (steps, probes)
    dudt: np.ndarray
    probes: list
    E_chi: Optional[np.ndarray] = None
    energy: Optional[np.ndarray] = None
    dt: float = 0.0
    f0: float = 1.0

    def csv_rows(self):
        for k in range(len(self.t)):
            for p in range(len(self.probes)):
                row = [f"{self.t[k]:.9g}", p, f"{self.u[k, p]:.9e}", f"{self.dudt[k, p]:.9e}"]
                row.append(f"{self.E_chi[k]:.9e}" if self.E_chi is not None else "")
                yield row


@dataclass
class WaveRun:
    grid: GridSpec
    u: np.ndarray  # final field, (sheets, n, n)
    series: ProbeSeries
    free: np.ndarray
    mode: int
    snapshots: list = field(default_factory=list)


def cutoff(axis: np.ndarray, R: float, sheets: int = 1, flat: float = 0.5) -> np.ndarray:
    """Smooth cutoff: 1 for |z| <= flat*R, cos^2 decay to 0 at |z| = R."""
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    r = np.hypot(X, Y)
    s = np.clip((r - flat * R) / ((1 - flat) * R), 0.0, 1.0)
    chi = np.cos(0.5 * np.pi * s) ** 2
    chi[r >= R] = 0.0
    return np.repeat(chi[None], sheets, axis=0)


def _probe_nodes(solver: Solver, probes):
    idx = []
    for p in probes:
        i, j = solver.node(p.x, p.y)
        if not solver.free[i, j]:
            raise SourceError(f"probe ({p.x}, {p.y}) inside an obstacle")
        idx.append((p.sheet, i, j))
    return tuple(np.array(v) for v in zip(*idx)) if idx else (np.zeros(0, int),) * 3


def simulate(solver: Solver, probes: Sequence[Probe] = (), chi: Optional[np.ndarray] = None,
             energy_audit: bool = False, snapshot_every: int = 0, callback=None) -> WaveRun:
    g = solver.grid
    probes = list(probes)
    ps, pi, pj = _probe_nodes(solver, probes)
    steps = g.steps
    u_hist = np.zeros((steps + 1, len(probes)))
    du = np.zeros((steps + 1, len(probes)))
    e_chi = np.zeros(steps + 1) if chi is not None else None
    energy = np.zeros(steps + 1) if energy_audit else None
    prev = solver.u1[ps, pi, pj].copy()
    u_hist[0] = prev
    snaps = []
    for k in range(1, steps + 1):
        solver.step()
        u_hist[k] = solver.u1[ps, pi, pj]
        if chi is not None:
            e_chi[k] = solver.local_energy(chi)
        if energy_audit:
            energy[k] = solver.energy()
        if snapshot_every and k % snapshot_every == 0:
            snaps.append((solver.t, solver.u1.copy()))
        if callback is not None:
            callback(solver)
    du[1:-1] = (u_hist[2:] - u_hist[:-2]) / (2 * g.dt)
    du[-1] = (u_hist[-1] - u_hist[-2]) / g.dt
    t = np.arange(steps + 1) * g.dt
    series = ProbeSeries(t, u_hist, du, probes, e_chi, energy, g.dt,
                         solver.sources[0][0].f0 if solver.sources else 1.0)
    return WaveRun(g, solver.u1.copy(), series, solver.free, solver.mode, snaps)


def _bc_mode(bc: str) -> int:
    return {NEUMANN: MODE_NEUMANN, DIRICHLET: MODE_DIRICHLET}[bc.lower()]


def exterior_solver(scene, grid: GridSpec, source: Optional[Source], bc: Optional[str] = None) -> Solver:
    obstacles = scene.obstacles if scene is not None else ()
    bc = bc or (scene.bc if scene is not None else DIRICHLET)
    solver = Solver(grid, obstacles, _bc_mode(bc), 1)
    if source is not None:
        solver.add_source(source, obstacles)
    return solver


def doubled_solver(surface: ConeSurface, grid: GridSpec, sources: Sequence[Source]) -> Solver:
    if surface.kind != "double":
        raise ValueError("the grid solver handles doubled polygon exteriors only")
    solver = Solver(grid, surface.obstacles, MODE_DOUBLED, 2)
    for src in sources:
        solver.add_source(src, surface.obstacles)
    return solver


def run_exterior(scene, grid: GridSpec, source: Optional[Source], probes=(), bc=None, chi=None,
                 energy_audit=False, snapshot_every=0) -> WaveRun:
    """Wave equation outside the obstacles of ``scene`` (Dirichlet or Neumann)."""
    solver = exterior_solver(scene, grid, source, bc)
    return simulate(solver, probes, chi, energy_audit, snapshot_every)


def run_doubled(surface: ConeSurface, grid: GridSpec, source, probes=(), chi=None, energy_audit=False,
                snapshot_every=0) -> WaveRun:
    """Wave equation on both sheets of a doubled exterior, coupled across the obstacle faces."""
    sources = [source] if isinstance(source, Source) else list(source)
    solver = doubled_solver(surface, grid, sources)
    return simulate(solver, probes, chi, energy_audit, snapshot_every)


def write_snapshot(path, u: np.ndarray, h: float, t: float):
    """Flat little-endian float64 dump behind a short text header."""
    if u.ndim == 2:
        u = u[None]
    sheets, nx, ny = u.shape
    head = f"conewave-grid\nnx {nx}\nny {ny}\nsheets {sheets}\nh {h!r}\nt {t!r}\nend\n"
    with open(path, "wb") as f:
        f.write(head.encode("ascii"))
        f.write(np.ascontiguousarray(u, dtype="<f8").tobytes())


def read_snapshot(path):
    """Returns (u, h, t) written by ``write_snapshot``."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"conewave-grid":
            raise ValueError(f"{path}: not a grid dump")
        meta = {}
        for line in iter(f.readline, b""):
            line = line.decode("ascii").strip()
            if line == "end":
                break
            k, v = line.split()
            meta[k] = v
        data = np.frombuffer(f.read(), dtype="<f8")
    shape = (int(meta["sheets"]), int(meta["nx"]), int(meta["ny"]))
    return data.reshape(shape).copy(), float(meta["h"]), float(meta["t"])


# ---------------------------------------------------------------------------
# free-space reference


def free_space_reference(r, t: float, f0: float, sigma: float, t0: Optional[float] = None,
                         kmax: Optional[float] = None, nk: int = 20001) -> np.ndarray:
    """Field of the Gaussian-Ricker source in the whole plane, by Hankel transform.

    u(r, t) = int_0^inf F(k) W(k, t) J0(k r) k dk with F(k) = sigma^2 exp(-sigma^2 k^2 / 2)
    and W(k, t) = int sin(k (t - s)) / k  ricker(s) ds, the latter in closed form
    (the wavelet is negligible at s < 0).
    """
    t0 = 1.7 / f0 if t0 is None else t0
    a = (math.pi * f0) ** 2
    if kmax is None:
        kmax = math.sqrt(40.0 / (0.5 * sigma ** 2 + 0.25 / a))
    k = np.linspace(0.0, kmax, nk)
    Fk = sigma ** 2 * np.exp(-0.5 * sigma ** 2 * k ** 2)
    Wk = math.sqrt(math.pi / a) * k * np.exp(-k ** 2 / (4 * a)) * np.sin(k * (t - t0)) / (2 * a)
    r = np.atleast_1d(np.asarray(r, dtype=float))
    out = np.empty(r.shape)
    flat_r = r.ravel()
    w = Fk * Wk * k
    res = np.empty(len(flat_r))
    for lo in range(0, len(flat_r), 256):
        chunk = flat_r[lo:lo + 256]
        res[lo:lo + 256] = np.trapezoid(w[None, :] * special.j0(np.outer(chunk, k)), k, axis=1)
    out[...] = res.reshape(r.shape)
    return out


def free_space_field(axis: np.ndarray, src: Source, t: float, n_r: int = 4000) -> np.ndarray:
    """Reference on the grid, interpolated from a fine radial table."""
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    R = np.hypot(X - src.x, Y - src.y)
    rr = np.linspace(0.0, float(R.max()) + 1e-9, n_r)
    table = free_space_reference(rr, t, src.f0, src.sigma, src.delay) * src.amplitude
    return np.interp(R, rr, table)


def relative_l2(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


@dataclass
class Convergence:
    hs: list
    errors: list
    orders: list  # observed order between successive grids


def convergence_study(src: Source, hs: Sequence[float], T: float, D: Optional[float] = None) -> Convergence:
    """Empty-scene error against the free-space reference on a sequence of grids.

    The domain half-width defaults to T + 1 so nothing reaches the outer wall.
    """
    D = T + 1.0 if D is None else D
    errors = []
    for h in hs:
        g = GridSpec.make(h, D, T)
        run = run_exterior(None, g, src)
        errors.append(relative_l2(run.u[0], free_space_field(g.axis, src, g.steps * g.dt)))
    orders = [math.log(e0 / e1) / math.log(h0 / h1)
              for (h0, e0), (h1, e1) in zip(zip(hs, errors), zip(hs[1:], errors[1:]))]
    return Convergence(list(hs), errors, orders)


# ---------------------------------------------------------------------------
# observables


def bandpass(x: np.ndarray, dt: float, lo: float, hi: float, order: int = 4, causal: bool = False) -> np.ndarray:
    nyq = 0.5 / dt
    sos = signal.butter(order, [lo / nyq, min(hi / nyq, 0.99)], btype="band", output="sos")
    return signal.sosfilt(sos, x, axis=0) if causal else signal.sosfiltfilt(sos, x, axis=0)


def envelope(x: np.ndarray) -> np.ndarray:
    return np.abs(signal.hilbert(x, axis=0))


def _crossings(env: np.ndarray, t: np.ndarray, level: float) -> list:
    above = env >= level
    up = np.flatnonzero(above[1:] & ~above[:-1]) + 1
    out = []
    for k in up:
        # linear interpolation of the crossing
        e0, e1 = env[k - 1], env[k]
        out.append(float(t[k - 1] + (level - e0) / (e1 - e0) * (t[k] - t[k - 1])))
    if above[0]:
        out.insert(0, float(t[0]))
    return out


@dataclass(frozen=True)
class PickSettings:
    threshold: float = 0.1  # fraction of the peak of the processed trace
    band: tuple = (0.25, 3.0)  # in units of f0


def _pick_trace(x: np.ndarray, dt: float, f0: float, settings: PickSettings) -> np.ndarray:
    # causal filter: a zero-phase filter or a Hilbert envelope would leak energy
    # ahead of the front and bias the pick early
    return np.abs(bandpass(x, dt, settings.band[0] * f0, settings.band[1] * f0, causal=True))


def pulse_halfwidth(src: Source, dt: float, settings: PickSettings = PickSettings(), T: Optional[float] = None):
    """Offset between the threshold pick and the centre of the source wavelet itself."""
    T = T if T is not None else 4 * src.delay
    t = np.arange(0.0, T, dt)
    env = _pick_trace(src.wavelet(t), dt, src.f0, settings)
    first = _crossings(env, t, settings.threshold * env.max())[0]
    return src.delay - first


def arrival_times(series: ProbeSeries, threshold: float = 0.1, band=(0.25, 3.0), f0: Optional[float] = None,
                  delay: float = 0.0) -> list:
    """Threshold crossings of the causally band-passed, rectified trace at each probe.

    Each probe gets a list of upward crossings (first arrival first), shifted
    by ``delay``; probes whose trace never crosses get an empty list.  With
    ``delay = source.delay - pulse_halfwidth(source, dt)`` the picks estimate
    when the centre of the pulse passes.
    """
    f0 = series.f0 if f0 is None else f0
    env = _pick_trace(series.u, series.dt, f0, PickSettings(threshold, tuple(band)))
    out = []
    for p in range(env.shape[1]):
        e = env[:, p]
        m = float(e.max())
        if not m > 0:
            out.append([])
            continue
        out.append([c - delay for c in _crossings(e, series.t, threshold * m)])
    return out


def band_peak(x: np.ndarray, dt: float, lo: float, hi: float) -> float:
    return float(np.max(np.abs(bandpass(x, dt, lo, hi))))


@dataclass
class ContrastReport:
    ratio: float
    geometric_peak: float
    diffracted_peak: float
    band: tuple


def diffraction_contrast(series: ProbeSeries, geo: int, diff: int, band: tuple, scene=None,
                         source: Optional[Source] = None) -> ContrastReport:
    """High-band peak ratio diffracted/geometric for two probes of one run."""
    if scene is not None and source is not None:
        from .flow import _visible
        s = np.array([source.x, source.y])
        vis = [_visible(scene.obstacles, s, np.array([series.probes[i].x, series.probes[i].y])) for i in (geo, diff)]
        if vis[1]:
            raise ValueError("probes misconfigured: the diffracted probe is in line of sight of the source")
    g = band_peak(series.u[:, geo], series.dt, *band)
    d = band_peak(series.u[:, diff], series.dt, *band)
    return ContrastReport(d / g, g, d, tuple(band))


@dataclass
class DecayReport:
    E_chi: np.ndarray
    t: np.ndarray
    t_below: Optional[float]
    windows: list
    window_energy: list
    monotone_after: Optional[float]
    sponge_reflection: Optional[float] = None
    valid: bool = True
    notes: list = field(default_factory=list)


def disc_probes(solver: Solver, R: float, stride: int = 8, chi: Optional[np.ndarray] = None):
    """Free nodes with |z| < R on a coarse sub-grid of every sheet, and their cutoff weights."""
    ax = solver.axis
    idx = np.arange(stride // 2, len(ax), stride)
    X, Y = np.meshgrid(ax[idx], ax[idx], indexing="ij")
    inside = (np.hypot(X, Y) < R) & solver.free[np.ix_(idx, idx)]
    ii, jj = np.nonzero(inside)
    probes, w = [], []
    for s in range(solver.sheets):
        for i, j in zip(ii, jj):
            probes.append(Probe(float(ax[idx[i]]), float(ax[idx[j]]), s))
            w.append(1.0 if chi is None else float(chi[s, idx[i], idx[j]]))
    return probes, np.array(w)


def window_band_energy(series: ProbeSeries, t_lo: float, t_hi: float, f_lo: float,
                       weights: Optional[np.ndarray] = None) -> float:
    """Energy above ``f_lo`` of the Hann-tapered, weighted probe signals in [t_lo, t_hi]."""
    m = (series.t >= t_lo) & (series.t < t_hi)
    if m.sum() < 8:
        return 0.0
    x = series.u[m] * signal.windows.hann(int(m.sum()))[:, None]
    if weights is not None:
        x = x * weights[None, :]
    spec = np.fft.rfft(x, axis=0)
    f = np.fft.rfftfreq(int(m.sum()), series.dt)
    return float(np.sum(np.abs(spec[f >= f_lo]) ** 2) * series.dt)


def decay_report(series: ProbeSeries, T0: float, f_band: float, n_windows: int = 3, level: float = 1e-3,
                 reference: Optional[ProbeSeries] = None, max_reflection: float = 0.01,
                 weights: Optional[np.ndarray] = None) -> DecayReport:
    E = series.E_chi
    if E is None:
        raise ValueError("series has no E_chi: simulate with a cutoff chi")
    t = series.t
    k_max = int(np.argmax(E))
    below = np.flatnonzero((E < level * E[k_max]) & (np.arange(len(E)) > k_max))
    t_below = float(t[below[0]]) if len(below) else None
    windows = [(5 * k * T0, 5 * (k + 1) * T0) for k in range(n_windows)]
    wE = [window_band_energy(series, lo, hi, f_band, weights) for lo, hi in windows]
    dE = np.diff(E[k_max:])
    bad = np.flatnonzero(dE > 1e-9 * E[k_max])
    monotone_after = float(t[k_max + bad[-1] + 1]) if len(bad) else float(t[k_max])
    rep = DecayReport(E, t, t_below, windows, wE, monotone_after)
    if reference is not None:
        n = min(len(reference.t), len(series.t))
        diff = series.u[:n] - reference.u[:n]
        refl = float(np.sum(diff ** 2) / max(np.sum(reference.u[:n] ** 2), 1e-300))
        rep.sponge_reflection = refl
        if refl > max_reflection:
            rep.valid = False
            rep.notes.append(f"sponge reflection {refl:.3g} above {max_reflection}")
    else:
        rep.notes.append("sponge not validated against a larger domain")
    return rep
