"""Reference computations that share no code with the package.

Each oracle takes the slow, obvious route: dense sampling, brute-force graph
search or a different numerical method for the same quantity.
"""
from __future__ import annotations

import heapq
import math

import numpy as np


# ---------------------------------------------------------------------------
# plane geometry


def _inside(pts, loop) -> np.ndarray:
    """Even-odd ray casting for an (m, 2) array of points."""
    x, y = pts[:, 0:1], pts[:, 1:2]
    A = np.asarray(loop, float)
    B = np.roll(A, -1, axis=0)
    x1, y1, x2, y2 = A[:, 0], A[:, 1], B[:, 0], B[:, 1]
    straddle = (y1 > y) != (y2 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    return (np.sum(straddle & (xc > x), axis=1) % 2) == 1


def _dist_to_loop(pts, loop) -> np.ndarray:
    A = np.asarray(loop, float)
    B = np.roll(A, -1, axis=0)
    AB = B - A
    rel = pts[:, None, :] - A[None]
    s = np.clip(np.sum(rel * AB, axis=2) / np.sum(AB * AB, axis=1), 0.0, 1.0)
    return np.min(np.linalg.norm(rel - s[..., None] * AB, axis=2), axis=1)


def sees(obstacles, a, b, samples: int = 20000, margin: float = 1e-7) -> bool:
    """Segment a-b avoids every obstacle interior, judged on evenly spaced samples."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    s = np.linspace(0.0, 1.0, samples + 2)[1:-1]
    pts = a + s[:, None] * (b - a)
    for loop in obstacles:
        inside = _inside(pts, loop)
        if inside.any() and np.any(_dist_to_loop(pts[inside], loop) > margin):
            return False
    return True


def boundary_samples(obstacles, per_unit: int = 40):
    out = []
    for loop in obstacles:
        for k in range(len(loop)):
            a, b = np.asarray(loop[k], float), np.asarray(loop[(k + 1) % len(loop)], float)
            m = max(2, int(math.ceil(per_unit * np.linalg.norm(b - a))))
            for s in np.arange(m) / m:
                out.append(a + s * (b - a))
    return np.array(out)


def doubled_distance(obstacles, p, sp: int, q, sq: int, per_unit: int = 40) -> float:
    """Distance on two copies of the exterior glued along the obstacle boundary.

    Boundary points belong to both copies, so a shortest path is a polyline
    whose interior corners sit on the boundary.  Dijkstra over densely
    sampled boundary points gives an upper bound converging from above.
    """
    p, q = np.asarray(p, float), np.asarray(q, float)
    best = float(np.linalg.norm(p - q)) if sp == sq and sees(obstacles, p, q) else math.inf
    B = boundary_samples(obstacles, per_unit)
    n = len(B)
    # boundary-to-boundary visibility, checked with few samples (it only has to be right for short legs)
    dist = np.full(n, math.inf)
    for k in range(n):
        if sees(obstacles, p, B[k], 400):
            dist[k] = float(np.linalg.norm(p - B[k]))
    to_q = np.array([float(np.linalg.norm(q - B[k])) if sees(obstacles, q, B[k], 400) else math.inf
                     for k in range(n)])
    heap = [(d, k) for k, d in enumerate(dist) if d < math.inf]
    heapq.heapify(heap)
    done = np.zeros(n, dtype=bool)
    vis_cache = {}
    while heap:
        d, k = heapq.heappop(heap)
        if done[k] or d > dist[k]:
            continue
        done[k] = True
        if d + to_q[k] < best:
            best = d + to_q[k]
        if d >= best:
            break
        for j in range(n):
            if done[j]:
                continue
            nd = d + float(np.linalg.norm(B[j] - B[k]))
            if nd >= dist[j] or nd >= best:
                continue
            key = (min(j, k), max(j, k))
            if key not in vis_cache:
                vis_cache[key] = sees(obstacles, B[k], B[j], 100)
            if vis_cache[key]:
                dist[j] = nd
                heapq.heappush(heap, (nd, j))
    return best


# ---------------------------------------------------------------------------
# link circles


def arc_scan(theta: float, link_in: float, target: float = math.pi, n: int = 200001, tol: float = 1e-9):
    """Points of a circle of circumference ``theta`` at arc distance ``target`` from ``link_in``.

    Sign changes of (arc distance - target) on a fine grid are refined by
    bisection; grid points already within ``tol`` count directly (this
    catches tangential solutions, where no sign change occurs).
    """
    def g(z):
        dd = abs(z - link_in) % theta
        return min(dd, theta - dd) - target

    x = np.linspace(0.0, theta, n, endpoint=False)
    f = np.array([g(v) for v in x])
    out = [float(v) for v in x[np.abs(f) <= tol]]
    nxt = np.roll(f, -1)
    for k in np.flatnonzero((f * nxt < 0) & (np.abs(f) > tol) & (np.abs(nxt) > tol)):
        lo, hi = float(x[k]), float(x[k]) + theta / n
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if g(lo) * g(mid) <= 0:
                hi = mid
            else:
                lo = mid
        out.append((0.5 * (lo + hi)) % theta)
    return sorted(out)


# ---------------------------------------------------------------------------
# waves


def ricker(t, f0: float, t0: float):
    a = (math.pi * f0 * (np.asarray(t) - t0)) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def spectral_free_space(x0, y0, f0, sigma, t, L: float = 24.0, n: int = 1024, nt: int = 4000, t0=None):
    """u_tt - lap u = exp(-|x - x0|^2 / 2 sigma^2) ricker(t) on a large periodic box, by FFT.

    Each Fourier mode is a forced oscillator solved by Duhamel quadrature in
    time.  Returns (axis, field) on the n x n periodic grid of side L.
    """
    t0 = 1.7 / f0 if t0 is None else t0
    ax = (np.arange(n) - n // 2) * (L / n)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    f = np.exp(-((X - x0) ** 2 + (Y - y0) ** 2) / (2 * sigma ** 2))
    fh = np.fft.fft2(f)
    k1 = 2 * np.pi * np.fft.fftfreq(n, L / n)
    K = np.hypot(*np.meshgrid(k1, k1, indexing="ij"))
    # Duhamel weight int_0^t sin(k (t - s)) / k w(s) ds, tabulated in |k|
    s = np.linspace(0.0, t, nt)
    w = ricker(s, f0, t0)
    # the Gaussian kills everything beyond |k| = 12 / sigma
    kt = np.linspace(0.0, min(K.max(), 12.0 / sigma), 20000)
    table = np.empty_like(kt)
    for lo in range(0, len(kt), 1000):
        kk = kt[lo:lo + 1000, None]
        ker = np.where(kk > 0, np.sin(kk * (t - s)) / np.where(kk > 0, kk, 1.0), t - s)
        table[lo:lo + 1000] = np.trapezoid(ker * w, s, axis=1)
    weight = np.interp(K, kt, table, right=0.0)
    u = np.real(np.fft.ifft2(fh * weight))
    return ax, u


def halfplane_dirichlet(field_at, wall_x: float, x0: float, y0: float):
    """Image solution for a Dirichlet wall x = wall_x: field(source) - field(mirror source)."""
    xm = 2 * wall_x - x0

    def u(X, Y):
        return field_at(X, Y, x0, y0) - field_at(X, Y, xm, y0)

    return u


# ---------------------------------------------------------------------------
# billiards


def billiard_position(obstacles, p, d, T: float, max_bounces: int = 1000):
    """Position and direction after time T of a point mass bouncing specularly off the obstacles."""
    p, d = np.asarray(p, float).copy(), np.asarray(d, float) / np.linalg.norm(d)
    left = T
    last = None
    for _ in range(max_bounces):
        best, hit = math.inf, None
        for k, loop in enumerate(obstacles):
            for i in range(len(loop)):
                a, b = np.asarray(loop[i], float), np.asarray(loop[(i + 1) % len(loop)], float)
                e = b - a
                den = d[0] * (-e[1]) + d[1] * e[0]
                if abs(den) < 1e-15 or (k, i) == last:
                    continue
                r = a - p
                s = (r[0] * (-e[1]) + r[1] * e[0]) / den  # time along the ray
                u = (d[0] * r[1] - d[1] * r[0]) / den  # fraction along the edge
                if 1e-12 < s < best and 0.0 <= u <= 1.0:
                    best, hit = s, (k, i, e)
        if hit is None or best >= left:
            return p + left * d, d
        p = p + best * d
        left -= best
        e = hit[2] / np.linalg.norm(hit[2])
        d = 2 * np.dot(d, e) * e - d
        last = hit[:2]
    raise RuntimeError("too many bounces")
