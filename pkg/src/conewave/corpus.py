"""Reference scenes used by the checks, the tests and the CLI."""
from __future__ import annotations

import math

import numpy as np

from .surface import NEUMANN, DIRICHLET, PolygonScene, SlitScene, branched_cover, double_exterior


def unit_square(R0: float = 1.0, R1: float = 1.5, bc: str = DIRICHLET) -> PolygonScene:
    sq = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)]
    return PolygonScene((sq,), R0, R1, bc, "unit-square")


def equilateral_triangle(side: float = 1.0, R0: float = 1.0, R1: float = 1.5) -> PolygonScene:
    r = side / math.sqrt(3.0)
    pts = [(r * math.cos(a), r * math.sin(a)) for a in (math.pi / 2, math.pi / 2 + 2 * math.pi / 3,
                                                         math.pi / 2 + 4 * math.pi / 3)]
    return PolygonScene((pts,), R0, R1, DIRICHLET, "triangle")


def figure1(R0: float = 4.5, R1: float = 6.0) -> PolygonScene:
    """Quadrilateral and triangle whose facing vertex and face carry a trapped diffractive orbit."""
    quad = [(-1, -1), (-3, -2), (-3, 1), (-1, 1)]
    tri = [(1, 0), (4, 1), (3, -2)]
    return PolygonScene((quad, tri), R0, R1, DIRICHLET, "figure1")


# endpoints and turning time of the dashed orbit of ``figure1``: it leaves the
# triangle's vertex (1, 0), meets the face x = -1 of the quadrilateral at a right
# angle and comes back
FIGURE1_ORBIT = (np.array([1.0, 0.0]), np.array([-1.0, 0.0]))


def slit_cover(R0: float = 2.5, R1: float = 4.0) -> SlitScene:
    """Three slits whose ends (0,-1), (0,0), (0,1) lie on the line x = 0."""
    slits = [((-2.0, -1.0), (0.0, -1.0)), ((0.0, 0.0), (2.0, 0.0)), ((-2.0, 1.0), (0.0, 1.0))]
    return SlitScene(tuple(slits), R0, R1, DIRICHLET, "slit-cover")


def parallel_plates(gap: float = 1.0, width: float = 2.0, thick: float = 0.25, R0: float = 2.0,
                    R1: float = 3.0) -> PolygonScene:
    """Two facing rectangles; the rays bouncing perpendicularly between them are trapped."""
    h, w = gap / 2, width / 2
    top = [(-w, h), (w, h), (w, h + thick), (-w, h + thick)]
    bot = [(-w, -h - thick), (w, -h - thick), (w, -h), (-w, -h)]
    return PolygonScene((top, bot), R0, R1, DIRICHLET, "parallel-plates")


def scenes() -> dict:
    return {
        "unit-square": unit_square(),
        "triangle": equilateral_triangle(),
        "figure1": figure1(),
        "slit-cover": slit_cover(),
    }


def surfaces() -> dict:
    out = {}
    for name, sc in scenes().items():
        out[name] = branched_cover(sc) if isinstance(sc, SlitScene) else double_exterior(sc)
    return out


__all__ = ["unit_square", "equilateral_triangle", "figure1", "slit_cover", "parallel_plates", "scenes",
           "surfaces", "FIGURE1_ORBIT", "NEUMANN", "DIRICHLET"]
