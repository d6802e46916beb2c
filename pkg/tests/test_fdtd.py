import math

import numpy as np
import pytest

import oracles
from conewave import corpus, fdtd as F
from conewave.surface import PolygonScene


def test_cfl_refused():
    with pytest.raises(F.CFLError, match="CFL"):
        F.Solver(F.GridSpec(0.05, 0.05, 1.0, 1.0))


def test_sponge_too_narrow():
    with pytest.raises(ValueError):
        F.GridSpec.make(0.05, 2.0, 1.0, sponge=0.5).check()


def test_source_errors():
    sq = corpus.unit_square()
    g = F.GridSpec.make(1 / 32, 2.0, 0.5)
    with pytest.raises(F.SourceError, match="inside obstacle"):
        F.exterior_solver(sq, g, F.Source(0.0, 0.0, 1.0, 0.05))
    with pytest.raises(F.SourceError):
        F.exterior_solver(sq, g, F.Source(0.55, 0.55, 1.0, 0.01))  # next to a vertex
    with pytest.raises(F.SourceError, match="wavelength"):
        F.exterior_solver(None, g, F.Source(1.0, 1.0, 8.0, 0.05))
    with pytest.raises(F.SourceError, match="outside the grid"):
        F.exterior_solver(None, g, F.Source(9.0, 0.0, 1.0, 0.05))


def test_zero_data_stays_zero():
    run = F.run_exterior(corpus.unit_square(), F.GridSpec.make(1 / 32, 2.0, 1.0), None, [F.Probe(1.0, 0.0)])
    assert not run.u.any()
    assert not run.series.u.any()


def test_energy_conserved_with_reflecting_walls():
    sq = corpus.unit_square(bc="neumann")
    g = F.GridSpec.make(1 / 32, 1.5, 1.0)
    solver = F.exterior_solver(sq, g, F.Source(-1.0, 0.3, 2.0, 0.06, t0=0.5))
    while solver.t < 2.0:  # wavelet negligible afterwards
        solver.step()
    e0 = solver.energy()
    for _ in range(1000):
        solver.step()
    assert abs(solver.energy() - e0) / e0 <= 1e-6


@pytest.mark.parametrize("mode", [F.MODE_DIRICHLET, F.MODE_DOUBLED])
def test_energy_conserved_other_modes(mode):
    sq = corpus.unit_square()
    g = F.GridSpec.make(1 / 32, 1.5, 1.0)
    solver = F.Solver(g, sq.obstacles, mode, 2 if mode == F.MODE_DOUBLED else 1)
    solver.add_source(F.Source(-1.0, 0.3, 2.0, 0.06, t0=0.5), sq.obstacles)
    while solver.t < 2.0:
        solver.step()
    e0 = solver.energy()
    for _ in range(1000):
        solver.step()
    assert abs(solver.energy() - e0) / e0 <= 1e-6


def test_finite_propagation_speed():
    src = F.Source(0.0, 0.0, 2.0, 0.05, t0=0.4)
    g = F.GridSpec.make(1 / 32, 3.0, 1.5)
    run = F.run_exterior(None, g, src)
    X, Y = np.meshgrid(g.axis, g.axis, indexing="ij")
    r = np.hypot(X, Y)
    # the stencil moves information by one cell per step, so allow the numerical cone dt -> h
    reach = 6 * src.sigma + g.steps * g.h + 2 * g.h
    assert np.abs(run.u[0][r > reach]).max() <= 1e-10
    assert np.abs(run.u[0]).max() > 1e-4


def test_free_space_reference_against_spectral_solution():
    ax, u = oracles.spectral_free_space(0.0, 0.0, 1.0, 0.1, 5.0)
    j = len(ax) // 2
    r = ax[j:j + 300]
    ref = F.free_space_reference(r, 5.0, 1.0, 0.1)
    assert F.relative_l2(u[j:j + 300, j], ref) < 1e-3


def test_empty_scene_against_reference():
    src = F.Source(0.0, 0.0, 1.0, 0.1)
    g = F.GridSpec.make(1 / 32, 5.0, 3.0)
    run = F.run_exterior(None, g, src)
    ref = F.free_space_field(g.axis, src, g.steps * g.dt)
    assert F.relative_l2(run.u[0], ref) < 0.03


def test_dirichlet_half_plane_images():
    wall = [(-9, -9), (-0.5, -9), (-0.5, 9), (-9, 9)]
    scene = PolygonScene((wall,), 10.0, 12.0, "dirichlet", "wall")
    src = F.Source(0.3, 0.1, 1.0, 0.1)
    g = F.GridSpec.make(1 / 32, 4.0, 2.5)
    run = F.run_exterior(scene, g, src)
    T = g.steps * g.dt
    mirror = F.Source(-1.3, 0.1, 1.0, 0.1)
    ref = F.free_space_field(g.axis, src, T) - F.free_space_field(g.axis, mirror, T)
    X, _ = np.meshgrid(g.axis, g.axis, indexing="ij")
    ref[X < -0.5] = 0.0
    assert F.relative_l2(run.u[0], ref) <= 0.02


def test_symmetric_source_has_no_odd_part(square):
    g = F.GridSpec.make(1 / 32, 2.0, 1.5)
    srcs = [F.Source(-1.0, 0.3, 1.0, 0.08, sheet=s) for s in (0, 1)]
    run = F.run_doubled(square, g, srcs)
    assert np.array_equal(run.u[0], run.u[1])


def test_other_sheet_quiet_before_contact(square):
    # the source at (-1.3, 0) is 0.8 from the face x = -0.5; the support adds 6 sigma
    src = F.Source(-1.3, 0.0, 2.0, 0.03, t0=0.3)
    g = F.GridSpec.make(1 / 64, 2.0, 0.25)
    run = F.run_doubled(square, g, src, [F.Probe(-1.3, 0.0, 1), F.Probe(-1.3, 0.0, 0)])
    assert np.abs(run.series.u[:, 0]).max() <= 1e-10
    assert np.abs(run.series.u[:, 1]).max() > 1e-4


def test_images_identity_every_step(square):
    sq = corpus.unit_square()
    g = F.GridSpec.make(1 / 32, 2.0, 2.0)
    src = F.Source(-1.2, 0.3, 1.0, 0.1)
    d = F.doubled_solver(square, g, [src])
    n = F.exterior_solver(sq, g, src, "neumann")
    r = F.exterior_solver(sq, g, src, "dirichlet")
    for _ in range(g.steps):
        d.step(), n.step(), r.step()
        assert np.abs(d.u1[0] + d.u1[1] - n.u1[0]).max() <= 1e-12 * max(np.abs(n.u1).max(), 1e-30)
        assert np.abs(d.u1[0] - d.u1[1] - r.u1[0]).max() <= 1e-12 * max(np.abs(r.u1).max(), 1e-30)


def test_doubled_needs_polygon_surface(slit):
    with pytest.raises(ValueError):
        F.doubled_solver(slit, F.GridSpec.make(1 / 16, 5.0, 1.0), [])


def test_probe_inside_obstacle():
    g = F.GridSpec.make(1 / 32, 2.0, 0.1)
    with pytest.raises(F.SourceError):
        F.run_exterior(corpus.unit_square(), g, None, [F.Probe(0.0, 0.0)])


def test_local_energy_nonnegative_and_decays_in_free_space():
    g = F.GridSpec.make(1 / 32, 4.0, 4.0, sponge=1.0)
    chi = F.cutoff(g.axis, 1.5)
    run = F.run_exterior(None, g, F.Source(0.0, 0.0, 1.0, 0.1), chi=chi)
    E = run.series.E_chi
    assert E.min() >= 0.0
    assert E[-1] < 1e-2 * E.max()


def test_arrival_line_of_sight():
    src = F.Source(-1.0, 0.0, 2.0, 0.05)
    g = F.GridSpec.make(1 / 32, 3.0, 3.0)
    probes = [F.Probe(0.0, 0.0), F.Probe(0.5, 0.8)]
    run = F.run_exterior(None, g, src, probes)
    hw = F.pulse_halfwidth(src, g.dt)
    picks = F.arrival_times(run.series, f0=src.f0, delay=src.delay - hw)
    for p, pk in zip(probes, picks):
        assert abs(pk[0] - math.hypot(p.x - src.x, p.y - src.y)) <= 2 * g.h + hw


def test_arrival_no_crossing_is_empty():
    s = F.ProbeSeries(np.arange(100) * 0.01, np.zeros((100, 1)), np.zeros((100, 1)), [F.Probe(0, 0)], dt=0.01)
    assert F.arrival_times(s) == [[]]


def test_contrast_same_class_is_one():
    src = F.Source(0.0, 0.0, 2.0, 0.05)
    g = F.GridSpec.make(1 / 32, 3.0, 2.5)
    run = F.run_exterior(None, g, src, [F.Probe(1.0, 0.0), F.Probe(0.0, -1.0)])
    rep = F.diffraction_contrast(run.series, 0, 1, (3.0, 6.0))
    assert rep.ratio == pytest.approx(1.0, abs=0.01)


def test_contrast_rejects_line_of_sight_pair():
    sq = corpus.unit_square()
    src = F.Source(-1.0, 0.0, 2.0, 0.05)
    g = F.GridSpec.make(1 / 32, 2.0, 0.2)
    run = F.run_exterior(sq, g, src, [F.Probe(-1.0, 0.8), F.Probe(-1.0, -0.8)])
    with pytest.raises(ValueError, match="misconfigured"):
        F.diffraction_contrast(run.series, 0, 1, (3.0, 6.0), sq, src)


def test_snapshot_roundtrip(tmp_path):
    u = np.random.default_rng(0).normal(size=(2, 5, 5))
    p = tmp_path / "u.bin"
    F.write_snapshot(p, u, 0.125, 1.5)
    back, h, t = F.read_snapshot(p)
    assert np.array_equal(back, u) and h == 0.125 and t == 1.5
    head = p.read_bytes().split(b"end\n")[0].decode()
    assert "nx 5" in head and "ny 5" in head and "h 0.125" in head


def test_window_band_energy_sees_high_frequencies():
    t = np.arange(0, 10, 0.01)
    lo = np.sin(2 * np.pi * 0.5 * t)[:, None]
    hi = lo + 0.1 * np.sin(2 * np.pi * 5.0 * t)[:, None]
    mk = lambda u: F.ProbeSeries(t, u, u, [F.Probe(0, 0)], dt=0.01)  # noqa: E731
    assert F.window_band_energy(mk(hi), 0, 10, 3.0) > 1e3 * F.window_band_energy(mk(lo), 0, 10, 3.0)


def test_decay_report_flags_sponge_reflection():
    t = np.arange(0, 20, 0.01)
    u = (np.exp(-t) * np.sin(2 * np.pi * 3 * t))[:, None]
    s = F.ProbeSeries(t, u, u, [F.Probe(0, 0)], E_chi=u[:, 0] ** 2 + 1e-30, dt=0.01)
    clean = F.decay_report(s, 1.0, 2.0, reference=s)
    assert clean.valid and clean.sponge_reflection == 0.0
    echo = F.ProbeSeries(t, u * 1.2, u, [F.Probe(0, 0)], E_chi=s.E_chi, dt=0.01)
    rep = F.decay_report(echo, 1.0, 2.0, reference=s)
    assert not rep.valid and "reflection" in rep.notes[0]
    assert "not validated" in F.decay_report(s, 1.0, 2.0).notes[0]
    with pytest.raises(ValueError, match="E_chi"):
        F.decay_report(F.ProbeSeries(t, u, u, [F.Probe(0, 0)], dt=0.01), 1.0, 2.0)


def test_halving_h_at_least_halves_the_error():
    conv = F.convergence_study(F.Source(0.0, 0.0, 1.0, 0.1), [1 / 16, 1 / 32], 3.0)
    assert conv.errors[1] <= 0.5 * conv.errors[0]
    assert conv.orders[0] >= 1.0
