"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from heatrecon.config import DEFAULTS
from heatrecon.inverse import exact_spectral_data
from heatrecon.inverse.bc import influence_projector, slicing_inner_products, wave_fourier_coefficients
from heatrecon.inverse.charts import gauge_fix
from heatrecon.inverse.geometry import SpaceMeasures, injectivity_radius
from heatrecon.inverse.metric import recover_metric_density
from heatrecon.inverse.pipeline import InverseConfig, reconstruct, reconstruct_from_lsd
from heatrecon.mgh import almost_triangle_check, d_mgh_estimate
from heatrecon.phd import farthest_point_net, sample_phd
from heatrecon.space import build_circle, build_flat_torus, build_interval_orbifold, build_warped_torus
from heatrecon.spectral import solve_space, tail_envelope
from heatrecon.sweeps import collapse_sweep, is_monotone, stability_sweep

from oracles import (aligned_truth, ball_projector, dijkstra_matrix, leapfrog_wave,
                     periodic_spectral_derivative, weighted_laplacian_matrix)
from test_mgh import random_circle_net


def cosine_pi(y):
    return 2 + np.cos(np.pi * y)


def report(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number:2d} ({title}): {detail}")
    assert ok, detail


def test_criterion_01_forward_spectrum(capsys):
    with threadpool_limits(1):
        start = time.perf_counter()
        spec = solve_space(build_circle(512), 32)
        elapsed = time.perf_counter() - start
    ref = np.repeat(np.arange(1, 6) ** 2, 2)
    err = float(np.max(np.abs(spec.eigenvalues[1:11] / ref - 1)))
    report(capsys, 1, "forward spectrum", err < 0.01 and elapsed < 10.0,
           f"max relative error {err:.2e} (< 1e-2), runtime {elapsed:.2f} s (< 10 s)")


def test_criterion_02_heat_kernel_invariants(capsys):
    models = {
        "circle": build_circle(512),
        "warped torus": build_warped_torus(32, 16, 0.25, cosine_pi),
        "orbifold": build_interval_orbifold(256),
    }
    worst_sc, worst_sg, lines = 0.0, 0.0, []
    for name, sp in models.items():
        spec = solve_space(sp)
        w = sp.weights
        for t in (0.1, 1.0, 10.0):
            H = spec.heat_matrix(t)
            half = spec.heat_matrix(t / 2)
            sc = float(np.max(np.abs(H @ w - 1)))
            sg = float(np.max(np.abs((half * w) @ half - H)))
            worst_sc, worst_sg = max(worst_sc, sc), max(worst_sg, sg)
        lines.append(name)
    report(capsys, 2, "heat-kernel invariants", worst_sc < 1e-9 and worst_sg < 1e-8,
           f"completeness {worst_sc:.1e} (< 1e-9), semigroup {worst_sg:.1e} (< 1e-8) on {', '.join(lines)}")


def test_criterion_03_truncation_envelope(capsys):
    models = {
        "circle": build_circle(128),
        "density circle": build_circle(128, density_profile=lambda y: 2 + np.cos(y)),
        "warped torus": build_warped_torus(16, 8, 0.25, cosine_pi),
        "orbifold": build_interval_orbifold(96),
        "flat torus": build_flat_torus(12),
    }
    failed = []
    for name, sp in models.items():
        spec = solve_space(sp)
        lam = spec.eigenvalues
        rep = tail_envelope(spec, np.geomspace(max(lam[1], 1.0), lam[-1] / 4, 5), np.geomspace(0.01, 1.0, 5))
        if not (rep.holds and rep.tails.shape == (5, 5)):
            failed.append(name)
    report(capsys, 3, "truncation envelope", not failed,
           f"5x5 grid within envelope on {len(models) - len(failed)}/{len(models)} models"
           + (f", failing: {failed}" if failed else ""))


def test_criterion_04_collapse(capsys):
    with threadpool_limits(1):
        start = time.perf_counter()
        rows = collapse_sweep(DEFAULTS["sweep"])
        elapsed = time.perf_counter() - start
    sig = [r["sigma"] for r in rows]
    heat = [r["heat_discrepancy"] for r in rows]
    mgh = [r["mgh"] for r in rows]
    ok = sig == [1.0, 0.5, 0.25, 0.125] and is_monotone(heat) and is_monotone(mgh) and elapsed < 120
    report(capsys, 4, "collapse", ok,
           f"heat {', '.join(f'{h:.3g}' for h in heat)}; mGH {', '.join(f'{m:.3g}' for m in mgh)}; "
           f"runtime {elapsed:.1f} s (< 120 s)")


def test_criterion_05_spectral_round_trip(capsys, circle, circle_phd, circle_lsd):
    _, spec = circle
    truth = exact_spectral_data(spec, circle_phd.net_points)
    lam_err = float(np.max(np.abs(circle_lsd.eigenvalues[1:8] / truth.eigenvalues[1:8] - 1)))
    # clusters of 0, 1, 4, 9 and 16 cover the first seven nonzero eigenvalues
    res_err = max(float(np.linalg.norm(circle_lsd.residue(c) - truth.residue(c), 2)) for c in range(5))
    report(capsys, 5, "spectral round trip", lam_err < 1e-4 and res_err < 1e-3,
           f"eigenvalue rel. error {lam_err:.1e} (< 1e-4), residue error {res_err:.1e} (< 1e-3)")


def test_criterion_06_metric_density(capsys, density_circle, density_phd, density_lsd):
    sp, spec = density_circle
    lsd = gauge_fix(density_lsd)
    geo = recover_metric_density(lsd)
    net = density_phd.net_points
    y = sp.coords[net, 0]
    F = aligned_truth(spec, lsd, net)
    dF = periodic_spectral_derivative(F, 2 * np.pi)[net]
    j = np.array([ch.indices[0] for ch in geo.charts])
    g = dF[np.arange(len(net)), j]
    interior = ~geo.flagged
    h_err = float(np.abs(geo.metric[:, 0, 0] / g**2 - 1)[interior].max())
    w_true = -np.sin(y) / (2 + np.cos(y)) / g
    w_err = float(np.abs(geo.dlog_density[:, 0] - w_true)[interior].max() / np.abs(w_true).max())
    mass = abs(geo.total_mass - 1)
    report(capsys, 6, "metric and density", h_err < 0.02 and w_err < 0.05 and mass < 1e-6,
           f"h {h_err:.1e} (< 2e-2), d log rho {w_err:.1e} (< 5e-2), mass {mass:.1e} (< 1e-6) "
           f"on {int(interior.sum())}/{len(net)} interior points")


def test_criterion_07_bc_oracles(capsys, circle):
    sp, spec = circle
    net = np.arange(0, sp.vertex_count, 8)
    lsd = exact_spectral_data(spec, net, 257)
    q = sp.weights[net] * 8
    W, s = [0, 1, 2, 3, 4, 5], 0.5
    M = influence_projector(lsd, W, s, 15, q, n_time=30)
    chi = sp.distance_matrix[net[W]].min(axis=0) <= s + 1e-12
    proj_err = float(np.linalg.norm(M.matrix - ball_projector(spec.eigenvectors[:, :15], sp.weights, chi), 2))

    n = 128
    small = build_circle(n, density_profile=lambda y: 2 + np.cos(y))
    sspec = solve_space(small)
    snet = np.arange(0, n, 4)
    slsd = exact_spectral_data(sspec, snet)
    sq = small.weights[snet] * 4
    rng = np.random.default_rng(11)
    amp = rng.standard_normal((len(snet), 4))
    amp[rng.random(len(snet)) >= 0.4] = 0.0

    def F(t):
        return amp @ np.sin(np.pi * np.arange(1, 5) * t)

    def vertex_source(t):
        f = np.zeros(n)
        f[snet] = F(t) * sq / small.weights[snet]
        return f

    u_fd = leapfrog_wave(weighted_laplacian_matrix(small), vertex_source, 2.5e-4, 1.0)
    coeff_fd = sspec.eigenvectors.T @ (small.weights * u_fd)
    coeff = wave_fourier_coefficients(slsd, F, [1.0], sq)[0]
    energy = np.sqrt(1 + sspec.eigenvalues)
    wave_err = float(np.linalg.norm(energy * (coeff - coeff_fd)) / np.linalg.norm(energy * coeff_fd))

    D = sp.distance_matrix[net[10]]
    ann_err = 0.0
    for rho, width in [(0.3, 0.6), (0.5, 1.0), (1.0, 0.5)]:
        out = slicing_inner_products([(influence_projector(lsd, [10], rho + width, 15, q),
                                       influence_projector(lsd, [10], rho, 15, q))])
        truth = sp.weights[(D <= rho + width + 1e-12) & (D > rho + 1e-12)].sum()
        ann_err = max(ann_err, abs(out["value"] - truth))
    report(capsys, 7, "BC oracles", proj_err < 5e-2 and wave_err < 0.01 and ann_err < 5e-2,
           f"projector {proj_err:.1e} (< 5e-2), wave energy norm {wave_err:.1e} (< 1e-2), "
           f"annulus {ann_err:.1e} (< 5e-2)")


def net_spacing(D):
    return float(np.median((D + np.diag(np.full(len(D), np.inf))).min(axis=1)))


def test_criterion_08_geometry(capsys, circle, circle_phd, circle_recon, orbifold):
    # full-grid net: the net spacing and the mesh spacing coincide
    small = build_circle(64)
    data = sample_phd(solve_space(small), small.diameter, small.spacing * (1 + 1e-7), time_delta=0.05)
    res = reconstruct(data, InverseConfig(injectivity=False))
    truth = dijkstra_matrix(small.vertex_count, small.edges, small.edge_lengths)[np.ix_(data.net_points,
                                                                                        data.net_points)]
    grid_err = float(np.abs(res.distances.matrix - truth).max())
    grid_ok = grid_err <= 2 * small.spacing

    sp, _ = circle
    fine_truth = sp.distance_matrix[np.ix_(circle_phd.net_points, circle_phd.net_points)]
    fine_err = float(np.abs(circle_recon.distances.matrix - fine_truth).max())
    fine_ok = fine_err <= 2 * net_spacing(fine_truth)

    step = circle_recon.diagnostics["injectivity_grid_step"]
    inj_err = float(np.max(np.abs(circle_recon.inj_radius - np.pi)))
    inj_ok = bool(np.all(np.isfinite(circle_recon.inj_radius))) and inj_err <= step + 1e-9

    osp, _ = orbifold
    Dfull = osp.distance_matrix
    onet = np.sort(farthest_point_net(Dfull, np.arange(osp.vertex_count), 0.1, osp.base_point))
    meas = SpaceMeasures(osp, onet)
    ostep = 0.1
    grid = np.arange(ostep, osp.diameter + 0.5 * ostep, ostep)
    sing = np.flatnonzero(osp.singular_flags)
    Dn = Dfull[np.ix_(onet, onet)]
    worst = -np.inf
    for x in range(len(onet)):
        if osp.singular_flags[onet[x]]:
            continue
        est = injectivity_radius(meas, x, Dn, grid)
        worst = max(worst, est.value - Dfull[onet[x], sing].min() if est.bracketed else np.inf)
    orb_ok = worst <= ostep + 1e-9

    report(capsys, 8, "geometry", grid_ok and fine_ok and inj_ok and orb_ok,
           f"distances on the n=64 full-grid net {grid_err:.3f} (<= 2 mesh = {2 * small.spacing:.3f}); "
           f"on the n=512 delta=0.1 net {fine_err:.3f} (<= 2 net spacing = {2 * net_spacing(fine_truth):.3f}, "
           f"2 mesh = {2 * sp.spacing:.3f} not claimed); injectivity {inj_err:.3f} (<= step {step:.3f}); "
           f"orbifold max i(x) - d(x, sing) {worst:.3f} (<= {ostep})")


def test_criterion_09_mgh_axioms(capsys, density_lsd, density_phd):
    rng = np.random.default_rng(2024)
    A = random_circle_net(rng, 8)
    self_eps = d_mgh_estimate(A, A, exhaustive=True).epsilon
    sizes = rng.integers(4, 8, size=20)
    triples = [tuple(random_circle_net(rng, int(n)) for _ in range(3)) for n in sizes]
    tri = almost_triangle_check(triples, exhaustive=True)

    cfg = InverseConfig(inj_points=list(range(0, 64, 9)))
    a = reconstruct_from_lsd(density_lsd, density_phd.delta, config=cfg)
    b = reconstruct_from_lsd(density_lsd.random_gauge(17), density_phd.delta, config=cfg)
    gauge = 0.0
    for x, y in [(a.lsd.eigenvalues, b.lsd.eigenvalues), (a.geometry.metric, b.geometry.metric),
                 (a.geometry.dlog_density, b.geometry.dlog_density), (a.density, b.density),
                 (a.geometry.volume, b.geometry.volume), (a.distances.matrix, b.distances.matrix),
                 (a.inj_radius, b.inj_radius)]:
        scale = max(1.0, float(np.nanmax(np.abs(x))))
        gauge = max(gauge, float(np.nanmax(np.abs(x - y))) / scale)
    ok = self_eps == 0.0 and tri.holds and len(tri.rows) == 20 and gauge < 1e-8
    report(capsys, 9, "mGH axioms and gauge invariance", ok,
           f"self distance {self_eps!r} (== 0), triangle {sum(r['holds'] for r in tri.rows)}/20, "
           f"gauge change {gauge:.1e} (< 1e-8)")


@pytest.mark.slow
def test_criterion_10_stability_trend(capsys, circle, circle_phd, circle_recon):
    # noiseless round-trip floor on the same configuration
    sp, _ = circle
    net = circle_phd.net_points
    floor = float(np.abs(circle_recon.distances.matrix - sp.distance_matrix[np.ix_(net, net)]).max())
    with threadpool_limits(1):
        rows, summary = stability_sweep(DEFAULTS["model"], DEFAULTS["solver"]["modes"], DEFAULTS["phd"], {},
                                        [0.0, 1e-4, 1e-3, 1e-2], [1, 2, 3])
    means = ", ".join(f"{m:.3g}" for m in summary["mean_mgh"])
    clean = max(r["mgh"] for r in rows if r["noise"] == 0.0)
    ok = summary["spearman"] > 0 and len(rows) == 12 and clean <= floor + 1e-9
    report(capsys, 10, "stability trend", ok,
           f"Spearman {summary['spearman']:.3f} (> 0) over 12 runs; mean mGH per noise level {means}; "
           f"noiseless {clean:.3f} (<= round-trip floor {floor:.3f})")
