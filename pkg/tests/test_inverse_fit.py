import numpy as np
import pytest

from heatrecon.config import limit_circle
from heatrecon.inverse import FitError, exact_spectral_data, fit_spectral_data
from heatrecon.inverse.charts import (ChartError, LocalFrames, detect_dimension, gauge_fix,
                                      select_chart, tuple_injectivity)
from heatrecon.inverse.lsd import cluster_modes
from heatrecon.inverse.metric import moment_quadrature, recover_metric_density
from heatrecon.phd import PointHeatData, farthest_point_net, perturb, sample_phd, time_net
from heatrecon.space import build_flat_torus, build_warped_torus
from heatrecon.spectral import solve_space

from oracles import aligned_truth, periodic_spectral_derivative

COSINE = {"kind": "cosine", "a": 2.0, "b": 1.0, "k": 1}


def two_point_data():
    t = time_net(0.05)
    R0 = np.ones((2, 2))
    R1 = 0.5 * np.array([[1.0, -1.0], [-1.0, 1.0]])
    values = R0[:, :, None] + R1[:, :, None] * np.exp(-2.0 * t)
    return PointHeatData(np.arange(2), t, values, 0.05, 1.0, 0.05), R0, R1


def test_single_exponential_by_inspection():
    data, R0, R1 = two_point_data()
    lsd = fit_spectral_data(data)
    np.testing.assert_allclose(lsd.eigenvalues, [0.0, 2.0], atol=1e-9)
    np.testing.assert_allclose(lsd.residue(0), R0, atol=1e-9)
    np.testing.assert_allclose(lsd.residue(1), R1, atol=1e-9)
    # diagonal entries are exactly 1 + 0.5 exp(-2 t)
    np.testing.assert_allclose(lsd.heat(0.7)[0, 0], 1 + 0.5 * np.exp(-1.4), atol=1e-9)


def test_fit_needs_three_times():
    data, _, _ = two_point_data()
    short = PointHeatData(data.net_points, data.times[:2], data.values[:, :, :2], 0.05, 1.0, 0.05)
    with pytest.raises(FitError):
        fit_spectral_data(short)


def test_circle_round_trip(circle, circle_phd, circle_lsd):
    _, spec = circle
    truth = exact_spectral_data(spec, circle_phd.net_points)
    np.testing.assert_allclose(circle_lsd.eigenvalues[1:7], truth.eigenvalues[1:7], rtol=1e-4)
    for c in range(4):
        err = np.linalg.norm(circle_lsd.residue(c) - truth.residue(c), 2)
        assert err < 1e-3


def test_degenerate_pair_has_rank_two(circle, circle_phd, circle_lsd):
    assert list(circle_lsd.multiplicities[:4]) == [1, 2, 2, 2]
    s = np.linalg.svd(circle_lsd.residue(1), compute_uv=False)
    assert s[2] < 1e-6 * s[0] and s[1] > 1e-3 * s[0]
    # rank oracle: the residue of lambda = 1 is built from cos and sin on the net
    y = circle[0].coords[circle_phd.net_points, 0]
    R = 2 * (np.outer(np.cos(y), np.cos(y)) + np.outer(np.sin(y), np.sin(y)))
    assert np.linalg.norm(circle_lsd.residue(1) - R, 2) < 1e-3 * np.linalg.norm(R, 2)


def test_lsd_invariants(circle_lsd):
    lsd = circle_lsd
    assert lsd.eigenvalues[0] == 0.0 and lsd.multiplicities[0] == 1
    assert np.ptp(lsd.phi_values[:, 0]) < 1e-6
    assert not lsd.c0_known
    assert lsd.meta["report"].residual < 1e-8
    assert np.all(np.diff(lsd.eigenvalues) >= 0)


def test_gauge_change_leaves_residues(circle_lsd):
    rot = circle_lsd.random_gauge(5)
    assert np.abs(rot.phi_values - circle_lsd.phi_values).max() > 1e-2
    for c in range(len(circle_lsd.clusters)):
        np.testing.assert_allclose(rot.residue(c), circle_lsd.residue(c), atol=1e-10)
    np.testing.assert_allclose(gauge_fix(rot).phi_values, gauge_fix(circle_lsd).phi_values, atol=1e-8)


def test_noisy_fit_truncates_with_report(circle_phd):
    noisy = fit_spectral_data(perturb(circle_phd, 1e-3, seed=1))
    rep = noisy.meta["report"]
    assert rep.truncated and rep.reason
    assert 3 <= noisy.mode_count < 100
    np.testing.assert_allclose(noisy.eigenvalues[1:3], 1.0, rtol=1e-2)


def test_mode_budget_respected(circle_phd):
    lsd = fit_spectral_data(circle_phd, k_max=8)
    assert lsd.mode_count <= 8
    assert lsd.meta["report"].truncated
    assert all(len(c) in (1, 2) for c in lsd.clusters)


def test_cluster_modes_merges_close_values():
    groups = cluster_modes(np.array([1.0, 1.00001, 4.0, 4.1, 9.0]))
    assert groups == [[0, 1], [2], [3], [4]]


def test_circle_dimension(circle_lsd):
    assert detect_dimension(circle_lsd) == 1


def test_flat_torus_dimension():
    sp = build_flat_torus(32)
    spec = solve_space(sp)
    net = farthest_point_net(sp.distance_matrix, np.arange(sp.vertex_count), 0.25, 0)
    assert detect_dimension(exact_spectral_data(spec, net, 60)) == 2
    # finite-difference oracle: the two lowest modes have independent gradients almost everywhere
    phi = spec.eigenvectors[:, 1:3].reshape(32, 32, 2)
    gy = np.roll(phi, -1, axis=0) - np.roll(phi, 1, axis=0)
    gz = np.roll(phi, -1, axis=1) - np.roll(phi, 1, axis=1)
    J = np.stack([gy, gz], axis=-1).reshape(-1, 2, 2)
    sv = np.linalg.svd(J, compute_uv=False)
    assert np.mean(sv[:, 1] > 1e-3 * sv[:, 0].max()) > 0.5


def test_collapsed_torus_reads_one_dimensional():
    c = lambda y: 2 + np.cos(np.pi * y)  # noqa: E731
    tor = build_warped_torus(64, 8, 1 / 32, c)
    data = sample_phd(solve_space(tor), tor.diameter, 0.1, time_delta=0.05)
    lsd = fit_spectral_data(data)
    assert detect_dimension(lsd) == 1
    # cross-check against the limit circle on the same rows
    circ = limit_circle(64, COSINE)
    ref = fit_spectral_data(sample_phd(solve_space(circ), circ.diameter, 0.1, time_delta=0.05))
    assert detect_dimension(ref) == 1
    np.testing.assert_allclose(lsd.eigenvalues[1:5], ref.eigenvalues[1:5], rtol=1e-2)


def test_dimension_needs_modes():
    data, _, _ = two_point_data()
    lsd = fit_spectral_data(data).truncated(1)
    with pytest.raises(ChartError):
        detect_dimension(lsd)


def test_circle_chart_pair_and_single_index(circle_lsd):
    canon = gauge_fix(circle_lsd)
    frames = LocalFrames(canon, 1)
    phi = canon.phi_values
    top = int(np.nanmax(frames.hop_distance[0][np.isfinite(frames.hop_distance[0])]))
    # the (cos, sin) pair separates every net point
    assert tuple_injectivity(frames, (1, 2), 0, phi) == top
    # a single index folds over at its two critical points
    for j in (1, 2):
        assert tuple_injectivity(frames, (j,), 0, phi) < top
    ch = select_chart(circle_lsd, 0, frames=frames)
    assert len(ch.indices) == 1 and ch.validity_radius < np.pi
    assert ch.score > 0.2


def test_orbifold_cosine_chart_is_global(orbifold):
    sp, spec = orbifold
    net = np.sort(farthest_point_net(sp.distance_matrix, np.arange(sp.vertex_count), 0.1, sp.base_point))
    lsd = exact_spectral_data(spec, net, 60)
    canon = gauge_fix(lsd)
    frames = LocalFrames(canon, 1)
    hop = frames.hop_distance[0]
    assert tuple_injectivity(frames, (1,), 0, canon.phi_values) == int(hop[np.isfinite(hop)].max())
    assert np.all(np.abs(np.diff(np.sign(np.diff(canon.phi_values[:, 1])))) == 0)


def test_all_modes_separate_net_points(circle_lsd):
    phi = circle_lsd.phi_values
    gap = np.abs(phi[:, None, :] - phi[None, :, :]).max(axis=2)
    np.fill_diagonal(gap, np.inf)
    assert gap.min() > 1e-3


@pytest.fixture(scope="module")
def density_geometry(density_circle, density_phd, density_lsd):
    lsd = gauge_fix(density_lsd)
    geo = recover_metric_density(lsd)
    return density_circle, density_phd, lsd, geo


def test_density_circle_metric_and_log_density(density_geometry):
    (sp, spec), data, lsd, geo = density_geometry
    net = data.net_points
    y = sp.coords[net, 0]
    F = aligned_truth(spec, lsd, net)
    dF = periodic_spectral_derivative(F, 2 * np.pi)[net]
    j = np.array([ch.indices[0] for ch in geo.charts])
    g = dF[np.arange(len(net)), j]  # d x / d y of each point's chart coordinate (phi_0 = 1)
    interior = ~geo.flagged
    assert interior.mean() > 0.9
    h_err = np.abs(geo.metric[:, 0, 0] / g**2 - 1)[interior].max()
    w_true = -np.sin(y) / (2 + np.cos(y)) / g
    w_err = np.abs(geo.dlog_density[:, 0] - w_true)[interior].max() / np.abs(w_true).max()
    assert h_err < 0.02
    assert w_err < 0.05
    assert abs(geo.total_mass - 1) < 1e-6


def test_density_circle_density_and_volume(density_geometry):
    (sp, _), data, _, geo = density_geometry
    truth = sp.density[data.net_points] / (2 * np.pi)
    assert np.abs(geo.density / truth - 1).max() < 0.05
    assert np.sum(geo.volume) == pytest.approx(2 * np.pi, rel=0.02)


def test_uniform_circle_density(circle_lsd):
    geo = recover_metric_density(circle_lsd)
    assert np.abs(geo.density * 2 * np.pi - 1).max() < 0.02
    assert np.sum(geo.volume) == pytest.approx(2 * np.pi, rel=0.02)
    assert np.all(np.linalg.eigvalsh(geo.metric) > 0)


def test_metric_invariant_under_eigenfunction_scaling(density_geometry):
    _, _, lsd, geo = density_geometry
    other = recover_metric_density(lsd.scaled(3.7))
    np.testing.assert_allclose(other.metric, geo.metric, rtol=1e-8)
    np.testing.assert_allclose(other.dlog_density, geo.dlog_density, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(other.density, geo.density, rtol=1e-8)


def test_moment_quadrature_matches_weights(circle, circle_phd, circle_lsd):
    sp, _ = circle
    q = moment_quadrature(circle_lsd)
    share = sp.weights[circle_phd.net_points] * sp.vertex_count / circle_phd.net_size
    assert q.sum() == pytest.approx(1.0, rel=1e-6)
    assert np.abs(q / share - 1).max() < 0.05
