import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatrecon.config import limit_circle
from heatrecon.phd import (PHDError, averaged_phd, farthest_point_net, perturb, phd_discrepancy,
                           read_phd, sample_phd, time_net, write_phd)
from heatrecon.space import build_circle, build_warped_torus
from heatrecon.spectral import solve_space

from conftest import bump_profile


@pytest.fixture(scope="module")
def small_circle():
    sp = build_circle(128, density_profile=bump_profile)
    return sp, solve_space(sp)


@pytest.fixture(scope="module")
def small_phd(small_circle):
    _, spec = small_circle
    return sample_phd(spec, spec.source_space.diameter, 0.2, time_delta=0.1)


def test_full_circle_net_size_and_symmetry(circle_phd):
    L = 2 * np.pi
    assert abs(circle_phd.net_size - L / 0.1) <= 0.1 * L / 0.1
    np.testing.assert_array_equal(circle_phd.values, circle_phd.values.transpose(1, 0, 2))


def test_net_covers_ball(circle, circle_phd):
    sp, _ = circle
    D = sp.distance_matrix
    assert D[:, circle_phd.net_points].min(axis=1).max() <= 0.1
    sub = D[np.ix_(circle_phd.net_points, circle_phd.net_points)]
    assert (sub + np.eye(len(sub)) * 10).min() >= 0.05 - 1e-12


def test_time_net_is_fine_in_the_window():
    t = time_net(0.05)
    grid = np.linspace(0.05, 20.0, 4001)
    assert np.all(t > 0.05) and np.all(t < 20.0)
    assert np.abs(grid[:, None] - t[None, :]).min(axis=1).max() <= 0.05
    assert np.all(np.diff(t) > 0)
    with pytest.raises(PHDError):
        time_net(1.5)


def test_large_time_values_near_one(circle):
    _, spec = circle
    data = sample_phd(spec, spec.source_space.diameter, 0.5, time_delta=0.01)
    # 1/delta = 100 >= 50/lambda_1
    assert np.abs(data.values[:, :, -1] - 1).max() < 1e-6


def test_rotated_circles_agree_after_matching():
    n, shift = 256, 37
    h = 2 * np.pi / n
    a = build_circle(n, density_profile=bump_profile)
    b = build_circle(n, density_profile=bump_profile, offset=shift * h, base_point=n - shift)
    spec_a, spec_b = solve_space(a), solve_space(b)
    data_b = sample_phd(spec_b, b.diameter, 0.2, time_delta=0.1)
    # vertex i of b sits where vertex i + shift of a does
    data_a = sample_phd(spec_a, a.diameter, 0.2, time_delta=0.1, net=(data_b.net_points + shift) % n)
    assert phd_discrepancy(data_a, data_b) < 1e-8


def test_single_vertex_average_is_pointwise(small_circle, small_phd):
    _, spec = small_circle
    avg = averaged_phd(spec, spec.source_space.diameter, 0.2, 0.0, time_delta=0.1)
    assert avg.averaged and not small_phd.averaged
    np.testing.assert_allclose(avg.values, small_phd.values, atol=1e-12)


def test_averaged_values_symmetric_and_lipschitz(small_circle, small_phd):
    sp, spec = small_circle
    eps = 3 * sp.spacing
    avg = averaged_phd(spec, sp.diameter, 0.2, eps, time_delta=0.1)
    np.testing.assert_array_equal(avg.values, avg.values.transpose(1, 0, 2))
    # spatial Lipschitz constant of H(., z, t) by finite differences on the grid
    H = np.stack([spec.heat_matrix(t) for t in small_phd.times], axis=2)
    lip = np.max(np.abs(np.roll(H, -1, axis=0) - H), axis=(0, 1)) / sp.spacing
    gap = np.abs(avg.values - small_phd.values).max(axis=(0, 1))
    assert np.all(gap <= lip * 2 * eps + 1e-12)
    assert gap.max() > 0


def test_averaging_radius_below_mesh_rejected(small_circle):
    sp, spec = small_circle
    with pytest.raises(PHDError):
        averaged_phd(spec, sp.diameter, 0.2, 0.5 * sp.spacing)


def test_delta_below_mesh_rejected(small_circle):
    sp, spec = small_circle
    with pytest.raises(PHDError, match="mesh"):
        sample_phd(spec, sp.diameter, 0.5 * sp.spacing, time_delta=0.1)
    with pytest.raises(PHDError):
        sample_phd(spec, 10 * sp.diameter, 0.2)


def test_zero_noise_is_identity(small_phd):
    same = perturb(small_phd, 0.0)
    np.testing.assert_array_equal(same.values, small_phd.values)


@pytest.mark.parametrize("noise", [1e-6, 1e-3, 0.1])
def test_perturbation_bounded_and_symmetric(small_phd, noise):
    out = perturb(small_phd, noise, seed=4)
    d = out.values - small_phd.values
    assert np.abs(d).max() < noise
    np.testing.assert_array_equal(out.values, out.values.transpose(1, 0, 2))
    assert phd_discrepancy(small_phd, out) < noise


def test_perturbation_deterministic(small_phd):
    a, b = perturb(small_phd, 1e-3, seed=9), perturb(small_phd, 1e-3, seed=9)
    assert a.values.tobytes() == b.values.tobytes()
    assert perturb(small_phd, 1e-3, seed=10).values.tobytes() != a.values.tobytes()
    with pytest.raises(PHDError):
        perturb(small_phd, 1e-3)
    with pytest.raises(PHDError):
        perturb(small_phd, -1.0, seed=1)


def test_self_discrepancy_zero(small_circle, small_phd):
    _, spec = small_circle
    again = sample_phd(solve_space(build_circle(128, density_profile=bump_profile)),
                       spec.source_space.diameter, 0.2, time_delta=0.1)
    assert phd_discrepancy(small_phd, small_phd) == 0.0
    assert phd_discrepancy(small_phd, again) < 1e-12


def test_discrepancy_rejects_cardinality_mismatch(small_phd, circle_phd):
    with pytest.raises(PHDError):
        phd_discrepancy(small_phd, circle_phd)
    with pytest.raises(PHDError):
        phd_discrepancy(small_phd, small_phd, matching=[0, 1])


def test_matching_is_applied(small_phd):
    n = small_phd.net_size
    perm = np.roll(np.arange(n), 1)
    assert phd_discrepancy(small_phd, small_phd, matching=perm) > 1e-3


def test_collapsing_torus_approaches_limit_circle():
    c = lambda y: 2 + np.cos(np.pi * y)  # noqa: E731
    n_y, n_z = 32, 16
    circ = limit_circle(n_y, {"kind": "cosine", "a": 2.0, "b": 1.0, "k": 1})
    rows = np.arange(0, n_y, 2)
    ref = sample_phd(solve_space(circ), circ.diameter, 0.25, 0.1, net=rows)
    disc = {}
    for sigma in (0.25, 0.125):
        tor = build_warped_torus(n_y, n_z, sigma, c)
        # each circle vertex matched to the first fiber vertex over it
        heat = sample_phd(solve_space(tor), tor.diameter, 0.25, 0.1, net=rows * n_z)
        disc[sigma] = phd_discrepancy(heat, ref)
    assert disc[0.125] < disc[0.25]


def test_file_round_trip_is_bit_exact(tmp_path, small_phd):
    noisy = perturb(small_phd, 1e-3, seed=2)
    path = tmp_path / "h.phd"
    write_phd(noisy, path)
    back = read_phd(path)
    assert back.values.tobytes() == noisy.values.tobytes()
    assert back.times.tobytes() == noisy.times.tobytes()
    np.testing.assert_array_equal(back.net_points, noisy.net_points)
    assert (back.delta, back.time_delta, back.noise, back.seed) == (0.2, 0.1, noisy.noise, 2)


@pytest.mark.parametrize("text", ["", "not json\n", '{"format": "other"}\n', '{"format": "phd-v1"}\nx,y\n'])
def test_malformed_files_rejected(tmp_path, text):
    path = tmp_path / "bad.phd"
    path.write_text(text)
    with pytest.raises((PHDError, KeyError)):
        read_phd(path)


def test_truncated_body_rejected(tmp_path, small_phd):
    path = tmp_path / "h.phd"
    write_phd(small_phd, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(PHDError, match="rows"):
        read_phd(path)


def test_fps_net_deterministic_and_covering():
    sp = build_warped_torus(10, 6, 0.5)
    D = sp.distance_matrix
    a = farthest_point_net(D, np.arange(sp.vertex_count), 0.4, 0)
    b = farthest_point_net(D, np.arange(sp.vertex_count), 0.4, 0)
    np.testing.assert_array_equal(a, b)
    assert D[:, a].min(axis=1).max() <= 0.2 + 1e-12


@settings(max_examples=25, deadline=None)
@given(seeds=st.lists(st.integers(0, 2**31), min_size=3, max_size=3, unique=True),
       levels=st.lists(st.floats(1e-6, 1e-1), min_size=3, max_size=3))
def test_discrepancy_is_pseudometric(small_phd, seeds, levels):
    a, b, c = (perturb(small_phd, lv, seed=s) for lv, s in zip(levels, seeds))
    ab, bc, ac = phd_discrepancy(a, b), phd_discrepancy(b, c), phd_discrepancy(a, c)
    assert ab == phd_discrepancy(b, a)
    assert ac <= ab + bc + 1e-15
    assert phd_discrepancy(a, a) == 0.0
