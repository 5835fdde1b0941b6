import json

import numpy as np
import pytest

from heatrecon.inverse.pipeline import (InverseConfig, ReconstructionError, reconstruct,
                                        reconstruct_from_lsd, write_reconstruction)
from heatrecon.phd import PointHeatData, sample_phd, time_net
from heatrecon.space import build_circle
from heatrecon.spectral import solve_space

SUBSET = list(range(0, 64, 9))


def outputs(res):
    g = res.geometry
    return {
        "eigenvalues": res.lsd.eigenvalues,
        "metric": g.metric,
        "frame_metric": g.frame_metric,
        "dlog_density": g.dlog_density,
        "density": g.density,
        "volume": g.volume,
        "distances": res.distances.matrix,
        "inj": res.inj_radius,
    }


@pytest.fixture(scope="module")
def gauge_pair(density_lsd, density_phd):
    cfg = InverseConfig(inj_points=SUBSET)
    a = reconstruct_from_lsd(density_lsd, density_phd.delta, config=cfg)
    b = reconstruct_from_lsd(density_lsd.random_gauge(17), density_phd.delta, config=cfg)
    return a, b


def test_outputs_invariant_under_eigenspace_rotations(gauge_pair):
    a, b = gauge_pair
    oa, ob = outputs(a), outputs(b)
    for key in oa:
        scale = max(1.0, float(np.nanmax(np.abs(oa[key]))))
        assert np.nanmax(np.abs(oa[key] - ob[key])) <= 1e-8 * scale, key
    assert [c.indices for c in a.charts] == [c.indices for c in b.charts]


def test_isometric_grids_give_relabelled_outputs(circle, circle_phd, circle_recon):
    n, shift = 512, 96
    h = 2 * np.pi / n
    sp = build_circle(n, offset=shift * h, base_point=n - shift)
    data = sample_phd(solve_space(sp, 400), sp.diameter, 0.1, time_delta=0.05)
    other = reconstruct(data, InverseConfig(injectivity=False))
    # match nets through the physical positions of the net points
    pos_a = circle[0].coords[circle_phd.net_points, 0] % (2 * np.pi)
    pos_b = sp.coords[data.net_points, 0] % (2 * np.pi)
    match = np.array([int(np.argmin(np.abs(pos_b - p))) for p in pos_a])
    assert np.abs(pos_b[match] - pos_a).max() < 1e-9
    Da = circle_recon.distances.matrix
    Db = other.distances.matrix[np.ix_(match, match)]
    assert np.abs(Da - Db).max() < 1e-6
    np.testing.assert_allclose(other.density[match], circle_recon.density, rtol=1e-6)


def test_result_invariants(density_recon):
    g = density_recon.geometry
    assert abs(g.total_mass - 1) < 1e-6
    interior = ~g.flagged
    assert np.all(np.linalg.eigvalsh(g.metric[interior]) > 0)
    assert np.all(g.density > 0)
    d = density_recon.diagnostics
    assert d["dim"] == 1 and d["distance_flagged"] == 0
    assert d["triangle_violation"] <= d["distance_slack"] + 1e-12


def test_as_net_is_probability_net(density_recon):
    net = density_recon.as_net()
    assert abs(net.weights.sum() - 1) < 1e-12
    np.testing.assert_array_equal(net.distances, density_recon.distances.matrix)


def test_document_round_trips_through_json(tmp_path, density_recon):
    paths = write_reconstruction(density_recon, tmp_path, extra={"note": np.float64(1.5)})
    doc = json.loads(paths[0].read_text())
    assert doc["format"] == "reconstruction-v1" and doc["c0_known"] is False
    assert doc["net_size"] == density_recon.lsd.net_size == len(doc["points"])
    assert doc["truth"]["note"] == 1.5
    rec = doc["points"][3]
    assert set(rec) >= {"chart", "coordinates", "metric", "drift", "density", "inj_radius"}
    table = np.loadtxt(paths[1], delimiter=",", skiprows=1)[:, 1:]
    np.testing.assert_array_equal(table, density_recon.distances.matrix)
    # rewriting gives identical bytes
    first = [p.read_bytes() for p in paths]
    write_reconstruction(density_recon, tmp_path, extra={"note": np.float64(1.5)})
    assert [p.read_bytes() for p in paths] == first


def test_failing_stage_is_named():
    t = time_net(0.1)
    data = PointHeatData(np.arange(2), t[:2], np.ones((2, 2, 2)), 0.1, 1.0, 0.1)
    with pytest.raises(ReconstructionError) as err:
        reconstruct(data)
    assert err.value.stage == "fit"
    tiny = PointHeatData(np.arange(2), t, np.ones((2, 2, len(t))) + 0.5 * np.exp(-t)[None, None] *
                         np.array([[1, -1], [-1, 1]])[:, :, None], 0.1, 1.0, 0.1)
    with pytest.raises(ReconstructionError) as err:
        reconstruct(tiny)
    assert err.value.stage in ("metric", "geometry")


def test_config_validation():
    with pytest.raises(ValueError):
        InverseConfig(step_factor=0)
    with pytest.raises(ValueError):
        InverseConfig(kind="wavelet")
    with pytest.raises(ValueError, match="unknown"):
        InverseConfig.from_dict({"stepfactor": 1.0})
    assert InverseConfig.from_dict({"n_time": 12}).n_time == 12


def test_injectivity_thickness_respects_band_resolution():
    # a full-grid net whose fitted band is coarser than twice the grid step
    sp = build_circle(128)
    data = sample_phd(solve_space(sp), sp.diameter, sp.spacing * (1 + 1e-7), time_delta=0.05)
    res = reconstruct(data, InverseConfig(inj_points=list(range(0, 128, 16))))
    step = res.diagnostics["injectivity_grid_step"]
    resolution = np.pi / np.sqrt(res.lsd.eigenvalues[-1])
    assert res.diagnostics["injectivity_eps"] >= 1.25 * resolution - 1e-12 > 2 * step
    assert np.abs(res.inj_radius - np.pi).max() <= step + 1e-9
