import json

import numpy as np
import pytest

from rssimap.grid import GridSpec, read_esri_ascii
from rssimap.ingest import aggregate_to_grid, project_records, read_measurements
from rssimap.pathloss import PathLossParams, fit_pathloss
from rssimap.sidechannels import BuildingScene, read_buildings_geojson
from rssimap.synthcity import export_scene, gen_campaign, gen_city, gen_measurements, shadowing, truth_map

SPEC = GridSpec(0.0, 0.0, 10.0, 60, 50)
PARIS = PathLossParams(p0=-51.88, n=2.89, sigma=0.0)


def test_zero_density_has_no_buildings():
    s = gen_city(1, SPEC, building_density=0.0)
    assert not s.building_mask.any() and not s.buildings.footprints


def test_same_seed_same_scene():
    a, b = gen_city(5, SPEC), gen_city(5, SPEC)
    assert np.array_equal(a.buildings.id_raster, b.buildings.id_raster)
    assert np.array_equal(a.dsm, b.dsm) and a.bs_list == b.bs_list
    assert not np.array_equal(a.buildings.id_raster, gen_city(6, SPEC).buildings.id_raster)


def test_no_road_building_overlap_on_100_scenes():
    rng = np.random.default_rng(0)
    for seed in range(100):
        spec = GridSpec(0, 0, 10, int(rng.integers(20, 70)), int(rng.integers(20, 70)))
        s = gen_city(seed, spec, float(rng.random()), int(rng.integers(3, 15)))
        assert int((s.roads & s.building_mask).sum()) == 0
        assert all(not s.building_mask[r, c] for r, c in s.bs_list)


def test_footprints_rasterize_to_mask():
    s = gen_city(2, SPEC, 0.8)
    poly = BuildingScene(s.buildings.footprints, s.buildings.ids)
    assert np.array_equal(poly.rasterize(SPEC), s.building_mask)
    assert np.array_equal(poly.ids_raster(SPEC), s.buildings.id_raster)


def _single_building_scene():
    s = gen_city(0, GridSpec(0, 0, 10, 21, 3), 0.0, road_pitch=50, n_stations=1)
    ids = np.zeros(s.spec.shape, np.int64)
    ids[1, 5:8] = 1
    s.buildings = BuildingScene.from_raster(ids > 0, ids)
    s.roads[:] = False
    s.bs_list = [(1, 0)]
    return s


def test_hand_fixture_one_building():
    s = _single_building_scene()
    t = truth_map(s, PARIS)
    assert t.values[1, 10] == pytest.approx(-115.68, abs=1e-9)
    assert t.values[1, 3] == pytest.approx(-51.88 - 28.9 * np.log10(30), abs=1e-9)
    assert t.values[1, 0] == -51.88


def test_truth_floor_clamp_and_determinism():
    s = gen_city(3, GridSpec(0, 0, 50, 80, 80), 0.7)
    p = PathLossParams(-60.0, 3.5, sigma=8.0)
    t = truth_map(s, p, seed=4)
    assert t.values.min() == -120.0
    assert np.array_equal(t.values, truth_map(s, p, seed=4).values)


def test_records_on_roads_with_repeats():
    s = gen_city(7, SPEC, 0.5)
    recs, truth = gen_measurements(s, PARIS, sample_fraction=0.5, seed=1)
    e, n = project_records(recs, *s.origin)
    rows, cols, inside = SPEC.locate(e, n)
    assert inside.all() and s.roads[rows, cols].all()
    agg, _ = aggregate_to_grid(e, n, [r.rssi for r in recs], SPEC)
    assert agg.n_masked == round(0.5 * s.roads.sum())
    assert agg.count[agg.mask].min() >= 1
    assert np.allclose(agg.values[agg.mask], truth.values[agg.mask], atol=1e-9)


def test_noise_free_round_trip():
    s = gen_city(9, GridSpec(0, 0, 10, 80, 80), 0.0)
    recs, _ = gen_measurements(s, PARIS, per_building_loss=0.0, floor=-np.inf, sample_fraction=1.0, seed=2)
    e, n = project_records(recs, *s.origin)
    be, bn = SPEC.center(*s.bs_list[0])
    d = np.maximum(np.hypot(e - be, n - bn), 1.0)
    fit = fit_pathloss(d, [r.rssi for r in recs])
    assert fit.p0 == pytest.approx(-51.88, abs=1e-6) and fit.n == pytest.approx(2.89, abs=1e-6)


def test_export(tmp_path):
    s = gen_city(4, SPEC, 0.6)
    recs, truths = gen_campaign(s, PARIS, seed=0)
    export_scene(tmp_path, s, recs, truths)
    back, rejects = read_measurements(tmp_path / "measurements.csv")
    assert len(back) == len(recs) and not rejects
    assert {r.gateway_id for r in back} == {"bs0", "bs1", "bs2", "bs3"}
    dsm, dsm_spec = read_esri_ascii(tmp_path / "dsm.asc")
    assert np.allclose(dsm, s.dsm) and dsm_spec.cell_size == 30
    geo = read_buildings_geojson(tmp_path / "buildings.geojson", *s.origin)
    assert np.array_equal(geo.rasterize(SPEC), s.building_mask)
    meta = json.loads((tmp_path / "scene.json").read_text())
    assert [tuple((st["row"], st["col"])) for st in meta["stations"]] == s.bs_list


def test_correlated_shadowing_keeps_sigma_and_smooths():
    spec = GridSpec(0, 0, 10, 128, 128)
    rng = np.random.default_rng
    white = shadowing(spec, 4.0, 0.0, rng(0))
    corr = shadowing(spec, 4.0, 50.0, rng(0))
    assert abs(corr.std() - 4.0) < 1e-9 and abs(corr.mean()) < 1e-9
    lag1 = lambda f: np.corrcoef(f[:, :-1].ravel(), f[:, 1:].ravel())[0, 1]
    assert lag1(corr) > 0.9 and abs(lag1(white)) < 0.05
