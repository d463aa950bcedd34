"""Synthetic cities and measurement campaigns for desk-scale experiments."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError
from .grid import GridSpec, RadioMap, write_esri_ascii, write_grid
from .ingest import MeasurementRecord, enu_to_geo, write_measurements
from .pathloss import PathLossParams, predict_rssi
from .sidechannels import BuildingScene, building_count_channel, write_buildings_geojson

DEFAULT_ORIGIN = (48.8566, 2.3522)
EPOCH = datetime(2024, 1, 1, tzinfo=timezone.utc)


@dataclass
class SynthScene:
    spec: GridSpec
    buildings: BuildingScene
    dsm: np.ndarray
    dsm_spec: GridSpec
    roads: np.ndarray
    bs_list: list
    origin: tuple = DEFAULT_ORIGIN
    meta: dict = field(default_factory=dict)

    @property
    def building_mask(self):
        return self.buildings.rasterize(self.spec)

    def bs_id(self, k):
        return f"bs{k}"

    def check(self):
        if np.any(self.roads & self.building_mask):
            raise ConfigError("roads and buildings overlap")
        for r, c in self.bs_list:
            if self.building_mask[r, c]:
                raise ConfigError(f"station at {(r, c)} sits on a building")


def _city_rng(seed, salt):
    return np.random.default_rng(np.random.SeedSequence([int(seed), salt]))


def road_lattice(spec: GridSpec, pitch):
    if pitch < 2:
        raise ConfigError(f"road pitch must be at least 2 cells, got {pitch}")
    r, c = np.indices(spec.shape)
    return (r % pitch == 0) | (c % pitch == 0)


def _blocks(length, pitch):
    """Half-open index ranges of the free strips between roads."""
    starts = range(1, length, pitch)
    return [(s, min(s + pitch - 1, length)) for s in starts if s < length]


def gen_city(seed, spec: GridSpec, building_density=0.5, road_pitch=12, n_stations=4,
             dsm_cell=30.0, origin=DEFAULT_ORIGIN, max_height=40.0, ramp=20.0):
    """Street lattice, one random rectangular building per block with
    probability ``building_density``, a tilted-plane terrain plus building
    heights as DSM, and ``n_stations`` stations on free cells."""
    if not 0.0 <= building_density <= 1.0:
        raise ConfigError(f"building density must lie in [0, 1], got {building_density}")
    if n_stations < 0:
        raise ConfigError("station count must be non-negative")
    rng = _city_rng(seed, 0)
    roads = road_lattice(spec, road_pitch)
    ids = np.zeros(spec.shape, dtype=np.int64)
    heights = np.zeros(spec.shape)
    footprints, bids = [], []
    for r0, r1 in _blocks(spec.height, road_pitch):
        for c0, c1 in _blocks(spec.width, road_pitch):
            if rng.random() >= building_density:
                continue
            h = int(rng.integers(1, r1 - r0 + 1))
            w = int(rng.integers(1, c1 - c0 + 1))
            top = r0 + int(rng.integers(0, r1 - r0 - h + 1))
            left = c0 + int(rng.integers(0, c1 - c0 - w + 1))
            bid = len(bids) + 1
            ids[top:top + h, left:left + w] = bid
            heights[top:top + h, left:left + w] = rng.uniform(5.0, max_height)
            west = spec.origin_east + left * spec.cell_size
            south = spec.origin_north + top * spec.cell_size
            east, north = west + w * spec.cell_size, south + h * spec.cell_size
            footprints.append([np.array([[west, south], [east, south], [east, north], [west, north]])])
            bids.append(bid)
    building = ids > 0
    scene_b = BuildingScene(footprints, bids, building, ids)

    # terrain ramp over the whole extent, buildings on top, block-averaged
    east, north = spec.centers()
    w, s, e, n = spec.bounds
    tilt = rng.uniform(0, 2 * math.pi)
    u = ((east - w) * math.cos(tilt) + (north - s) * math.sin(tilt)) / max(e - w, n - s)
    surface = ramp * (u - u.min()) + heights
    dsm_spec = GridSpec(spec.origin_east, spec.origin_north, float(dsm_cell),
                        math.ceil((e - w) / dsm_cell), math.ceil((n - s) / dsm_cell))
    rows, cols, _ = dsm_spec.locate(east, north)
    flat = (rows * dsm_spec.width + cols).ravel()
    total = np.bincount(flat, surface.ravel(), dsm_spec.width * dsm_spec.height)
    cnt = np.bincount(flat, minlength=dsm_spec.width * dsm_spec.height)
    dsm = (total / np.maximum(cnt, 1)).reshape(dsm_spec.shape)

    # stations on free cells, kept away from the border
    mr, mc = spec.height // 5, spec.width // 5
    fr, fc = np.nonzero(~building)
    inner = (fr >= mr) & (fr < spec.height - mr) & (fc >= mc) & (fc < spec.width - mc)
    fr, fc = (fr[inner], fc[inner]) if inner.any() else (fr, fc)
    if n_stations > fr.size:
        raise ConfigError("not enough free cells for the requested stations")
    pick = rng.choice(fr.size, size=n_stations, replace=False)
    bs_list = [(int(fr[k]), int(fc[k])) for k in pick]

    scene = SynthScene(spec, scene_b, dsm, dsm_spec, roads, bs_list, tuple(origin),
                       {"seed": int(seed), "building_density": float(building_density),
                        "road_pitch": int(road_pitch)})
    scene.check()
    return scene


def shadowing(spec: GridSpec, sigma, corr, rng):
    """Zero-mean shadowing field with standard deviation ``sigma`` dB."""
    white = rng.normal(0.0, 1.0, spec.shape)
    if corr > 0:
        white = gaussian_filter(white, corr / spec.cell_size, mode="wrap")
        white = (white - white.mean()) / white.std()
    return sigma * white


def truth_map(scene: SynthScene, params: PathLossParams, bs_index=0, per_building_loss=6.0,
              floor=-120.0, seed=0, shadow_corr=0.0):
    """Ground-truth RSSI of one station over every cell.

    Shadowing is N(0, sigma) per cell; with ``shadow_corr`` > 0 (metres) the
    field is Gaussian-smoothed to that correlation length and rescaled so its
    standard deviation stays sigma.
    """
    spec = scene.spec
    r0, c0 = scene.bs_list[bs_index]
    r, c = np.indices(spec.shape)
    d = np.maximum(spec.cell_size * np.hypot(r - r0, c - c0), params.d0)
    values = predict_rssi(params, d)
    if per_building_loss:
        values = values - per_building_loss * building_count_channel(scene.buildings, spec, (r0, c0))
    if params.sigma > 0:
        values = values + shadowing(spec, params.sigma, shadow_corr, _city_rng(seed, 1000 + bs_index))
    values = np.maximum(values, floor)
    return RadioMap.dense(spec, values, bs_id=scene.bs_id(bs_index), bs_cell=[r0, c0])


def gen_measurements(scene: SynthScene, params: PathLossParams, per_building_loss=6.0,
                     floor=-120.0, sample_fraction=0.3, seed=0, bs_index=0, fading_std=0.0,
                     shadow_corr=0.0):
    """Drive-test records on road cells plus the ground-truth map.

    A ``sample_fraction`` of road cells is visited; each visited cell yields
    Poisson(3)+1 records at the cell centre, with optional per-record
    Gaussian fading of ``fading_std`` dB on top of the cell truth.
    """
    if not 0.0 <= sample_fraction <= 1.0:
        raise ConfigError(f"sample fraction must lie in [0, 1], got {sample_fraction}")
    truth = truth_map(scene, params, bs_index, per_building_loss, floor, seed, shadow_corr)
    rng = _city_rng(seed, 2000 + bs_index)
    rr, cc = np.nonzero(scene.roads)
    n_pick = int(round(sample_fraction * rr.size))
    order = np.sort(rng.choice(rr.size, size=n_pick, replace=False))
    rr, cc = rr[order], cc[order]
    reps = rng.poisson(3.0, size=rr.size) + 1
    rows, cols = np.repeat(rr, reps), np.repeat(cc, reps)
    rssi = truth.values[rows, cols]
    if fading_std > 0:
        rssi = rssi + rng.normal(0.0, fading_std, rssi.size)
    east, north = scene.spec.center(rows, cols)
    lat, lon = enu_to_geo(east, north, *scene.origin)
    gw = scene.bs_id(bs_index)
    # a moving device: 10 s between fixes, so no reading looks static
    records = [
        MeasurementRecord(gw, f"dev{bs_index}", float(v), float(a), float(o), EPOCH + timedelta(seconds=10 * k))
        for k, (v, a, o) in enumerate(zip(rssi, lat, lon))
    ]
    return records, truth


def gen_campaign(scene: SynthScene, params, per_building_loss=6.0, floor=-120.0,
                 sample_fraction=0.3, seed=0, fading_std=0.0, shadow_corr=0.0):
    """Records of every station; ``params`` may be one set or one per station."""
    if isinstance(params, PathLossParams):
        params = [params] * len(scene.bs_list)
    if len(params) != len(scene.bs_list):
        raise ConfigError("need one parameter set per station")
    records, truths = [], {}
    for k, p in enumerate(params):
        recs, truth = gen_measurements(scene, p, per_building_loss, floor, sample_fraction, seed, k, fading_std,
                                         shadow_corr)
        records.extend(recs)
        truths[scene.bs_id(k)] = truth
    return records, truths


def export_scene(directory, scene: SynthScene, records, truths, extra=None):
    """Write measurements CSV, buildings GeoJSON, DSM grid, truths and manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_measurements(d / "measurements.csv", records)
    write_buildings_geojson(d / "buildings.geojson", scene.buildings, *scene.origin)
    write_esri_ascii(d / "dsm.asc", scene.dsm, scene.dsm_spec)
    write_grid(d / "roads.f32", scene.roads.astype(np.float32), scene.spec)
    for bs_id, t in truths.items():
        t.save(d / f"truth_{bs_id}")
    manifest = {
        "grid": scene.spec.to_json(),
        "origin": list(scene.origin),
        "stations": [{"id": scene.bs_id(k), "row": r, "col": c} for k, (r, c) in enumerate(scene.bs_list)],
        "n_buildings": len(scene.buildings.footprints),
        **scene.meta,
        **(extra or {}),
    }
    (d / "scene.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d / "scene.json"
