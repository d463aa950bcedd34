"""Held-out base-station experiment on a synthetic city.

Three stations train the networks; the fourth is never seen in training.
Its measured cells are split into an observed input map and test cells,
and every method is scored on the test cells.
"""
from dataclasses import dataclass

import numpy as np

from rssimap import pipeline as P
from rssimap.config import EvalConfig, PreprocessConfig, TileConfig
from rssimap.evalreport import TestPoints, zone_mae
from rssimap.grid import GridSpec
from rssimap.nas.genome import Skeleton, uniform_genome
from rssimap.pathloss import PathLossParams
from rssimap.synthcity import gen_campaign, gen_city
from rssimap.trainer import StationContext, TrainConfig, predict_full, train_scenario1, train_scenario2

FULL = ("measurements", "distance", "elevation")
VARIANTS = {"msm": ("measurements",), "msm_dist": ("measurements", "distance"), "msm_dist_elev": FULL}


@dataclass(frozen=True)
class Setup:
    size: int = 192
    building_density: float = 0.6
    road_pitch: int = 12
    ramp: float = 0.0
    p0: float = -40.0
    n: float = 2.3
    sigma: float = 6.0
    shadow_corr: float = 0.0
    fading_std: float = 4.0
    sample_fraction: float = 0.3
    test_fraction: float = 0.3
    tile: int = 64
    stride: int = 20
    widths: tuple = (8, 16, 32, 64)
    epochs: int = 50
    patience: int = 10


def _annulus_mae(pred, pts, cell, lo, hi, building):
    d = np.hypot(pts.rows - cell[0], pts.cols - cell[1]) * 10.0
    e = pred.values[pts.rows, pts.cols] - pts.values
    sel = (d > lo) & (d <= hi) & ~building[pts.rows, pts.cols] & np.isfinite(e)
    return float(np.abs(e[sel]).mean())


def run_seed(seed, setup=Setup()):
    """Zone MAE per method for one seed; returns {method: {200, 400, "200-400"}}."""
    spec = GridSpec(0.0, 0.0, 10.0, setup.size, setup.size)
    scene = gen_city(seed, spec, setup.building_density, setup.road_pitch, 4, ramp=setup.ramp)
    params = PathLossParams(setup.p0, setup.n, setup.sigma)
    recs, _ = gen_campaign(scene, params, sample_fraction=setup.sample_fraction, seed=seed,
                           fading_std=setup.fading_std, shadow_corr=setup.shadow_corr)
    maps, _ = P.station_maps(recs, spec, scene.origin, PreprocessConfig())
    cells = {scene.bs_id(k): c for k, c in enumerate(scene.bs_list)}
    held = "bs3"
    st = P.split_stations(maps, cells, (held,), 0.1, setup.test_fraction, seed)
    raw = {s: P.side_rasters(spec, cells[s], scene.buildings, scene.dsm, scene.dsm_spec) for s in st}
    bounds = P.shared_bounds(raw)
    stacks = {s: P.normalize_stack(raw[s], spec, bounds) for s in st}
    bld = scene.building_mask
    tiles = P.training_corpus(st, stacks, bld, TileConfig(setup.tile, setup.stride),
                              P.measurement_range(st), seed)

    h = st[held]
    pts = TestPoints.from_map(h.val)
    preds = {m: P.baseline(m, h.train, EvalConfig()) for m in ("rbf", "knn")}
    genome = uniform_genome(Skeleton(setup.widths), "conv3")

    def cfg(channels):
        return TrainConfig(channels=channels, epochs=setup.epochs, patience=setup.patience, seed=seed,
                           widths=setup.widths)

    models = {}
    for name, ch in VARIANTS.items():
        models[name] = train_scenario1(genome, tiles, cfg(ch))
        preds[name] = predict_full(models[name], stacks[held], h.train, bld, setup.tile, setup.stride)
    ctx = {s: StationContext(stacks[s], st[s].train, bld) for s in st if s != held}
    f2, _ = train_scenario2(models["msm_dist_elev"], tiles, ctx, cfg(FULL), stride=setup.stride)
    preds["f2"] = predict_full(f2, stacks[held], h.train, bld, setup.tile, setup.stride)

    out = {}
    for name, pred in preds.items():
        z = zone_mae(pred, pts, h.cell, (200.0, 400.0), bld)
        out[name] = {"200": z[200.0], "400": z[400.0],
                     "200-400": _annulus_mae(pred, pts, h.cell, 200.0, 400.0, bld)}
    return out
