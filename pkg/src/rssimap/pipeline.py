"""Experiment stages with on-disk artifacts between them.

Each ``stage_*`` function reads its inputs from the work directory (or the
configured raw inputs), writes its outputs there and returns the written
paths.  The in-memory helpers above them are shared with the tests.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from datetime import timedelta
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError, SchemaError
from .evalreport import TestPoints, evaluate, write_report
from .grid import GridSpec, RadioMap, read_esri_ascii, read_grid, read_grid_bands, write_grid
from .ingest import (
    aggregate_to_grid,
    filter_artifacts,
    filter_cells,
    geo_to_enu,
    project_records,
    read_measurements,
    split_train_val,
)
from .interp import AnchorSet, knn_interpolate, rbf_interpolate, tv_inpaint
from .nas.genome import ALL_OPS, ArchGenome, Skeleton, uniform_genome
from .nas.search import TrainEvaluator, evolve, read_best, write_best
from .pathloss import fit_pathloss, write_pathloss_csv
from .sidechannels import (
    building_count_channel,
    buildings_channel,
    distance_channel,
    elevation_channel,
    normalize_stack,
    read_buildings_geojson,
)
from .tiles import build_corpus, load_tiles, save_tiles
from .trainer import StationContext, TrainedModel, predict_full, train_scenario1, train_scenario2

logger = logging.getLogger(__name__)

SIDE_CHANNELS = ("distance", "elevation", "building_count", "buildings")


def derived_seed(seed, *salt):
    return int(np.random.SeedSequence([int(seed), *salt]).generate_state(1)[0])


@dataclass
class Station:
    """Aggregated maps of one base station.

    For a held-out station ``train`` holds the observed input cells and
    ``val`` the test cells.
    """

    id: str
    cell: tuple
    heldout: bool
    train: RadioMap
    val: RadioMap


# ---------------------------------------------------------------- in-memory steps

def station_maps(records, spec: GridSpec, origin, pre):
    """Artefact filter, per-gateway aggregation and cell filtering."""
    kept, removed = filter_artifacts(records, pre.ceiling, timedelta(minutes=pre.static_minutes),
                                     pre.position_tol)
    by_gw = {}
    for r in kept:
        by_gw.setdefault(r.gateway_id, []).append(r)
    maps, summary = {}, {"removed_artifacts": removed, "stations": {}}
    for gw in sorted(by_gw):
        recs = by_gw[gw]
        east, north = project_records(recs, *origin)
        agg, dropped = aggregate_to_grid(east, north, [r.rssi for r in recs], spec)
        maps[gw] = filter_cells(agg, pre.min_count, pre.drop_fraction)
        summary["stations"][gw] = {"records": len(recs), "outside_grid": dropped,
                                   "cells": agg.n_masked, "cells_kept": maps[gw].n_masked}
    return maps, summary


def split_stations(maps, cells, heldout, val_fraction, test_fraction, seed):
    out = {}
    for k, sid in enumerate(sorted(maps)):
        if sid not in cells:
            raise ConfigError(f"no position configured for station {sid!r}")
        frac = test_fraction if sid in heldout else val_fraction
        a, b = split_train_val(maps[sid], frac, derived_seed(seed, 1, k))
        out[sid] = Station(sid, tuple(cells[sid]), sid in heldout, a, b)
    missing = set(heldout) - set(out)
    if missing:
        raise ConfigError(f"held-out station(s) without measurements: {sorted(missing)}")
    return out


def side_rasters(spec, cell, buildings, dsm, dsm_spec):
    return {
        "distance": distance_channel(spec, cell),
        "elevation": elevation_channel(dsm, dsm_spec, spec),
        "building_count": building_count_channel(buildings, spec, cell).astype(np.float64),
        "buildings": buildings_channel(buildings, spec).astype(np.float64),
    }


def shared_bounds(rasters_by_station):
    """Per-channel (min, max) over all stations so channels share one scale."""
    bounds = {}
    for name in SIDE_CHANNELS:
        arrs = [r[name] for r in rasters_by_station.values()]
        bounds[name] = (float(min(np.nanmin(a) for a in arrs)), float(max(np.nanmax(a) for a in arrs)))
    return bounds


def measurement_range(stations):
    vals = []
    for st in stations.values():
        vals.append(st.train.values[st.train.mask])
        if not st.heldout:
            vals.append(st.val.values[st.val.mask])
    v = np.concatenate(vals)
    if v.size == 0:
        raise ConfigError("no measurements survive preprocessing")
    return float(v.min()), float(v.max())


def training_corpus(stations, stacks, building, tiles_cfg, value_range, seed):
    corpus = []
    for k, sid in enumerate(sorted(stations)):
        st = stations[sid]
        if st.heldout:
            continue
        corpus += build_corpus(stacks[sid], st.train, st.val, building, tiles_cfg.size, tiles_cfg.stride,
                               sid, value_range, derived_seed(seed, 2, k), tiles_cfg.flips,
                               tiles_cfg.cutout, start_index=len(corpus))
    if not corpus:
        raise ConfigError("no training stations: every station is held out")
    return corpus


def baseline(method, observed: RadioMap, ev):
    anchors = AnchorSet.from_map(observed)
    if method == "rbf":
        return rbf_interpolate(anchors, observed.spec)
    if method == "knn":
        return knn_interpolate(anchors, observed.spec, k=ev.knn_k)
    if method == "tv":
        return tv_inpaint(observed, max_iters=ev.tv_max_iters, tol=ev.tv_tol)
    raise ConfigError(f"unknown interpolation method {method!r}")


def parse_genome(value, widths):
    """A genome from a list of ops, ``uniform:<op>`` or a ``best.json`` path."""
    sk = Skeleton(tuple(widths))
    if isinstance(value, (list, tuple)):
        g = ArchGenome(tuple(value))
    elif isinstance(value, str) and value.startswith("uniform:"):
        op = value.split(":", 1)[1]
        if op not in ALL_OPS:
            raise ConfigError(f"unknown op {op!r}")
        g = uniform_genome(sk, op)
    else:
        p = Path(value)
        if not p.exists():
            raise ConfigError(f"genome file {p} does not exist; run `search` first")
        g = read_best(p)
    g.validate(sk)
    return g


# ---------------------------------------------------------------- artifact io

def _jdump(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _jload(path, stage):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path} is missing; run `{stage}` first")
    return json.loads(path.read_text())


def station_cells(cfg: ExperimentConfig, spec: GridSpec):
    if cfg.stations:
        cells = {}
        for s in cfg.stations:
            e, n = geo_to_enu(s.lat, s.lon, *cfg.grid.origin)
            r, c, inside = spec.locate(e, n)
            if not bool(inside):
                raise ConfigError(f"station {s.id} lies outside the grid")
            cells[s.id] = (int(r), int(c))
        return cells
    scene = cfg.workdir / "synth" / "scene.json"
    if not scene.exists():
        raise ConfigError("no [[stations]] configured and no synthetic scene to read them from")
    return {s["id"]: (s["row"], s["col"]) for s in json.loads(scene.read_text())["stations"]}


def heldout_ids(cfg, ids):
    ids = sorted(ids)
    if cfg.eval.heldout:
        return tuple(cfg.eval.heldout)
    return (ids[-1],) if len(ids) > 1 else ()


def load_stations(cfg):
    d = cfg.workdir / "ingest"
    meta = _jload(d / "stations.json", "ingest")
    out = {}
    for sid, m in meta["stations"].items():
        out[sid] = Station(sid, tuple(m["cell"]), m["heldout"],
                           RadioMap.load(d / f"{sid}.train"), RadioMap.load(d / f"{sid}.val"))
    return out, meta


def load_channels(cfg, stations):
    d = cfg.workdir / "channels"
    meta = _jload(d / "channels.json", "channels")
    bounds = {k: tuple(v) for k, v in meta["bounds"].items()}
    stacks = {}
    for sid in stations:
        arr, spec, bands = read_grid_bands(d / f"{sid}.f32")
        stacks[sid] = normalize_stack(dict(zip(bands, arr)), spec, bounds)
    building = read_grid(d / "buildings.f32")[0] > 0.5
    return stacks, building, meta


# ---------------------------------------------------------------- stages

def stage_synth(cfg: ExperimentConfig):
    from .synthcity import export_scene, gen_campaign, gen_city

    s = cfg.synth
    scene = gen_city(cfg.seed, cfg.grid.spec(), s.building_density, s.road_pitch, s.n_stations,
                     s.dsm_cell, cfg.grid.origin)
    records, truths = gen_campaign(scene, s.params(), s.per_building_loss, s.floor, s.sample_fraction,
                                   cfg.seed, s.fading_std, s.shadow_corr)
    out = cfg.workdir / "synth"
    export_scene(out, scene, records, truths, {"params": [vars(p) for p in s.params()]})
    logger.info("synthetic city: %d buildings, %d records", len(scene.buildings.footprints), len(records))
    return sorted(out.iterdir())


def stage_ingest(cfg: ExperimentConfig):
    cfg.check_inputs(["measurements"])
    spec = cfg.grid.spec()
    records, rejects = read_measurements(cfg.input_path("measurements"))
    maps, summary = station_maps(records, spec, cfg.grid.origin, cfg.preprocess)
    cells = station_cells(cfg, spec)
    held = heldout_ids(cfg, maps)
    stations = split_stations(maps, cells, held, cfg.preprocess.val_fraction, cfg.eval.test_fraction, cfg.seed)
    d = cfg.workdir / "ingest"
    d.mkdir(parents=True, exist_ok=True)
    for sid, st in stations.items():
        st.train.save(d / f"{sid}.train")
        st.val.save(d / f"{sid}.val")
        summary["stations"][sid].update(cell=list(st.cell), heldout=st.heldout,
                                        train_cells=st.train.n_masked, val_cells=st.val.n_masked)
    summary.update(rejected_rows=len(rejects), value_range=list(measurement_range(stations)),
                   grid=spec.to_json())
    logger.info("ingested %d records into %d stations", len(records), len(stations))
    return [_jdump(d / "stations.json", summary)] + sorted(d.glob("*.f32"))


def stage_fit_pathloss(cfg: ExperimentConfig):
    stations, _ = load_stations(cfg)
    rows = []
    for sid in sorted(stations):
        st = stations[sid]
        mask = st.train.mask | st.val.mask
        values = np.where(st.train.mask, st.train.values, st.val.values)
        r, c = np.nonzero(mask)
        d = np.maximum(st.train.spec.cell_size * np.hypot(r - st.cell[0], c - st.cell[1]), 1.0)
        rows.append((sid, fit_pathloss(d, values[r, c]), int(r.size)))
    path = cfg.workdir / "pathloss.csv"
    write_pathloss_csv(path, rows)
    return [path]


def stage_channels(cfg: ExperimentConfig):
    cfg.check_inputs(["buildings", "dsm"])
    spec = cfg.grid.spec()
    stations, _ = load_stations(cfg)
    scene = read_buildings_geojson(cfg.input_path("buildings"), *cfg.grid.origin)
    dsm, dsm_spec = read_esri_ascii(cfg.input_path("dsm"))
    raw = {sid: side_rasters(spec, st.cell, scene, dsm, dsm_spec) for sid, st in sorted(stations.items())}
    d = cfg.workdir / "channels"
    d.mkdir(parents=True, exist_ok=True)
    out = []
    for sid, r in raw.items():
        path = d / f"{sid}.f32"
        write_grid(path, np.stack([r[n] for n in SIDE_CHANNELS]), spec, bands=list(SIDE_CHANNELS))
        out.append(path)
    bld = d / "buildings.f32"
    write_grid(bld, next(iter(raw.values()))["buildings"].astype(np.float32), spec)
    return out + [bld, _jdump(d / "channels.json", {"bounds": shared_bounds(raw), "names": list(SIDE_CHANNELS)})]


def stage_interpolate(cfg: ExperimentConfig, method="rbf", k=None, max_iters=None, tol=None):
    ev = replace(cfg.eval, **{key: v for key, v in (("knn_k", k), ("tv_max_iters", max_iters), ("tv_tol", tol))
                              if v is not None})
    stations, _ = load_stations(cfg)
    d = cfg.workdir / "interp"
    out = []
    for sid in sorted(stations):
        pred = baseline(method, stations[sid].train, ev)
        stem = d / f"{sid}_{method}"
        d.mkdir(parents=True, exist_ok=True)
        pred.save(stem)
        out.append(Path(f"{stem}.f32"))
    return out


def _corpus_inputs(cfg):
    stations, meta = load_stations(cfg)
    stacks, building, _ = load_channels(cfg, stations)
    return stations, stacks, building, tuple(meta["value_range"])


def stage_tiles(cfg: ExperimentConfig):
    stations, stacks, building, vr = _corpus_inputs(cfg)
    tiles = training_corpus(stations, stacks, building, cfg.tiles, vr, cfg.seed)
    return [save_tiles(cfg.workdir / "tiles", tiles, cfg.grid.spec())]


def _tiles(cfg):
    d = cfg.workdir / "tiles"
    try:
        return load_tiles(d)
    except SchemaError as exc:
        raise ConfigError(f"{exc}; run `tiles` first") from exc


def stage_search(cfg: ExperimentConfig):
    sc = replace(cfg.search, seed=cfg.seed, channels=cfg.channels)
    d = cfg.workdir / "search"
    d.mkdir(parents=True, exist_ok=True)
    hist = d / "history.jsonl"
    hist.unlink(missing_ok=True)
    best, info = evolve(sc, TrainEvaluator(_tiles(cfg), sc), history_path=hist)
    write_best(d / "best.json", best)
    _jdump(d / "trace.json", {"best_trace": info["best_trace"], "population_sizes": info["population_sizes"]})
    return [d / "best.json", hist, d / "trace.json"]


def _genome(cfg):
    g = cfg.train.genome
    if g == "best":
        g = str(cfg.workdir / "search" / "best.json")
    return parse_genome(g, cfg.train.widths)


def stage_train(cfg: ExperimentConfig, scenario=None):
    scenario = scenario or cfg.train.scenario
    tc = cfg.train.train_config(cfg.channels, cfg.seed)
    tiles = _tiles(cfg)
    d = cfg.workdir / "train"
    if scenario == 1:
        model = train_scenario1(_genome(cfg), tiles, tc)
        model.save(d / "f1")
        return [d / "f1.pt", d / "f1.json"]
    if not Path(d / "f1.json").exists():
        raise ConfigError("scenario 2 needs the scenario-1 model; run `train --scenario 1` first")
    model1 = TrainedModel.load(d / "f1")
    stations, stacks, building, _ = _corpus_inputs(cfg)
    contexts = {sid: StationContext(stacks[sid], st.train, building)
                for sid, st in stations.items() if not st.heldout}
    model2, _ = train_scenario2(model1, tiles, contexts, replace(tc, channels=model1.channels),
                                stride=cfg.tiles.stride)
    model2.save(d / "f2")
    return [d / "f2.pt", d / "f2.json"]


def station_predictions(methods, st: Station, stack, building, eval_cfg, models, tile_cfg):
    preds = {}
    for m in methods:
        if m in ("rbf", "knn", "tv"):
            preds[m] = baseline(m, st.train, eval_cfg)
        elif m in models:
            preds[m] = predict_full(models[m], stack, st.train, building, tile_cfg.size, tile_cfg.stride)
    return preds


def stage_eval(cfg: ExperimentConfig):
    stations, stacks, building, _ = _corpus_inputs(cfg)
    models = {}
    for name in ("f1", "f2"):
        stem = cfg.workdir / "train" / name
        if name in cfg.eval.methods:
            if Path(f"{stem}.json").exists():
                models[name] = TrainedModel.load(stem)
            else:
                logger.warning("model %s not trained; left out of the report", name)
    out = []
    held = [sid for sid in sorted(stations) if stations[sid].heldout]
    if not held:
        raise ConfigError("no held-out station to evaluate")
    for sid in held:
        st = stations[sid]
        preds = station_predictions(cfg.eval.methods, st, stacks[sid], building, cfg.eval, models, cfg.tiles)
        report = evaluate(preds, TestPoints.from_map(st.val), st.cell, cfg.eval.radii, building,
                          cfg.eval.bin_width, annulus=cfg.eval.annulus)
        report["station"] = sid
        path = write_report(report, cfg.workdir / "eval" / sid)
        out += [path, path.with_name("zone_mae.csv")]
    return out


def stage_plot(cfg: ExperimentConfig):
    from .plots import plot_report

    reports = sorted((cfg.workdir / "eval").glob("*/report.json"))
    if not reports:
        raise ConfigError("no evaluation reports; run `eval` first")
    out = []
    for p in reports:
        out += plot_report(json.loads(p.read_text()), cfg.workdir / "plots" / p.parent.name)
    return out
