"""Side-information rasters aligned to a radio-map grid.

The building-count channel walks the supercover line from the base-station
cell to every other cell: all cells whose interior the centre-to-centre
segment crosses.  A segment that passes exactly through a grid corner steps
diagonally and does not visit the two cells that merely touch the corner.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, CoverageError
from .grid import GridSpec
from .ingest import enu_to_geo, geo_to_enu

CANONICAL_ORDER = ("measurements", "distance", "elevation", "building_count", "buildings")
ALIASES = {
    "msm": "measurements",
    "dist": "distance",
    "elev": "elevation",
    "count": "building_count",
    "bld": "buildings",
}


def canonical_names(names):
    """Resolve aliases and sort channel names into canonical order."""
    out = []
    for n in names:
        n = ALIASES.get(n.strip(), n.strip())
        if n not in CANONICAL_ORDER:
            raise ConfigError(f"unknown channel {n!r}; expected one of {CANONICAL_ORDER}")
        if n not in out:
            out.append(n)
    return sorted(out, key=CANONICAL_ORDER.index)


@dataclass
class BuildingScene:
    """Building footprints in ENU metres, or a pre-rasterized grid."""

    footprints: list = field(default_factory=list)
    ids: Optional[list] = None
    raster: Optional[np.ndarray] = None
    id_raster: Optional[np.ndarray] = None

    @classmethod
    def from_raster(cls, raster, id_raster=None):
        raster = np.asarray(raster) > 0
        return cls([], None, raster, None if id_raster is None else np.asarray(id_raster, dtype=np.int64))

    def rasterize(self, spec):
        if self.raster is not None:
            if self.raster.shape != spec.shape:
                raise ConfigError(f"building raster {self.raster.shape} does not match grid {spec.shape}")
            return self.raster
        return buildings_channel(self, spec)

    def ids_raster(self, spec):
        """Building id per cell (0 outside buildings), or None without ids."""
        if self.id_raster is not None:
            return self.id_raster
        if self.ids is None or not self.footprints:
            return None
        east, north = spec.centers()
        out = np.zeros(spec.shape, dtype=np.int64)
        for poly, bid in zip(self.footprints, self.ids):
            out[_inside_polygon(poly, east, north)] = int(bid)
        return out


def _rings(poly):
    if isinstance(poly, np.ndarray):
        return [poly]
    return [np.asarray(r, dtype=float) for r in poly]


def _inside_polygon(poly, east, north):
    """Even-odd rule over every ring of the polygon (holes included)."""
    inside = np.zeros(east.shape, dtype=bool)
    for ring in _rings(poly):
        ring = np.asarray(ring, dtype=float)
        if ring.shape[0] < 3:
            continue
        x0, y0 = ring.min(axis=0)
        x1, y1 = ring.max(axis=0)
        box = (east >= x0) & (east <= x1) & (north >= y0) & (north <= y1)
        if not box.any():
            continue
        px, py = east[box], north[box]
        hit = np.zeros(px.shape, dtype=bool)
        xs, ys = ring[:, 0], ring[:, 1]
        xj, yj = np.roll(xs, 1), np.roll(ys, 1)
        for xa, ya, xb, yb in zip(xs, ys, xj, yj):
            if ya == yb:
                continue
            crosses = (ya > py) != (yb > py)
            xint = (xb - xa) * (py - ya) / (yb - ya) + xa
            hit ^= crosses & (px < xint)
        inside[box] ^= hit
    return inside


def buildings_channel(scene: BuildingScene, spec: GridSpec):
    """Binary raster: 1 where the cell centre lies inside any footprint."""
    if scene.raster is not None:
        return scene.rasterize(spec).astype(np.float64)
    east, north = spec.centers()
    out = np.zeros(spec.shape, dtype=bool)
    for poly in scene.footprints:
        out |= _inside_polygon(poly, east, north)
    return out.astype(np.float64)


def distance_channel(spec: GridSpec, bs_cell, d0=1.0):
    """-log10 of the centre-to-centre distance to the base station (metres)."""
    bi, bj = bs_cell
    if not spec.contains_cell(bi, bj):
        raise ConfigError(f"base-station cell {bs_cell} outside {spec.height}x{spec.width} grid")
    rows, cols = np.indices(spec.shape)
    d = spec.cell_size * np.hypot(rows - bi, cols - bj)
    return -np.log10(np.maximum(d, d0))


def supercover_cells(start, end):
    """Cells crossed by the segment between two cell centres, in order."""
    r, c = start
    dr, dc = end[0] - r, end[1] - c
    sr, sc = int(np.sign(dr)), int(np.sign(dc))
    adr, adc = abs(dr), abs(dc)
    kr = kc = 0
    cells = [(r, c)]
    while kr < adr or kc < adc:
        vr = (2 * kr + 1) * adc
        vc = (2 * kc + 1) * adr
        step_r = kr < adr and (kc >= adc or vr <= vc)
        step_c = kc < adc and (kr >= adr or vc <= vr)
        if step_r:
            r += sr
            kr += 1
        if step_c:
            c += sc
            kc += 1
        cells.append((r, c))
    return cells


def _walk(bs_cell, rows, cols):
    """Advance all supercover walks in lockstep; yields (r, c, active)."""
    br, bc = bs_cell
    dr, dc = rows - br, cols - bc
    sr, sc = np.sign(dr), np.sign(dc)
    adr, adc = np.abs(dr), np.abs(dc)
    kr = np.zeros_like(adr)
    kc = np.zeros_like(adc)
    r = np.full_like(rows, br)
    c = np.full_like(cols, bc)
    active = np.ones(rows.shape, dtype=bool)
    yield r, c, active
    while True:
        rem_r = kr < adr
        rem_c = kc < adc
        active = rem_r | rem_c
        if not active.any():
            return
        vr = (2 * kr + 1) * adc
        vc = (2 * kc + 1) * adr
        step_r = rem_r & (~rem_c | (vr <= vc))
        step_c = rem_c & (~rem_r | (vc <= vr))
        r = r + sr * step_r
        c = c + sc * step_c
        kr = kr + step_r
        kc = kc + step_c
        yield r, c, active


def building_count_channel(scene: BuildingScene, spec: GridSpec, bs_cell, use_ids=None,
                           chunk=8192):
    """Number of buildings crossed on the way from the base station.

    Without building ids, maximal runs of consecutive building cells along the
    traversal are counted.  With ids, distinct non-zero ids are counted.
    Source and destination cells are part of the traversal.
    """
    if not spec.contains_cell(*bs_cell):
        raise ConfigError(f"base-station cell {bs_cell} outside grid")
    bld = scene.rasterize(spec).astype(bool)
    ids = scene.ids_raster(spec) if use_ids is not False else None
    if use_ids and ids is None:
        raise ConfigError("scene carries no building ids")
    rows, cols = np.indices(spec.shape)
    rows, cols = rows.ravel(), cols.ravel()
    out = np.zeros(rows.size, dtype=np.int64)
    for s in range(0, rows.size, chunk):
        rr, cc = rows[s:s + chunk], cols[s:s + chunk]
        if ids is None:
            out[s:s + chunk] = _count_runs(bld, bs_cell, rr, cc)
        else:
            out[s:s + chunk] = _count_ids(np.where(bld, ids, 0), bs_cell, rr, cc)
    return out.reshape(spec.shape)


def _count_runs(bld, bs_cell, rows, cols):
    runs = np.zeros(rows.shape, dtype=np.int64)
    prev = np.zeros(rows.shape, dtype=bool)
    for r, c, active in _walk(bs_cell, rows, cols):
        b = bld[r, c] & active
        runs += b & ~prev
        prev = np.where(active, b, prev)
    return runs


def _count_ids(ids, bs_cell, rows, cols):
    seq = [ids[r, c] * active for r, c, active in _walk(bs_cell, rows, cols)]
    visited = np.sort(np.stack(seq), axis=0)
    new = visited[1:] != visited[:-1]
    distinct = (visited[0] != 0).astype(np.int64) + (new & (visited[1:] != 0)).sum(axis=0)
    return distinct


def elevation_channel(dsm, dsm_spec: GridSpec, spec: GridSpec):
    """Nearest-neighbour resampling of a surface model onto the target grid."""
    dsm = np.asarray(dsm, dtype=np.float64)
    if dsm.shape != dsm_spec.shape:
        raise ConfigError(f"DSM array {dsm.shape} does not match its grid {dsm_spec.shape}")
    east, north = spec.centers()
    rows, cols, inside = dsm_spec.locate(east, north)
    if not inside.all():
        w, s, e, n = dsm_spec.bounds
        raise CoverageError(
            "DSM does not cover the target grid: target centres span "
            f"east [{east.min():.2f}, {east.max():.2f}], north [{north.min():.2f}, {north.max():.2f}]"
            f"; DSM covers east [{w:.2f}, {e:.2f}), north [{s:.2f}, {n:.2f})"
        )
    return dsm[rows, cols]


@dataclass
class ChannelStack:
    """Min-max normalised channels in canonical order.

    ``ranges[name]`` holds the (min, max) seen before scaling.  Values that
    were NaN (e.g. cells without a measurement) stay NaN.
    """

    spec: GridSpec
    names: list
    data: np.ndarray
    ranges: dict

    def channel(self, name):
        name = ALIASES.get(name, name)
        return self.data[self.names.index(name)]

    def denormalize(self, name, values):
        lo, hi = self.ranges[ALIASES.get(name, name)]
        return np.asarray(values, dtype=np.float64) * (hi - lo) + lo

    def normalize(self, name, values):
        lo, hi = self.ranges[ALIASES.get(name, name)]
        values = np.asarray(values, dtype=np.float64)
        if hi == lo:
            return np.where(np.isfinite(values), 0.0, np.nan)
        return (values - lo) / (hi - lo)

    def select(self, names):
        names = canonical_names(names)
        missing = [n for n in names if n not in self.names]
        if missing:
            raise ConfigError(f"stack lacks channel(s) {missing}")
        idx = [self.names.index(n) for n in names]
        return ChannelStack(self.spec, names, self.data[idx], {n: self.ranges[n] for n in names})

    def ranges_json(self):
        return {n: [float(lo), float(hi)] for n, (lo, hi) in self.ranges.items()}


def normalize_stack(rasters, spec=None, bounds=None):
    """Scale each raster to [0, 1] by its own finite min and max.

    ``rasters`` maps channel name (or alias) to an H x W array.  ``bounds``
    may pin (min, max) for selected channels; a constant channel maps to 0.
    """
    items = {ALIASES.get(k, k): np.asarray(v, dtype=np.float64) for k, v in dict(rasters).items()}
    names = canonical_names(items)
    bounds = {ALIASES.get(k, k): v for k, v in (bounds or {}).items()}
    shape = items[names[0]].shape
    if spec is None:
        spec = GridSpec(0.0, 0.0, 1.0, shape[1], shape[0])
    data = np.empty((len(names),) + shape)
    ranges = {}
    for k, name in enumerate(names):
        x = items[name]
        if x.shape != shape:
            raise ConfigError(f"channel {name} has shape {x.shape}, expected {shape}")
        if name in bounds:
            lo, hi = (float(b) for b in bounds[name])
        else:
            finite = x[np.isfinite(x)]
            lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 0.0)
        ranges[name] = (lo, hi)
        if hi == lo:
            data[k] = np.where(np.isfinite(x), 0.0, np.nan)
        else:
            data[k] = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return ChannelStack(spec, names, data, ranges)


def read_buildings_geojson(path, origin_lat, origin_lon):
    """Load polygon footprints from WGS-84 GeoJSON into ENU metres."""
    with open(path) as fh:
        doc = json.load(fh)
    feats = doc["features"] if doc.get("type") == "FeatureCollection" else [doc]
    footprints, ids = [], []
    for k, feat in enumerate(feats, start=1):
        geom = feat.get("geometry") or {}
        polys = {"Polygon": [geom.get("coordinates")],
                 "MultiPolygon": geom.get("coordinates")}.get(geom.get("type"), [])
        props = feat.get("properties") or {}
        bid = props.get("id", feat.get("id", k))
        for poly in polys:
            rings = []
            for ring in poly:
                ring = np.asarray(ring, dtype=float)
                e, n = geo_to_enu(ring[:, 1], ring[:, 0], origin_lat, origin_lon)
                rings.append(np.column_stack([e, n]))
            footprints.append(rings)
            ids.append(int(bid))
    return BuildingScene(footprints, ids)


def write_buildings_geojson(path, scene: BuildingScene, origin_lat, origin_lon):
    feats = []
    ids = scene.ids or list(range(1, len(scene.footprints) + 1))
    for poly, bid in zip(scene.footprints, ids):
        rings = []
        for ring in _rings(poly):
            ring = np.asarray(ring, dtype=float)
            closed = np.vstack([ring, ring[:1]])
            lat, lon = enu_to_geo(closed[:, 0], closed[:, 1], origin_lat, origin_lon)
            rings.append([[float(a), float(b)] for a, b in zip(lon, lat)])
        feats.append({"type": "Feature", "properties": {"id": int(bid)},
                      "geometry": {"type": "Polygon", "coordinates": rings}})
    with open(path, "w") as fh:
        json.dump({"type": "FeatureCollection", "features": feats}, fh)
