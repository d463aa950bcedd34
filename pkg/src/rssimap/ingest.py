"""Measurement ingestion: CSV parsing, artefact removal, projection, gridding."""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

import numpy as np

from .errors import ConfigError, SchemaError
from .grid import GridSpec, RadioMap

logger = logging.getLogger(__name__)

EARTH_RADIUS = 6_378_137.0
CSV_COLUMNS = ("gateway_id", "device_id", "rssi_dbm", "lat", "lon", "time")


@dataclass(frozen=True)
class MeasurementRecord:
    gateway_id: str
    device_id: str
    rssi: float
    lat: float
    lon: float
    time: datetime

    def is_valid(self):
        return (
            -200.0 <= self.rssi <= 0.0
            and -90.0 <= self.lat <= 90.0
            and -180.0 <= self.lon <= 180.0
        )


@dataclass(frozen=True)
class RejectedRow:
    line: int
    reason: str


def _parse_time(text):
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    t = datetime.fromisoformat(text)
    if t.tzinfo is None:
        return t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


def parse_measurements(stream):
    """Parse measurement rows from an iterable of text lines.

    Returns ``(records, rejects)``; each reject carries its 1-based line
    number in the file (header is line 1).  Extra columns are ignored.
    """
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        return [], []
    header = [h.strip() for h in header]
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"measurement CSV lacks column(s): {', '.join(missing)}")
    pos = {c: header.index(c) for c in CSV_COLUMNS}

    records, rejects = [], []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            rec = MeasurementRecord(
                gateway_id=row[pos["gateway_id"]].strip(),
                device_id=row[pos["device_id"]].strip(),
                rssi=float(row[pos["rssi_dbm"]]),
                lat=float(row[pos["lat"]]),
                lon=float(row[pos["lon"]]),
                time=_parse_time(row[pos["time"]]),
            )
        except (ValueError, IndexError) as exc:
            rejects.append(RejectedRow(line_no, f"unparsable row: {exc}"))
            continue
        if not rec.is_valid():
            rejects.append(RejectedRow(line_no, "value out of range"))
            continue
        records.append(rec)
    if rejects:
        logger.info("rejected %d of %d rows", len(rejects), len(rejects) + len(records))
    return records, rejects


def read_measurements(path):
    with open(path, newline="") as fh:
        return parse_measurements(fh)


def write_measurements(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.gateway_id, r.device_id, f"{r.rssi:.4f}", f"{r.lat:.9f}",
                        f"{r.lon:.9f}", r.time.strftime("%Y-%m-%dT%H:%M:%S")])


def geo_to_enu(lat, lon, origin_lat, origin_lon):
    """Equirectangular projection to local east/north metres."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    north = EARTH_RADIUS * np.radians(lat - origin_lat)
    east = EARTH_RADIUS * np.radians(lon - origin_lon) * math.cos(math.radians(origin_lat))
    return east, north


def enu_to_geo(east, north, origin_lat, origin_lon):
    east = np.asarray(east, dtype=float)
    north = np.asarray(north, dtype=float)
    lat = origin_lat + np.degrees(north / EARTH_RADIUS)
    lon = origin_lon + np.degrees(east / (EARTH_RADIUS * math.cos(math.radians(origin_lat))))
    return lat, lon


def project_records(records, origin_lat, origin_lon):
    lat = np.array([r.lat for r in records], dtype=float)
    lon = np.array([r.lon for r in records], dtype=float)
    return geo_to_enu(lat, lon, origin_lat, origin_lon)


def filter_artifacts(records, ceiling=-55.0, static_window=timedelta(minutes=30),
                     position_tol=10.0):
    """Drop charging artefacts and records with invalid coordinates.

    A device is flagged over a time span when, for some gateway, its readings
    stay above ``ceiling`` for at least ``static_window`` with the position
    staying within ``position_tol`` metres of the first fix.  Every record of
    that device inside the span is removed, whatever the gateway.

    Returns ``(kept_records, removed_count)`` with input order preserved.
    """
    valid = [
        np.isfinite(r.lat) and -90.0 <= r.lat <= 90.0 and np.isfinite(r.lon)
        and -180.0 <= r.lon <= 180.0
        for r in records
    ]
    streams = defaultdict(list)
    for k, r in enumerate(records):
        if valid[k]:
            streams[(r.device_id, r.gateway_id)].append(k)

    spans = defaultdict(list)
    for (device, _gw), idx in streams.items():
        idx.sort(key=lambda k: records[k].time)
        run = []
        for k in idx + [None]:
            r = records[k] if k is not None else None
            if r is not None and r.rssi > ceiling and (not run or _near(records[run[0]], r, position_tol)):
                run.append(k)
                continue
            if run:
                t0, t1 = records[run[0]].time, records[run[-1]].time
                if t1 - t0 >= static_window:
                    spans[device].append((t0, t1))
            run = [k] if r is not None and r.rssi > ceiling else []

    keep = []
    removed = 0
    for k, r in enumerate(records):
        if not valid[k] or any(t0 <= r.time <= t1 for t0, t1 in spans.get(r.device_id, ())):
            removed += 1
        else:
            keep.append(r)
    if removed:
        logger.info("artefact filter removed %d records", removed)
    return keep, removed


def _near(a, b, tol):
    east, north = geo_to_enu(b.lat, b.lon, a.lat, a.lon)
    return math.hypot(float(east), float(north)) <= tol


def aggregate_to_grid(east, north, rssi, spec: GridSpec):
    """Average records per cell in the milliwatt domain.

    Returns ``(radio_map, n_dropped)`` where ``n_dropped`` counts records
    falling outside the grid.  ``cell_std`` is the dB-domain sample standard
    deviation (NaN where a cell holds fewer than two records).
    """
    east = np.asarray(east, dtype=float).ravel()
    north = np.asarray(north, dtype=float).ravel()
    rssi = np.asarray(rssi, dtype=float).ravel()
    rows, cols, inside = spec.locate(east, north)
    n_dropped = int((~inside).sum())
    flat = rows[inside] * spec.width + cols[inside]
    x = rssi[inside]
    ncell = spec.width * spec.height

    count = np.bincount(flat, minlength=ncell)
    mw = np.bincount(flat, weights=10.0 ** (x / 10.0), minlength=ncell)
    db_sum = np.bincount(flat, weights=x, minlength=ncell)
    values = np.full(ncell, np.nan)
    occupied = count > 0
    values[occupied] = 10.0 * np.log10(mw[occupied] / count[occupied])

    db_mean = np.zeros(ncell)
    db_mean[occupied] = db_sum[occupied] / count[occupied]
    sq = np.bincount(flat, weights=(x - db_mean[flat]) ** 2, minlength=ncell)
    cell_std = np.full(ncell, np.nan)
    multi = count >= 2
    cell_std[multi] = np.sqrt(sq[multi] / (count[multi] - 1))

    shape = spec.shape
    rmap = RadioMap(spec, values.reshape(shape), occupied.reshape(shape),
                    count.reshape(shape), cell_std.reshape(shape))
    if n_dropped:
        logger.info("dropped %d records outside the grid", n_dropped)
    return rmap, n_dropped


def filter_cells(rmap: RadioMap, min_count=3, drop_fraction=0.10):
    """Unmask sparse cells and the noisiest fraction of the remainder.

    Noise is ranked by ``cell_std**2 / count``; ties go to the lower
    row-major index.  Values are kept, only the mask changes.
    """
    if not 0.0 <= drop_fraction < 1.0:
        raise ConfigError(f"drop_fraction must lie in [0, 1), got {drop_fraction}")
    if rmap.count is None or rmap.cell_std is None:
        raise ConfigError("filter_cells needs a map with count and cell_std")
    mask = rmap.mask & (rmap.count >= min_count)
    idx = np.flatnonzero(mask)
    n_drop = math.ceil(round(drop_fraction * idx.size, 9))
    if n_drop:
        std = rmap.cell_std.ravel()[idx]
        score = np.where(np.isfinite(std), std ** 2, 0.0) / rmap.count.ravel()[idx]
        order = np.lexsort((idx, -score))
        flat = mask.ravel().copy()
        flat[idx[order[:n_drop]]] = False
        mask = flat.reshape(mask.shape)
    return rmap.with_mask(mask)


def split_train_val(rmap: RadioMap, val_fraction=0.10, seed=0):
    """Randomly partition the masked cells into train and validation maps."""
    if not 0.0 <= val_fraction <= 1.0:
        raise ConfigError(f"val_fraction must lie in [0, 1], got {val_fraction}")
    idx = np.flatnonzero(rmap.mask)
    n_val = int(math.floor(round(val_fraction * idx.size, 9) + 0.5))
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(idx)[:n_val]
    val = np.zeros(rmap.mask.size, dtype=bool)
    val[chosen] = True
    val = val.reshape(rmap.mask.shape)
    return rmap.with_mask(rmap.mask & ~val), rmap.with_mask(val)
