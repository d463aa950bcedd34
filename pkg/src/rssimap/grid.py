"""Grid geometry, radio-map container and on-disk raster formats.

Cells are indexed row-major with row 0 at the minimum north coordinate and
column 0 at the minimum east coordinate.  Cell ``(i, j)`` covers the
half-open box ``[origin_east + j*cell, origin_east + (j+1)*cell)`` by
``[origin_north + i*cell, origin_north + (i+1)*cell)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, SchemaError

NODATA = -999.0


@dataclass(frozen=True)
class GridSpec:
    origin_east: float
    origin_north: float
    cell_size: float = 10.0
    width: int = 1
    height: int = 1

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ConfigError(f"cell_size must be positive, got {self.cell_size}")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"grid must be at least 1x1, got {self.height}x{self.width}")

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def bounds(self):
        """(west, south, east, north) edges in metres."""
        return (
            self.origin_east,
            self.origin_north,
            self.origin_east + self.width * self.cell_size,
            self.origin_north + self.height * self.cell_size,
        )

    def center(self, row, col):
        """ENU coordinates of a cell centre (vectorised over rows/cols)."""
        row = np.asarray(row, dtype=float)
        col = np.asarray(col, dtype=float)
        east = self.origin_east + (col + 0.5) * self.cell_size
        north = self.origin_north + (row + 0.5) * self.cell_size
        return east, north

    def centers(self):
        """Full-grid (east, north) arrays of cell centres, each H x W."""
        rows, cols = np.indices(self.shape)
        return self.center(rows, cols)

    def locate(self, east, north):
        """Map points to (row, col, inside). Points outside get row=col=-1."""
        east = np.asarray(east, dtype=float)
        north = np.asarray(north, dtype=float)
        col = np.floor((east - self.origin_east) / self.cell_size)
        row = np.floor((north - self.origin_north) / self.cell_size)
        inside = (col >= 0) & (col < self.width) & (row >= 0) & (row < self.height)
        inside &= np.isfinite(col) & np.isfinite(row)
        row = np.where(inside, row, -1).astype(np.int64)
        col = np.where(inside, col, -1).astype(np.int64)
        return row, col, inside

    def contains_cell(self, row, col):
        return 0 <= row < self.height and 0 <= col < self.width

    def to_json(self):
        return {
            "width": self.width,
            "height": self.height,
            "cell_m": self.cell_size,
            "origin_east": self.origin_east,
            "origin_north": self.origin_north,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            origin_east=float(d["origin_east"]),
            origin_north=float(d["origin_north"]),
            cell_size=float(d["cell_m"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass
class RadioMap:
    """Grid of dBm values with an availability mask and per-cell statistics.

    ``count`` and ``cell_std`` are only present for maps built from
    measurements; interpolated or predicted maps leave them as ``None``.
    """

    spec: GridSpec
    values: np.ndarray
    mask: np.ndarray
    count: Optional[np.ndarray] = None
    cell_std: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        for name in ("values", "mask", "count", "cell_std"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != self.spec.shape:
                raise ValueError(f"{name} has shape {arr.shape}, grid is {self.spec.shape}")
        if self.count is not None:
            self.count = np.asarray(self.count, dtype=np.int64)

    @classmethod
    def dense(cls, spec, values, **meta):
        values = np.asarray(values, dtype=np.float64)
        return cls(spec, values, np.isfinite(values), meta=dict(meta))

    @property
    def n_masked(self):
        return int(self.mask.sum())

    def with_mask(self, mask):
        return replace(self, mask=np.asarray(mask, dtype=bool), meta=dict(self.meta))

    def copy(self):
        return RadioMap(
            self.spec,
            self.values.copy(),
            self.mask.copy(),
            None if self.count is None else self.count.copy(),
            None if self.cell_std is None else self.cell_std.copy(),
            dict(self.meta),
        )

    def points(self):
        """Rows, columns and values of the masked cells in row-major order."""
        rows, cols = np.nonzero(self.mask)
        return rows, cols, self.values[rows, cols]

    def sparse_values(self):
        """Values where masked, NaN elsewhere."""
        return np.where(self.mask, self.values, np.nan)

    def save(self, stem):
        """Write ``stem.f32`` (values) plus ``.mask``/``.count``/``.std`` grids."""
        write_grid(_layer(stem, ""), self.values, self.spec)
        write_grid(_layer(stem, "mask"), self.mask.astype(np.float32), self.spec)
        if self.count is not None:
            write_grid(_layer(stem, "count"), self.count, self.spec)
        if self.cell_std is not None:
            write_grid(_layer(stem, "std"), self.cell_std, self.spec)

    @classmethod
    def load(cls, stem):
        values, spec = read_grid(_layer(stem, ""))
        mask_path = _layer(stem, "mask")
        if mask_path.exists():
            mask = read_grid(mask_path)[0] > 0.5
        else:
            mask = np.isfinite(values)
        count = cell_std = None
        if _layer(stem, "count").exists():
            count = np.nan_to_num(read_grid(_layer(stem, "count"))[0]).astype(np.int64)
        if _layer(stem, "std").exists():
            cell_std = read_grid(_layer(stem, "std"))[0]
        return cls(spec, values, mask, count, cell_std)


def _layer(stem, name):
    return Path(f"{stem}.{name}.f32" if name else f"{stem}.f32")


def _sidecar(path):
    return Path(path).with_suffix(".json")


def write_grid(path, array, spec, bands=None):
    """Write a float32 little-endian row-major grid plus its JSON sidecar.

    A 3-D array is written band-sequential; ``bands`` names each band.
    """
    path = Path(path)
    arr = np.asarray(array, dtype=np.float64)
    if arr.shape[-2:] != spec.shape:
        raise ValueError(f"array shape {arr.shape} does not match grid {spec.shape}")
    out = np.where(np.isfinite(arr), arr, NODATA).astype("<f4")
    path.parent.mkdir(parents=True, exist_ok=True)
    out.tofile(path)
    meta = dict(spec.to_json(), nodata=NODATA)
    if arr.ndim == 3:
        meta["bands"] = list(bands) if bands is not None else [f"b{i}" for i in range(arr.shape[0])]
    _sidecar(path).write_text(json.dumps(meta, indent=1, sort_keys=True))


def read_grid(path):
    """Read a grid container; nodata cells come back as NaN.

    Returns ``(array, spec)``; multi-band files also carry their band names in
    ``array`` order via :func:`read_grid_bands`.
    """
    arr, spec, _ = read_grid_bands(path)
    return arr, spec


def read_grid_bands(path):
    path = Path(path)
    side = _sidecar(path)
    if not side.exists():
        raise SchemaError(f"missing sidecar {side}")
    meta = json.loads(side.read_text())
    spec = GridSpec.from_json(meta)
    raw = np.fromfile(path, dtype="<f4").astype(np.float64)
    bands = meta.get("bands")
    shape = spec.shape if bands is None else (len(bands),) + spec.shape
    if raw.size != int(np.prod(shape)):
        raise SchemaError(f"{path}: {raw.size} values, sidecar implies {shape}")
    raw = raw.reshape(shape)
    raw[raw == np.float32(meta.get("nodata", NODATA))] = np.nan
    return raw, spec, bands


def read_esri_ascii(path):
    """Read an ESRI ASCII grid; returns (array with row 0 south, spec)."""
    header = {}
    with open(path) as fh:
        lines = fh.readlines()
    body_start = 0
    for k, line in enumerate(lines):
        parts = line.split()
        if not parts:
            continue
        key = parts[0].lower()
        if key in ("ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter",
                   "cellsize", "nodata_value"):
            header[key] = float(parts[1])
            body_start = k + 1
        else:
            break
    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise SchemaError(f"{path}: ESRI header lacks {key}")
    ncols, nrows, cs = int(header["ncols"]), int(header["nrows"]), header["cellsize"]
    if "xllcorner" in header:
        x0, y0 = header["xllcorner"], header["yllcorner"]
    elif "xllcenter" in header:
        x0, y0 = header["xllcenter"] - cs / 2, header["yllcenter"] - cs / 2
    else:
        raise SchemaError(f"{path}: ESRI header lacks xllcorner/xllcenter")
    data = np.array(" ".join(lines[body_start:]).split(), dtype=np.float64)
    if data.size != ncols * nrows:
        raise SchemaError(f"{path}: expected {ncols * nrows} values, found {data.size}")
    data = data.reshape(nrows, ncols)[::-1].copy()
    if "nodata_value" in header:
        data[data == header["nodata_value"]] = np.nan
    return data, GridSpec(x0, y0, cs, ncols, nrows)


def write_esri_ascii(path, array, spec, nodata=NODATA):
    arr = np.asarray(array, dtype=np.float64)[::-1]
    arr = np.where(np.isfinite(arr), arr, nodata)
    with open(path, "w") as fh:
        fh.write(f"ncols {spec.width}\nnrows {spec.height}\n")
        fh.write(f"xllcorner {spec.origin_east!r}\nyllcorner {spec.origin_north!r}\n")
        fh.write(f"cellsize {spec.cell_size!r}\nNODATA_value {nodata!r}\n")
        for row in arr:
            fh.write(" ".join(f"{v:.6g}" for v in row) + "\n")
