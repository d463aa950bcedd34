"""Training corpus: RBF pseudo-labels, overlapping tiles, flips and cutout."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, SchemaError
from .grid import GridSpec, RadioMap, read_grid_bands, write_grid
from .interp import AnchorSet, rbf_interpolate

logger = logging.getLogger(__name__)

TRANSFORMS = ("id", "hflip", "vflip", "hvflip")
# bit 0: columns reversed, bit 1: rows reversed
_BITS = {"id": 0, "hflip": 1, "vflip": 2, "hvflip": 3}
_MASKS = ("label_mask", "val_mask", "pseudo_mask")
_GRIDS = ("labels", "pseudo_values", "rbf_values")


def apply_transform(arr, name):
    """Flip the trailing two axes of ``arr`` according to a transform name."""
    bits = _BITS[name]
    if bits & 1:
        arr = arr[..., ::-1]
    if bits & 2:
        arr = arr[..., ::-1, :]
    return np.ascontiguousarray(arr)


def compose(a, b):
    return TRANSFORMS[_BITS[a] ^ _BITS[b]]


@dataclass
class TileSample:
    """One training tile cut from a city-level base-station map.

    ``labels`` carries measured dBm on train and validation cells (NaN
    elsewhere); ``pseudo_values`` carries targets on ``pseudo_mask``;
    ``rbf_values`` is the dense RBF map kept for cutout transfers.
    ``channels`` are the normalised side channels named by ``names``.
    """

    origin: tuple
    size: int
    bs_id: str
    names: list
    channels: np.ndarray
    labels: np.ndarray
    label_mask: np.ndarray
    val_mask: np.ndarray
    pseudo_mask: np.ndarray
    pseudo_values: np.ndarray
    rbf_values: np.ndarray
    building: np.ndarray
    value_range: tuple
    transform: str = "id"
    index: int = 0
    meta: dict = field(default_factory=dict)

    def check(self):
        lm, vm, pm = self.label_mask, self.val_mask, self.pseudo_mask
        if (lm & vm).any() or (lm & pm).any() or (vm & pm).any():
            raise ValueError(f"tile {self.index}: masks overlap")
        if ((lm | vm | pm) & self.building).any():
            raise ValueError(f"tile {self.index}: mask bit on a building cell")
        if not np.all(np.isfinite(self.pseudo_values[pm])):
            raise ValueError(f"tile {self.index}: non-finite pseudo value")
        return self

    def transformed(self, name):
        """Tile seen through an extra flip (the stored origin is unchanged)."""
        f = {k: apply_transform(getattr(self, k), name) for k in _MASKS + _GRIDS + ("building", "channels")}
        return replace(self, transform=compose(self.transform, name), meta=dict(self.meta), **f)

    def normalized(self, values):
        lo, hi = self.value_range
        return (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)

    def denormalized(self, values):
        lo, hi = self.value_range
        return np.asarray(values, dtype=np.float64) * (hi - lo) + lo


def interpolate_unlabeled(train_map: RadioMap, building=None):
    """Dense RBF fill from the training anchors.

    The returned map holds RBF values on unmeasured cells and the measured
    values elsewhere; its mask marks the pseudo-label set: cells that are
    neither measured nor buildings.
    """
    if train_map.n_masked < 2:
        raise ConfigError("pseudo-labelling needs at least two training anchors")
    dense = rbf_interpolate(AnchorSet.from_map(train_map), train_map.spec)
    free = ~train_map.mask
    if building is not None:
        free &= ~np.asarray(building, dtype=bool)
    values = np.where(train_map.mask, train_map.values, dense.values)
    return RadioMap(train_map.spec, values, free, meta={"method": "rbf"})


def tile_positions(length, tile, stride):
    """Tile offsets along one axis, with a final offset flush to the far edge."""
    if length < tile:
        raise ConfigError(f"grid extent {length} is smaller than tile size {tile}")
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    pos = list(range(0, length - tile + 1, stride))
    if pos[-1] != length - tile:
        pos.append(length - tile)
    return pos


def cut_tiles(stack, train: RadioMap, val: RadioMap, pseudo: RadioMap, building,
              tile=96, stride=20, bs_id="", value_range=None, start_index=0):
    """Cut aligned tiles from the city stack and the three target maps.

    ``stack`` is a normalised :class:`ChannelStack` of side channels (a
    measurements channel is built from the labels at training time).
    """
    H, W = train.spec.shape
    building = np.asarray(building, dtype=bool)
    if value_range is None:
        v = train.values[train.mask]
        value_range = (float(v.min()), float(v.max()))
    if not value_range[1] > value_range[0]:
        raise ConfigError(f"degenerate measurement range {value_range}")
    label = train.mask & ~building
    valm = val.mask & ~building & ~label
    pm = pseudo.mask & ~building & ~label & ~valm
    labels = np.where(label, train.values, np.where(valm, val.values, np.nan))
    pvals = np.where(pm, pseudo.values, np.nan)
    rows, cols = tile_positions(H, tile, stride), tile_positions(W, tile, stride)
    names = [n for n in stack.names if n != "measurements"]
    chans = stack.select(names).data.astype(np.float32) if names else np.zeros((0, H, W), np.float32)
    out = []
    for r in rows:
        for c in cols:
            sl = (slice(r, r + tile), slice(c, c + tile))
            out.append(TileSample(
                origin=(r, c), size=tile, bs_id=str(bs_id), names=list(names),
                channels=chans[(slice(None),) + sl].copy(),
                labels=labels[sl].copy(), label_mask=label[sl].copy(), val_mask=valm[sl].copy(),
                pseudo_mask=pm[sl].copy(), pseudo_values=pvals[sl].copy(),
                rbf_values=pseudo.values[sl].copy(), building=building[sl].copy(),
                value_range=tuple(map(float, value_range)), index=start_index + len(out),
            ))
    logger.info("cut %d tiles (%dx%d positions) for bs %s", len(out), len(rows), len(cols), bs_id)
    return out


def augment(tiles):
    return [t.transformed(name) for t in tiles for name in TRANSFORMS]


def cutout_mask(tile: TileSample, rng, min_label_fraction=0.03, min_side=8, max_side=32):
    """Hide one random rectangle of labelled cells, turning them into pseudo targets."""
    if tile.label_mask.mean() <= min_label_fraction:
        return tile
    T = tile.size
    h, w = (min(int(s), T) for s in rng.integers(min_side, max_side + 1, size=2))
    top = int(rng.integers(0, T - h + 1))
    left = int(rng.integers(0, T - w + 1))
    rect = np.zeros_like(tile.label_mask)
    rect[top:top + h, left:left + w] = True
    moved = rect & tile.label_mask
    pm = tile.pseudo_mask | moved
    pv = np.where(moved, tile.rbf_values, tile.pseudo_values)
    meta = dict(tile.meta, cutout=[top, left, h, w])
    return replace(tile, label_mask=tile.label_mask & ~moved, pseudo_mask=pm,
                   pseudo_values=pv, meta=meta)


def tile_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def apply_cutout(tiles, seed, **kw):
    """Cutout on every tile with an rng stream derived from (seed, tile index)."""
    return [cutout_mask(t, tile_rng(seed, k), **kw) for k, t in enumerate(tiles)]


def build_corpus(stack, train, val, building, tile=96, stride=20, bs_id="", value_range=None,
                 seed=0, flips=True, cutout=True, start_index=0):
    """Pseudo-label, cut, augment and cutout one base station's maps."""
    pseudo = interpolate_unlabeled(train, building)
    tiles = cut_tiles(stack, train, val, pseudo, building, tile, stride, bs_id, value_range,
                      start_index)
    if flips:
        tiles = augment(tiles)
    if cutout:
        tiles = apply_cutout(tiles, seed)
    for k, t in enumerate(tiles):
        t.index = start_index + k
    return tiles


def reassemble(tiles, shape, attr="labels"):
    """Place ``attr`` of identity tiles back on an H x W canvas (NaN uncovered)."""
    canvas = np.full(shape, np.nan)
    for t in tiles:
        if t.transform != "id":
            continue
        r, c = t.origin
        canvas[r:r + t.size, c:c + t.size] = getattr(t, attr)
    return canvas


def save_tiles(directory, tiles, spec: GridSpec | None = None):
    """Persist tiles as multi-band grid files plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, t in enumerate(tiles):
        r, c = t.origin
        if spec is not None:
            tspec = GridSpec(spec.origin_east + c * spec.cell_size, spec.origin_north + r * spec.cell_size,
                             spec.cell_size, t.size, t.size)
        else:
            tspec = GridSpec(float(c), float(r), 1.0, t.size, t.size)
        bands = list(t.names) + list(_GRIDS) + list(_MASKS) + ["building"]
        stackd = np.concatenate([
            t.channels.astype(np.float64),
            np.stack([getattr(t, g) for g in _GRIDS]),
            np.stack([getattr(t, m).astype(np.float64) for m in _MASKS + ("building",)]),
        ])
        fname = f"tile_{k:05d}.f32"
        write_grid(d / fname, stackd, tspec, bands=bands)
        entries.append({"file": fname, "origin": [int(r), int(c)], "size": t.size, "bs_id": t.bs_id,
                        "transform": t.transform, "index": t.index, "names": list(t.names),
                        "value_range": list(t.value_range), "meta": t.meta,
                        "n_label": int(t.label_mask.sum()), "n_val": int(t.val_mask.sum()),
                        "n_pseudo": int(t.pseudo_mask.sum())})
    (d / "manifest.json").write_text(json.dumps({"tiles": entries}, indent=1, sort_keys=True))
    return d / "manifest.json"


def load_tiles(directory):
    d = Path(directory)
    manifest = d / "manifest.json"
    if not manifest.exists():
        raise SchemaError(f"no tile manifest in {d}")
    out = []
    for e in json.loads(manifest.read_text())["tiles"]:
        arr, _, bands = read_grid_bands(d / e["file"])
        get = {b: arr[i] for i, b in enumerate(bands)}
        names = e["names"]
        out.append(TileSample(
            origin=tuple(e["origin"]), size=e["size"], bs_id=e["bs_id"], names=names,
            channels=np.stack([get[n] for n in names]).astype(np.float32) if names
            else np.zeros((0, e["size"], e["size"]), np.float32),
            labels=get["labels"], label_mask=get["label_mask"] > 0.5, val_mask=get["val_mask"] > 0.5,
            pseudo_mask=get["pseudo_mask"] > 0.5, pseudo_values=get["pseudo_values"],
            rbf_values=get["rbf_values"], building=get["building"] > 0.5,
            value_range=tuple(e["value_range"]), transform=e["transform"], index=e["index"],
            meta=e.get("meta", {}),
        ))
    return out
