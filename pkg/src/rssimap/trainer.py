"""Semi-supervised training on tile corpora and full-map inference."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, TrainingError
from .grid import RadioMap
from .nas.genome import ArchGenome, Skeleton
from .nas.model import build_model
from .sidechannels import canonical_names
from .tiles import apply_transform, tile_positions

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    channels: tuple = ("measurements", "distance", "elevation")
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 50
    patience: int = 10
    seed: int = 0
    pseudo_weight: float = 1.0
    widths: tuple = (32, 64, 128, 256)

    def __post_init__(self):
        self.channels = tuple(canonical_names(self.channels))
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs, batch_size and patience must be >= 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")


def set_determinism(seed):
    torch.manual_seed(int(seed) % 2**63)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------- loss

def tile_losses(pred, y, lmask, yp, pmask, pseudo_weight=1.0):
    """Per-tile labelled MAE plus pseudo MAE (each 0 on an empty mask)."""
    zero = torch.zeros((), dtype=pred.dtype)
    el = torch.where(lmask, (pred - y).abs(), zero)
    ep = torch.where(pmask, (pred - yp).abs(), zero)
    nl = lmask.flatten(1).sum(1)
    npx = pmask.flatten(1).sum(1)
    lterm = el.flatten(1).sum(1) / nl.clamp(min=1)
    pterm = ep.flatten(1).sum(1) / npx.clamp(min=1)
    return lterm + pseudo_weight * pterm


def ssl_loss(pred, y, lmask, yp, pmask, groups=None, pseudo_weight=1.0):
    """Average tile losses within each base station, then across stations.

    ``pred``, targets and masks are (N, H, W); ``groups`` labels each tile
    with its base station (all tiles share one station when omitted).
    Building pixels must already be absent from both masks.
    """
    per_tile = tile_losses(pred, y, lmask, yp, pmask, pseudo_weight)
    if groups is None:
        return per_tile.mean()
    groups = torch.as_tensor(groups)
    uniq, inv = torch.unique(groups, return_inverse=True)
    sums = torch.zeros(len(uniq), dtype=per_tile.dtype).index_add(0, inv, per_tile)
    counts = torch.zeros(len(uniq), dtype=per_tile.dtype).index_add(0, inv, torch.ones_like(per_tile))
    return (sums / counts).mean()


def sample_loss(pred, tile, pseudo_weight=1.0):
    """Loss of one prediction (normalised units) against a TileSample."""
    pred = torch.as_tensor(np.asarray(pred, dtype=np.float64))[None]
    t = _targets([tile])
    return float(ssl_loss(pred, t["y"].double(), t["lmask"], t["yp"].double(), t["pmask"],
                          pseudo_weight=pseudo_weight))


# ---------------------------------------------------------------- tensors

def tile_inputs(tile, channels):
    """(C, T, T) float32 model input in canonical channel order."""
    layers = []
    for name in channels:
        if name == "measurements":
            layers.append(np.where(tile.label_mask, tile.normalized(np.nan_to_num(tile.labels)), 0.0))
        else:
            if name not in tile.names:
                raise ConfigError(f"tile lacks channel {name!r} (has {tile.names})")
            layers.append(tile.channels[tile.names.index(name)])
    return np.stack(layers).astype(np.float32)


def _targets(tiles):
    y = np.stack([np.where(t.label_mask, t.normalized(np.nan_to_num(t.labels)), 0.0) for t in tiles])
    yp = np.stack([np.where(t.pseudo_mask, t.normalized(np.nan_to_num(t.pseudo_values)), 0.0) for t in tiles])
    return {
        "y": torch.from_numpy(y.astype(np.float32)),
        "yp": torch.from_numpy(yp.astype(np.float32)),
        "lmask": torch.from_numpy(np.stack([t.label_mask & ~t.building for t in tiles])),
        "pmask": torch.from_numpy(np.stack([t.pseudo_mask & ~t.building for t in tiles])),
    }


class _Corpus:
    def __init__(self, tiles, channels):
        if not tiles:
            raise ConfigError("empty tile corpus")
        self.tiles = tiles
        self.x = torch.from_numpy(np.stack([tile_inputs(t, channels) for t in tiles]))
        self.t = _targets(tiles)
        bs = sorted({t.bs_id for t in tiles})
        self.groups = torch.tensor([bs.index(t.bs_id) for t in tiles])
        self.ids = [t.index for t in tiles]
        val_idx = [k for k, t in enumerate(tiles) if t.transform == "id" and t.val_mask.any()]
        if not val_idx:
            val_idx = [k for k, t in enumerate(tiles) if t.val_mask.any()]
        self.val_idx = val_idx


# ---------------------------------------------------------------- model

@dataclass
class TrainedModel:
    genome: ArchGenome
    channels: tuple
    value_range: tuple
    widths: tuple
    module: torch.nn.Module
    ranges: dict = field(default_factory=dict)
    seed: int = 0
    history: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def predict_normalized(self, x, batch=32):
        self.module.eval()
        out = []
        with torch.no_grad():
            for s in range(0, len(x), batch):
                out.append(self.module(torch.as_tensor(x[s:s + batch])).numpy())
        return np.concatenate(out).astype(np.float64)

    def to_db(self, y):
        lo, hi = self.value_range
        return np.asarray(y, dtype=np.float64) * (hi - lo) + lo

    def predict_tiles(self, tiles):
        x = np.stack([tile_inputs(t, self.channels) for t in tiles])
        return self.to_db(self.predict_normalized(x))

    def metadata(self):
        return {"genome": list(self.genome.genes), "channels": list(self.channels),
                "value_range": list(self.value_range), "widths": list(self.widths),
                "ranges": {k: list(v) for k, v in self.ranges.items()}, "seed": self.seed,
                "metrics": self.metrics, "history": self.history}

    def save(self, stem):
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.module.state_dict(), f"{stem}.pt")
        Path(f"{stem}.json").write_text(json.dumps(self.metadata(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, stem):
        meta = json.loads(Path(f"{stem}.json").read_text())
        genome = ArchGenome(tuple(meta["genome"]))
        channels = tuple(meta["channels"])
        module = build_model(genome, len(channels), Skeleton(tuple(meta["widths"])))
        module.load_state_dict(torch.load(f"{stem}.pt", weights_only=True))
        module.eval()
        return cls(genome, channels, tuple(meta["value_range"]), tuple(meta["widths"]), module,
                   {k: tuple(v) for k, v in meta.get("ranges", {}).items()}, meta.get("seed", 0),
                   meta.get("history", []), meta.get("metrics", {}))


def validation_mae(model: TrainedModel, corpus: _Corpus):
    """Mean |prediction - measurement| in dB over validation pixels."""
    if not corpus.val_idx:
        return float("nan")
    idx = corpus.val_idx
    pred = model.to_db(model.predict_normalized(corpus.x[idx].numpy()))
    err, n = 0.0, 0
    for p, k in zip(pred, idx):
        t = corpus.tiles[k]
        v = t.val_mask & ~t.building
        err += float(np.abs(p[v] - t.labels[v]).sum())
        n += int(v.sum())
    return err / n if n else float("nan")


def train_scenario1(genome: ArchGenome, tiles, config: TrainConfig = None, ranges=None,
                    early_stopping=True):
    """Fit a model built from ``genome`` by Adam on the semi-supervised loss.

    Returns the checkpoint with the lowest validation MAE.
    """
    config = config or TrainConfig()
    corpus = _Corpus(tiles, config.channels)
    vr = {t.value_range for t in tiles}
    if len(vr) != 1:
        raise ConfigError(f"tiles disagree on the measurement range: {sorted(vr)}")
    set_determinism(config.seed)
    skeleton = Skeleton(tuple(config.widths))
    module = build_model(genome, len(config.channels), skeleton)
    opt = torch.optim.Adam(module.parameters(), lr=config.lr)
    model = TrainedModel(genome, config.channels, vr.pop(), tuple(config.widths), module,
                         dict(ranges or {}), config.seed)
    gen = torch.Generator().manual_seed(int(config.seed) % 2**63)
    best_state, best_mae, best_epoch, stale = None, math.inf, -1, 0
    n = len(corpus.tiles)
    for epoch in range(config.epochs):
        module.train()
        order = torch.randperm(n, generator=gen)
        total, batches = 0.0, 0
        for s in range(0, n, config.batch_size):
            b = order[s:s + config.batch_size]
            if len(b) < 2 and n >= 2:
                continue  # batch-norm needs more than one sample
            opt.zero_grad()
            pred = module(corpus.x[b])
            loss = ssl_loss(pred, corpus.t["y"][b], corpus.t["lmask"][b], corpus.t["yp"][b],
                            corpus.t["pmask"][b], corpus.groups[b], config.pseudo_weight)
            if not torch.isfinite(loss):
                bad = [corpus.ids[int(k)] for k in b]
                raise TrainingError(f"non-finite loss at epoch {epoch}", tile_ids=bad)
            loss.backward()
            opt.step()
            total += float(loss.detach())
            batches += 1
        mae = validation_mae(model, corpus)
        model.history.append({"epoch": epoch, "train_loss": total / max(batches, 1), "val_mae_db": mae})
        logger.debug("epoch %d loss %.5f val %.4f", epoch, total / max(batches, 1), mae)
        if not early_stopping or math.isnan(mae) or mae < best_mae:
            best_mae = mae if not math.isnan(mae) else best_mae
            best_state, best_epoch, stale = copy.deepcopy(module.state_dict()), epoch, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    module.load_state_dict(best_state)
    module.eval()
    model.metrics = {"best_epoch": best_epoch, "val_mae_db": best_mae if best_mae < math.inf else None,
                     "epochs_run": len(model.history)}
    return model


@dataclass
class StationContext:
    """City-level inputs of one base station used for full-map inference."""

    stack: object
    observed: RadioMap
    building: np.ndarray


def predict_full(model: TrainedModel, stack, observed: RadioMap, building, tile=96, stride=20):
    """Sliding-window prediction, averaging overlapping tiles per cell.

    ``observed`` supplies the measurement channel; building cells are NaN.
    """
    H, W = observed.spec.shape
    building = np.asarray(building, dtype=bool)
    lo, hi = model.value_range
    layers = []
    for name in model.channels:
        if name == "measurements":
            v = np.where(observed.mask, (np.nan_to_num(observed.values) - lo) / (hi - lo), 0.0)
            layers.append(v)
        else:
            if name not in stack.names:
                raise ConfigError(f"stack lacks channel {name!r} required by the model")
            layers.append(stack.channel(name))
    full = np.stack(layers).astype(np.float32)
    rows, cols = tile_positions(H, tile, stride), tile_positions(W, tile, stride)
    coords = [(r, c) for r in rows for c in cols]
    x = np.stack([full[:, r:r + tile, c:c + tile] for r, c in coords])
    pred = model.to_db(model.predict_normalized(x))
    acc = np.zeros((H, W))
    cnt = np.zeros((H, W))
    for (r, c), p in zip(coords, pred):
        acc[r:r + tile, c:c + tile] += p
        cnt[r:r + tile, c:c + tile] += 1
    out = acc / cnt
    out[building] = np.nan
    return RadioMap.dense(observed.spec, out, method="nn")


def relabel(tiles, model: TrainedModel, contexts, tile=None, stride=20):
    """Replace pseudo targets by the model's reassembled city predictions."""
    full = {}
    out = []
    for t in tiles:
        if t.bs_id not in full:
            ctx = contexts[t.bs_id]
            full[t.bs_id] = predict_full(model, ctx.stack, ctx.observed, ctx.building,
                                         tile or t.size, stride).values
        r, c = t.origin
        sl = apply_transform(full[t.bs_id][r:r + t.size, c:c + t.size], t.transform)
        out.append(replace(t, pseudo_values=np.where(t.pseudo_mask, sl, np.nan), meta=dict(t.meta)))
    return out


def train_scenario2(model1: TrainedModel, tiles, contexts, config: TrainConfig = None, stride=20,
                    ranges=None):
    """One self-training round: relabel with ``model1``, retrain from scratch."""
    config = config or TrainConfig()
    relabeled = relabel(tiles, model1, contexts, stride=stride)
    model2 = train_scenario1(model1.genome, relabeled, config, ranges or model1.ranges)
    model2.metrics["relabel_rounds"] = 1
    return model2, relabeled
