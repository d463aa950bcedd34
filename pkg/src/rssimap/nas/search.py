"""Aging evolution over genomes with a pluggable candidate evaluator."""
from __future__ import annotations

import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .genome import ArchGenome, Skeleton, candidate_seed, mutate, random_genome

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

logger = logging.getLogger(__name__)

METRICS = ("mae", "nmae")


@dataclass
class SearchConfig:
    population: int = 20
    generations: int = 25
    metric: str = "mae"
    epochs: int = 2
    workers: int = 1
    seed: int = 0
    widths: tuple = (32, 64, 128, 256)
    channels: tuple = ("measurements", "distance", "elevation")
    batch_size: int = 16
    lr: float = 1e-3

    def __post_init__(self):
        self.metric = self.metric.lower()
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.population < 2 or self.generations < 0 or self.epochs < 1 or self.workers < 1:
            raise ConfigError("population >= 2, generations >= 0, epochs >= 1 and workers >= 1 required")
        self.widths = tuple(int(w) for w in self.widths)
        self.channels = tuple(self.channels)

    @classmethod
    def from_toml(cls, path):
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        doc = doc.get("search", doc)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown search option(s): {sorted(unknown)}")
        return cls(**doc)


def pixel_errors(pred_db, tiles, metric="mae"):
    """Numerator and denominator of the validation error over a tile list."""
    num = den = 0.0
    for p, t in zip(pred_db, tiles):
        v = t.val_mask & ~t.building
        if not v.any():
            continue
        err = np.abs(np.asarray(p)[v] - t.labels[v])
        if metric == "nmae":
            if "distance" not in t.names:
                raise ConfigError("NMAE needs a distance channel in the tiles")
            w = t.channels[t.names.index("distance")][v].astype(np.float64)
        else:
            w = np.ones(err.shape)
        num += float((w * err).sum())
        den += float(w.sum())
    return num, den


def validation_error(pred_db, tiles, metric="mae"):
    """Validation MAE (or distance-weighted NMAE) in dB; +inf without pixels."""
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}")
    num, den = pixel_errors(pred_db, tiles, metric)
    return num / den if den > 0 else math.inf


def rank_candidates(population):
    """Ascending fitness; ties go to the younger, then the earlier-born member."""
    for g in population:
        if g.fitness is None:
            raise ConfigError(f"candidate {g.key} has not been evaluated")
    return sorted(population, key=lambda g: (g.fitness, g.age, g.birth))


def _worst(population):
    return max(population, key=lambda g: (g.fitness, g.age, -g.birth))


class TrainEvaluator:
    """Train a candidate briefly on the corpus and score it on validation pixels."""

    def __init__(self, tiles, config: SearchConfig):
        self.tiles = tiles
        self.config = config
        self.val_tiles = [t for t in tiles if t.transform == "id" and t.val_mask.any()]

    def __call__(self, genome: ArchGenome, seed: int):
        from ..trainer import TrainConfig, train_scenario1

        c = self.config
        tc = TrainConfig(channels=c.channels, lr=c.lr, batch_size=c.batch_size, epochs=c.epochs,
                         patience=c.epochs, seed=seed, widths=c.widths)
        model = train_scenario1(genome, self.tiles, tc, early_stopping=False)
        return validation_error(model.predict_tiles(self.val_tiles), self.val_tiles, c.metric)


def _run(evaluator, genome, seed):
    try:
        f = float(evaluator(genome, seed))
        if math.isnan(f):
            raise ValueError("fitness is NaN")
        return f, None
    except Exception as exc:  # a failed candidate must not stop the search
        return math.inf, f"{type(exc).__name__}: {exc}"


def evolve(config: SearchConfig, evaluator, skeleton: Skeleton = None, history_path=None):
    """Run the search; returns (best genome, history records).

    ``evaluator(genome, seed) -> fitness`` trains and scores one candidate.
    Fitness values are cached per gene string.
    """
    skeleton = skeleton or Skeleton(config.widths)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x5EA2C4]))
    cache = {}
    history = []
    births = [0]
    out = open(history_path, "w") if history_path else None

    def record(gen, g, err=None):
        rec = {"generation": gen, "genes": list(g.genes), "fitness": g.fitness, "age": g.age,
               "birth": g.birth}
        if err:
            rec["error"] = err
        history.append(rec)
        if out:
            out.write(json.dumps(rec, sort_keys=True) + "\n")
            out.flush()

    def evaluate(genomes, gen):
        todo = [g for g in genomes if g.key not in cache]
        seeds = [candidate_seed(config.seed, g) for g in todo]
        if config.workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(config.workers) as pool:
                results = list(pool.map(_run, [evaluator] * len(todo), todo, seeds))
        else:
            results = [_run(evaluator, g, s) for g, s in zip(todo, seeds)]
        for g, (f, err) in zip(todo, results):
            cache[g.key] = (f, err)
            if err:
                logger.warning("candidate %s failed: %s", g.key, err)
        for g in genomes:
            g.fitness, err = cache[g.key]
            g.birth = births[0]
            births[0] += 1
            record(gen, g, err)

    try:
        population = [random_genome(skeleton, rng) for _ in range(config.population)]
        evaluate(population, 0)
        best = rank_candidates(population)[0]
        best_trace = [best.fitness]
        sizes = [len(population)]
        for gen in range(1, config.generations + 1):
            for g in population:
                g.age += 1
            parent = rank_candidates(population)[0]
            child = mutate(parent, rng, skeleton)
            evaluate([child], gen)
            population.append(child)
            while len(population) > config.population:
                worst = _worst(population)
                population = [g for g in population if g is not worst]
            top = rank_candidates(population)[0]
            if top.fitness < best.fitness:
                best = top
            best_trace.append(best.fitness)
            sizes.append(len(population))
            logger.info("generation %d best %.4f child %.4f", gen, best.fitness, child.fitness)
    finally:
        if out:
            out.close()
    result = ArchGenome(best.genes, best.age, best.fitness, best.birth)
    return result, {"history": history, "best_trace": best_trace,
                    "population_sizes": sizes,
                    "population": [g.to_json() for g in rank_candidates(population)],
                    "config": asdict(config)}


def write_best(path, genome: ArchGenome):
    Path(path).write_text(json.dumps(genome.to_json(), indent=1, sort_keys=True))


def read_best(path):
    return ArchGenome.from_json(json.loads(Path(path).read_text()))
