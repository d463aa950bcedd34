"""TOML experiment configuration."""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError
from .grid import GridSpec
from .nas.search import SearchConfig
from .pathloss import PathLossParams
from .sidechannels import canonical_names
from .trainer import TrainConfig


def _build(cls, table, where):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    missing = [f.name for f in fields(cls)
               if f.name not in table and f.default is MISSING and f.default_factory is MISSING]
    if missing:
        raise ConfigError(f"missing key(s) in [{where}]: {', '.join(missing)}")
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in table.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


@dataclass
class PathsConfig:
    workdir: str = "work"
    measurements: str = ""
    buildings: str = ""
    dsm: str = ""


@dataclass
class GridConfig:
    origin_lat: float
    origin_lon: float
    width: int
    height: int
    cell_size: float = 10.0
    origin_east: float = 0.0
    origin_north: float = 0.0

    @property
    def origin(self):
        return (float(self.origin_lat), float(self.origin_lon))

    def spec(self):
        return GridSpec(float(self.origin_east), float(self.origin_north), float(self.cell_size),
                        int(self.width), int(self.height))


@dataclass
class StationConfig:
    id: str
    lat: float
    lon: float


@dataclass
class PreprocessConfig:
    ceiling: float = -55.0
    static_minutes: float = 30.0
    position_tol: float = 10.0
    min_count: int = 3
    drop_fraction: float = 0.10
    val_fraction: float = 0.10


@dataclass
class TileConfig:
    size: int = 96
    stride: int = 20
    flips: bool = True
    cutout: bool = True


@dataclass
class TrainSection:
    scenario: int = 1
    genome: object = "best"
    epochs: int = 50
    patience: int = 10
    lr: float = 1e-3
    batch_size: int = 16
    pseudo_weight: float = 1.0
    widths: tuple = (32, 64, 128, 256)

    def __post_init__(self):
        if self.scenario not in (1, 2):
            raise ConfigError(f"scenario must be 1 or 2, got {self.scenario}")

    def train_config(self, channels, seed):
        return TrainConfig(channels=tuple(channels), lr=self.lr, batch_size=self.batch_size,
                           epochs=self.epochs, patience=self.patience, seed=seed,
                           pseudo_weight=self.pseudo_weight, widths=tuple(self.widths))


@dataclass
class EvalConfig:
    heldout: tuple = ()
    test_fraction: float = 0.3
    radii: tuple = (200.0, 400.0, 800.0)
    bin_width: float = 50.0
    annulus: bool = False
    methods: tuple = ("rbf", "knn", "tv", "f1", "f2")
    knn_k: int = 5
    tv_max_iters: int = 2000
    tv_tol: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        bad = set(self.methods) - {"rbf", "knn", "tv", "f1", "f2"}
        if bad:
            raise ConfigError(f"unknown evaluation method(s) {sorted(bad)}")


@dataclass
class SynthConfig:
    building_density: float = 0.5
    road_pitch: int = 12
    n_stations: int = 4
    dsm_cell: float = 30.0
    sample_fraction: float = 0.3
    per_building_loss: float = 6.0
    floor: float = -120.0
    fading_std: float = 0.0
    shadow_corr: float = 0.0
    p0: tuple = (-51.88,)
    n: tuple = (2.89,)
    sigma: tuple = (4.0,)

    def params(self):
        k = self.n_stations
        cols = [tuple(v) if isinstance(v, (list, tuple)) else (v,) for v in (self.p0, self.n, self.sigma)]
        for c in cols:
            if len(c) not in (1, k):
                raise ConfigError("[synth] p0/n/sigma need one value or one per station")
        return [PathLossParams(float(cols[0][i % len(cols[0])]), float(cols[1][i % len(cols[1])]),
                               float(cols[2][i % len(cols[2])])) for i in range(k)]


@dataclass
class ExperimentConfig:
    seed: int
    grid: GridConfig
    paths: PathsConfig = field(default_factory=PathsConfig)
    stations: tuple = ()
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    channels: tuple = ("measurements", "distance", "elevation")
    tiles: TileConfig = field(default_factory=TileConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    base_dir: str = "."

    @property
    def workdir(self):
        return self.resolve(self.paths.workdir)

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def input_path(self, name):
        """Configured input path, or the synthetic-city output when unset."""
        value = getattr(self.paths, name)
        default = {"measurements": "measurements.csv", "buildings": "buildings.geojson", "dsm": "dsm.asc"}
        return self.resolve(value) if value else self.workdir / "synth" / default[name]

    def check_inputs(self, names=("measurements", "buildings", "dsm")):
        for name in names:
            p = self.input_path(name)
            if not p.exists():
                raise ConfigError(f"{name} input {p} does not exist")

    def to_dict(self):
        d = asdict(self)
        d.pop("base_dir")
        return json.loads(json.dumps(d, default=list))

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, seed=None, workdir=None, channels=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if workdir is not None:
            cfg = replace(cfg, paths=replace(cfg.paths, workdir=str(Path(workdir).resolve())))
        if channels is not None:
            cfg = replace(cfg, channels=tuple(canonical_names(channels)))
        return cfg


_SECTIONS = {"grid": GridConfig, "paths": PathsConfig, "preprocess": PreprocessConfig,
             "tiles": TileConfig, "search": SearchConfig, "train": TrainSection,
             "eval": EvalConfig, "synth": SynthConfig}


def parse_config(doc, base_dir="."):
    doc = dict(doc)
    unknown = sorted(set(doc) - set(_SECTIONS) - {"seed", "stations", "channels"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "seed" not in doc:
        raise ConfigError("config must set a seed")
    if not isinstance(doc["seed"], int):
        raise ConfigError("seed must be an integer")
    if "grid" not in doc:
        raise ConfigError("config lacks a [grid] table")
    kw = {name: _build(cls, doc[name], name) for name, cls in _SECTIONS.items() if name in doc}
    stations = tuple(_build(StationConfig, s, "stations") for s in doc.get("stations", []))
    try:
        channels = tuple(canonical_names(doc.get("channels", ExperimentConfig.channels)))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad channel list: {exc}") from exc
    return ExperimentConfig(seed=doc["seed"], stations=stations, channels=channels,
                            base_dir=str(base_dir), **kw)


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(doc, path.parent.resolve())
