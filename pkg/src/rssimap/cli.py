"""Command-line entry point: ``rssimap <command> [options]``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

from .errors import RssiMapError

COMMANDS = ("ingest", "synth", "fit-pathloss", "channels", "interpolate", "tiles", "search",
            "train", "eval", "plot")
logger = logging.getLogger("rssimap")


class JsonLinesHandler(logging.Handler):
    def __init__(self, path, command):
        super().__init__()
        self.path = Path(path)
        self.command = command

    def emit(self, record):
        entry = {"time": datetime.fromtimestamp(record.created, timezone.utc).isoformat(timespec="milliseconds"),
                 "level": record.levelname, "logger": record.name, "command": self.command,
                 "message": record.getMessage()}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(entry) + "\n")


def _versions():
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "torch", "matplotlib"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg, command, argv, outputs):
    wd = cfg.workdir
    files = {}
    for p in outputs:
        p = Path(p)
        if p.is_file():
            key = str(p.relative_to(wd)) if p.is_relative_to(wd) else str(p)
            files[key] = _sha256(p)
    manifest = {"command": command, "argv": list(argv), "seed": cfg.seed,
                "config_sha256": cfg.digest(), "config": cfg.to_dict(),
                "versions": _versions(), "outputs": files}
    path = wd / "manifests" / f"{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _channels(text):
    return [c for c in text.split(",") if c.strip()]


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment TOML file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--workdir", help="override the configured work directory")
    common.add_argument("--channels", type=_channels, help="comma-separated input channels, e.g. msm,dist,elev")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rssimap", description="RSSI map reconstruction pipeline")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True
    helps = {
        "synth": "generate a synthetic city and measurement campaign",
        "ingest": "filter, aggregate and split measurements per station",
        "fit-pathloss": "fit the log-distance model per station",
        "channels": "build side-information rasters",
        "interpolate": "RBF, kNN or TV baseline maps",
        "tiles": "cut the training tile corpus",
        "search": "evolutionary architecture search",
        "train": "train the scenario 1 or scenario 2 network",
        "eval": "evaluate held-out stations",
        "plot": "render report figures",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=helps.get(name))
        if name == "interpolate":
            sp.add_argument("--method", choices=("rbf", "knn", "tv"), default="rbf")
            sp.add_argument("--k", type=int)
            sp.add_argument("--max-iters", type=int)
            sp.add_argument("--tol", type=float)
            sp.add_argument("--input", help="stand-alone mode: input grid stem")
            sp.add_argument("--output", help="stand-alone mode: output grid stem")
        elif name == "train":
            sp.add_argument("--scenario", type=int, choices=(1, 2))
            sp.add_argument("--epochs", type=int)
        elif name == "eval":
            sp.add_argument("--pred", action="append", metavar="NAME=STEM",
                            help="stand-alone mode: a prediction grid (repeatable)")
            sp.add_argument("--test", help="stand-alone mode: held-out measurement grid stem")
            sp.add_argument("--bs-cell", help="stand-alone mode: base-station cell as row,col")
            sp.add_argument("--out", help="stand-alone mode: report directory")
            sp.add_argument("--radii", help="comma-separated radii in metres")
    return p


def _standalone_eval(args):
    from .evalreport import DEFAULT_RADII, TestPoints, evaluate, write_report
    from .grid import RadioMap

    if not (args.pred and args.test and args.bs_cell and args.out):
        raise RssiMapError("stand-alone eval needs --pred, --test, --bs-cell and --out (or --config)")
    preds = {}
    for item in args.pred:
        name, _, stem = item.partition("=")
        if not stem:
            raise RssiMapError(f"--pred expects NAME=STEM, got {item!r}")
        preds[name] = RadioMap.load(stem)
    try:
        bs = tuple(int(v) for v in args.bs_cell.split(","))
    except ValueError as exc:
        raise RssiMapError(f"bad --bs-cell {args.bs_cell!r}") from exc
    radii = [float(r) for r in args.radii.split(",")] if args.radii else DEFAULT_RADII
    report = evaluate(preds, TestPoints.from_map(RadioMap.load(args.test)), bs, radii)
    return [write_report(report, args.out)]


def _standalone_interpolate(args):
    from .config import EvalConfig
    from .grid import RadioMap
    from .pipeline import baseline

    if not (args.input and args.output):
        raise RssiMapError("stand-alone interpolate needs both --input and --output")
    kw = {"knn_k": args.k, "tv_max_iters": args.max_iters, "tv_tol": args.tol}
    ev = EvalConfig(**{k: v for k, v in kw.items() if v is not None})
    pred = baseline(args.method, RadioMap.load(args.input), ev)
    pred.save(args.output)
    return [Path(f"{args.output}.f32")]


def _dispatch(args, cfg):
    from . import pipeline as P

    c = args.command
    if c == "synth":
        return P.stage_synth(cfg)
    if c == "ingest":
        return P.stage_ingest(cfg)
    if c == "fit-pathloss":
        return P.stage_fit_pathloss(cfg)
    if c == "channels":
        return P.stage_channels(cfg)
    if c == "interpolate":
        return P.stage_interpolate(cfg, args.method, args.k, args.max_iters, args.tol)
    if c == "tiles":
        return P.stage_tiles(cfg)
    if c == "search":
        return P.stage_search(cfg)
    if c == "train":
        if args.epochs is not None:
            from dataclasses import replace
            cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
        return P.stage_train(cfg, args.scenario)
    if c == "eval":
        return P.stage_eval(cfg)
    return P.stage_plot(cfg)


def run_command(argv):
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    handler = None
    try:
        if args.config is None:
            if args.command == "eval":
                _standalone_eval(args)
                return 0
            if args.command == "interpolate":
                _standalone_interpolate(args)
                return 0
            raise RssiMapError(f"`{args.command}` needs --config")
        from .config import load_config

        cfg = load_config(args.config).with_overrides(args.seed, args.workdir, args.channels)
        cfg.workdir.mkdir(parents=True, exist_ok=True)
        handler = JsonLinesHandler(cfg.workdir / "log.jsonl", args.command)
        logging.getLogger().addHandler(handler)
        logger.info("running %s (seed %d)", args.command, cfg.seed)
        outputs = _dispatch(args, cfg)
        write_manifest(cfg, args.command, argv, outputs)
        logger.info("%s wrote %d file(s)", args.command, len(outputs))
        return 0
    except (RssiMapError, OSError) as exc:
        print(f"rssimap {args.command}: error: {exc}", file=sys.stderr)
        return 1
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
