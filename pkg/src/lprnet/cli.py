"""Command-line entry point: ``lprnet <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 registration did
not converge (results are still written), 4 I/O error, 5 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import types
import typing
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DatasetError,
    IntegrityError,
    InvalidArgumentError,
    InvalidInputError,
    ParseError,
    TruncatedFileError,
    UnsupportedFormatError,
    UnsupportedVersionError,
)

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED, EXIT_IO, EXIT_INTERNAL = 0, 2, 3, 4, 5

log = logging.getLogger("lprnet")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- run config

def _config_sections():
    from .network import NetworkConfig
    from .registration import ICLKConfig
    from .simdata import SimPairSpec
    from .training import TrainConfig

    return {"network": NetworkConfig, "train": TrainConfig, "iclk": ICLKConfig, "sim": SimPairSpec}


_JSON_TYPES = {int: "integer", float: "number", bool: "boolean", str: "string", tuple: "array"}


def _check_value(section: str, key: str, value, hint) -> object:
    union = typing.get_origin(hint) in (typing.Union, types.UnionType)
    options = typing.get_args(hint) if union else (hint,)
    for t in options:
        t = typing.get_origin(t) or t
        if t is bool and isinstance(value, bool):
            return value
        if t is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if t is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if t is str and isinstance(value, str):
            return value
        if t in (tuple, list) and isinstance(value, list):
            return tuple(value)
    expected = " or ".join(_JSON_TYPES.get(typing.get_origin(t) or t, str(t)) for t in options)
    raise ConfigError(f"{section}.{key}: expected {expected}, got {type(value).__name__}")


def parse_run_config(text: str) -> dict:
    """Parse strict JSON into per-section override dicts (unknown keys rejected)."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object with sections network/train/iclk/sim")
    sections = _config_sections()
    out = {}
    for section, body in raw.items():
        if section not in sections:
            raise ConfigError(f"unknown config section {section!r}; expected one of {sorted(sections)}")
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: expected object, got {type(body).__name__}")
        hints = typing.get_type_hints(sections[section])
        fields = {f.name for f in dataclasses.fields(sections[section])}
        parsed = {}
        for key, value in body.items():
            if key not in fields:
                raise ConfigError(f"{section}: unknown key {key!r}")
            parsed[key] = _check_value(section, key, value, hints[key])
        out[section] = parsed
    return out


def load_run_config(path) -> dict:
    if path is None:
        return {}
    return parse_run_config(Path(path).read_text(encoding="utf-8"))


def _build(section: str, overrides: dict, **defaults):
    cls = _config_sections()[section]
    kwargs = dict(defaults)
    kwargs.update(overrides.get(section, {}))
    try:
        return cls(**kwargs)
    except (ConfigError, InvalidArgumentError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


# ---------------------------------------------------------------- helpers

def _floats(text: str, count: int, what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{what}: expected {count} comma-separated numbers, got {text!r}") from None
    if len(vals) != count:
        raise UsageError(f"{what}: expected {count} comma-separated numbers, got {text!r}")
    return vals


def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _crop(cloud, box):
    xmin, ymin, xmax, ymax = box
    pts = cloud.points
    keep = (pts[:, 0] >= xmin) & (pts[:, 0] <= xmax) & (pts[:, 1] >= ymin) & (pts[:, 1] <= ymax)
    if not keep.any():
        raise UsageError(f"crop {box} leaves no points in {cloud.source_label or 'cloud'}")
    return cloud.select(keep)


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


# ---------------------------------------------------------------- commands

def cmd_gen_sim(args) -> int:
    from .cloud import load_cloud
    from .simdata import SCENES, write_pair_set

    if args.pairs < 1:
        raise UsageError("--pairs must be >= 1")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    lo, hi = _floats(args.occlusion, 2, "--occlusion")
    if not 0 <= lo <= hi < 1:
        raise UsageError("--occlusion must satisfy 0 <= lo <= hi < 1")
    if args.sigma < 0 or args.rot_max < 0 or args.trans_max < 0:
        raise UsageError("--sigma, --rot-max and --trans-max must be >= 0")
    if args.base == "all":
        bases = list(SCENES)
    elif args.base in SCENES:
        bases = [args.base]
    else:
        bases = [load_cloud(_need_file(args.base), source_label=Path(args.base).name)]
    manifest = write_pair_set(args.out, bases, args.n, args.pairs, args.sigma, (lo, hi),
                              args.rot_max, args.trans_max, seed=args.seed)
    _emit({"pairs": len(manifest["pairs"]), "out": str(args.out), "sigma": args.sigma,
           "occlusion": [lo, hi], "rot_max": args.rot_max, "trans_max": args.trans_max,
           "seed": args.seed})
    return EXIT_OK


def _training_clouds(data: str, seed: int, n_points: int):
    from .cloud import load_cloud
    from .simdata import manifest_pairs
    from .training import procedural_dataset

    if data.startswith("procedural"):
        _, _, count = data.partition(":")
        try:
            count = int(count) if count else 64
        except ValueError:
            raise UsageError(f"--data procedural:COUNT needs an integer count, got {data!r}") from None
        return procedural_dataset(count, n_points=n_points, seed=seed)
    path = Path(data)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".xyz", ".txt", ".ply"))
        if not files:
            raise FileNotFoundError(f"no .xyz/.ply clouds in {path}")
        return [load_cloud(p, source_label=p.name) for p in files]
    if path.suffix.lower() == ".json":
        # single clouds from a pair manifest; pairs and transforms are never used
        clouds = []
        for _, src, tgt, _ in manifest_pairs(_need_file(path)):
            clouds += [src, tgt]
        return clouds
    return [load_cloud(_need_file(path), source_label=path.name)]


def cmd_train(args) -> int:
    from .network import NetworkConfig
    from .training import load_training_checkpoint, train

    overrides = load_run_config(args.config)
    tdefaults = {"seed": args.seed, "desk_scale": args.desk_scale}
    if args.epochs is not None:
        tdefaults["epochs"] = args.epochs
    tcfg = _build("train", overrides, **tdefaults)
    base = NetworkConfig.desk_scale() if tcfg.desk_scale else NetworkConfig()
    ncfg = _build("network", overrides, **{f.name: getattr(base, f.name)
                                           for f in dataclasses.fields(NetworkConfig)})
    clouds = _training_clouds(args.data, tcfg.seed, args.n_points)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.lprn"
    resume = None
    if args.resume:
        resume, _ = load_training_checkpoint(_need_file(args.resume))
    log_path = out / "train_log.jsonl"
    with open(log_path, "a" if resume else "w", encoding="utf-8") as fh:
        def on_step(rec):
            line = json.dumps(rec, sort_keys=True)
            print(line, flush=True)
            fh.write(line + "\n")

        result = train(tcfg, ncfg, clouds, on_step=on_step, checkpoint_path=ckpt, resume=resume,
                       stop_after_epoch=args.stop_after_epoch)
    _emit({"checkpoint": str(ckpt), "epochs": result.state.epoch,
           "final_epoch_loss": result.loss_history[-1] if result.loss_history else None,
           "variant": ncfg.variant_name})
    return EXIT_OK


def cmd_register(args) -> int:
    from .cloud import load_cloud
    from .registration import LearnedFeature, MomentFeature, iclk_register, icp_register
    from .training import load_checkpoint

    if args.features == "learned" and not args.checkpoint:
        raise UsageError("--features learned requires --checkpoint")
    overrides = load_run_config(args.config)
    icfg = _build("iclk", overrides)
    source = load_cloud(_need_file(args.source), source_label=Path(args.source).name)
    target = load_cloud(_need_file(args.target), source_label=Path(args.target).name)
    if args.crop:
        box = _floats(args.crop, 4, "--crop")
        source, target = _crop(source, box), _crop(target, box)
    if args.features == "icp":
        result = icp_register(source, target)
    elif args.features == "moments":
        result = iclk_register(source, target, MomentFeature(args.moment_order), icfg)
    else:
        model = load_checkpoint(_need_file(args.checkpoint), dtype=np.float64)
        result = iclk_register(source, target, LearnedFeature(model, seed=args.seed), icfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(result.transform.to_text() + "\n", encoding="utf-8")
    diag = result.diagnostics()
    diag["features"] = args.features
    Path(str(out) + ".json").write_text(json.dumps(diag, sort_keys=True, indent=2) + "\n",
                                        encoding="utf-8")
    _emit({"transform": str(out), "converged": result.converged,
           "iterations": result.iterations, "degenerate": result.degenerate})
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def _read_transform(path):
    from .geometry import RigidTransform

    return RigidTransform.from_text(_need_file(path).read_text(encoding="utf-8"))


def cmd_evaluate(args) -> int:
    from .evaluation import METRICS, evaluate_pair, worker_count
    from .geometry import RigidTransform
    from .simdata import manifest_pairs

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in METRICS]
    if bad or not metrics:
        raise UsageError(f"--metrics: choose from {','.join(METRICS)}")
    pairs = list(manifest_pairs(_need_file(args.pair_manifest)))
    tdir = None if args.transforms == "identity" else Path(args.transforms)
    if tdir is not None and not tdir.is_dir():
        raise FileNotFoundError(f"no such directory: {tdir}")

    def one(pair):
        pid, src, tgt, gt = pair
        est = RigidTransform.identity() if tdir is None else _read_transform(tdir / f"{pid}.txt")
        return evaluate_pair(pid, src, tgt, est, gt, metrics, method=args.method,
                             config={"metrics": metrics, "cell": args.cell}, cell=args.cell)

    workers = min(worker_count(), len(pairs))
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            reports = list(pool.map(one, pairs))
    else:
        reports = [one(p) for p in pairs]
    lines = [r.to_json() for r in reports]
    if args.out:
        Path(args.out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_filter_ground(args) -> int:
    from .cloud import ground_filter, load_cloud, save_xyz

    if not args.cell > 0:
        raise UsageError("--cell must be positive")
    cloud = load_cloud(_need_file(args.inp), source_label=Path(args.inp).name)
    flagged = ground_filter(cloud, cell=args.cell, height_threshold=args.threshold)
    save_xyz(flagged, args.out, with_flags=True)
    n_ground = int(flagged.ground_flag.sum())
    _emit({"points": len(flagged.points), "ground": n_ground,
           "non_ground": len(flagged.points) - n_ground,
           "ground_fraction": n_ground / len(flagged.points), "out": str(args.out)})
    return EXIT_OK


def cmd_info(args) -> int:
    from .cloud import load_cloud

    cloud = load_cloud(_need_file(args.inp))
    lo, hi = cloud.bounds()
    area = float((hi[0] - lo[0]) * (hi[1] - lo[1]))
    _emit({"n": len(cloud.points), "bounds_min": lo.tolist(), "bounds_max": hi.tolist(),
           # points per square meter over the horizontal bounding box
           "density": len(cloud.points) / area if area > 0 else None})
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lprnet", description="Self-supervised point cloud registration.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-sim", help="generate simulated registration pairs")
    g.add_argument("--base", default="all",
                   help="scene name (plane+boxes, ellipsoid, ridge-terrain, two-towers), 'all', or a cloud file")
    g.add_argument("--n", type=int, default=2048, help="points per procedural base cloud")
    g.add_argument("--pairs", type=int, default=10)
    g.add_argument("--sigma", type=float, default=0.1, help="noise standard deviation (m)")
    g.add_argument("--occlusion", default="0.2,0.5", help="occlusion rate range lo,hi")
    g.add_argument("--rot-max", type=float, default=30.0, help="degrees")
    g.add_argument("--trans-max", type=float, default=2.0, help="meters")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_sim)

    t = sub.add_parser("train", help="self-supervised training on single clouds")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--data", required=True,
                   help="directory of clouds, a cloud file, a pair manifest, or procedural[:COUNT]")
    t.add_argument("--out", required=True, help="output directory (model.lprn, train_log.jsonl)")
    t.add_argument("--desk-scale", action="store_true", help="small network for a single workstation")
    t.add_argument("--epochs", type=int, help="override the configured epoch count")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--n-points", type=int, default=1024, help="points per procedural cloud")
    t.add_argument("--resume", help="training checkpoint to continue from")
    t.add_argument("--stop-after-epoch", type=int, help="end early, keeping the full schedule")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="estimate the transform mapping source onto target")
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--features", choices=("learned", "moments", "icp"), default="learned")
    r.add_argument("--checkpoint", help="trained model (required for learned features)")
    r.add_argument("--moment-order", type=int, choices=(1, 2, 3), default=2)
    r.add_argument("--config", help="JSON run config (iclk section)")
    r.add_argument("--crop", help="xmin,ymin,xmax,ymax applied to both clouds")
    r.add_argument("--out", required=True, help="transform text file; diagnostics go to <out>.json")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="metrics for registered pairs")
    e.add_argument("--pair-manifest", required=True)
    e.add_argument("--transforms", default="identity",
                   help="directory of <pair id>.txt transforms, or 'identity'")
    e.add_argument("--metrics", default="rmse_nn,rmse_t,dsm")
    e.add_argument("--cell", type=float, default=1.0, help="DSM cell size (m)")
    e.add_argument("--method", default="", help="method label stored in each report")
    e.add_argument("--out", help="write line-delimited JSON reports here as well")
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("filter-ground", help="flag ground points with a grid-minimum filter")
    f.add_argument("--in", dest="inp", required=True)
    f.add_argument("--out", required=True, help="XYZ output with a 0/1 ground column")
    f.add_argument("--cell", type=float, default=1.0)
    f.add_argument("--threshold", type=float, default=0.3)
    f.set_defaults(func=cmd_filter_ground)

    i = sub.add_parser("info", help="point count, bounds and density of a cloud")
    i.add_argument("--in", dest="inp", required=True)
    i.set_defaults(func=cmd_info)
    return p


_USAGE_ERRORS = (UsageError, ConfigError, InvalidArgumentError, DatasetError)
_IO_ERRORS = (OSError, ParseError, InvalidInputError, TruncatedFileError, UnsupportedFormatError,
              UnsupportedVersionError, IntegrityError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"lprnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _IO_ERRORS as exc:
        print(f"lprnet {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # last-resort mapping to exit 5
        print(f"lprnet {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
