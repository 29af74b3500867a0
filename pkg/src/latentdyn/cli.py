"""Command-line entry points: gen-data, pretrain, probe, embed, gradcheck.

Configuration comes from a JSON file with flat dotted keys
("scene.n_points", "train.lr", ...), overridable by flags; unknown keys
are an error. Exit codes: 0 success, 2 config error, 3 numerical failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .checks import run_gradcheck_suite
from .data.geometry import DataError
from .data.io import read_dataset, write_dataset
from .data.synthetic import SceneConfig, generate_trajectory, subsample_trajectory, trajectory_seed
from .evaluate import export_embedding, run_probe, write_probe_report
from .numerics import NumericsError
from .trainer import TrainConfig, load_checkpoint, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


class ConfigError(ValueError):
    """Unknown key, type mismatch, or missing required path."""


@dataclass
class CliConfig:
    scene: SceneConfig
    train: TrainConfig

    def flat(self) -> dict:
        out = {}
        for section, obj in (("scene", self.scene), ("train", self.train)):
            for key, value in dataclasses.asdict(obj).items():
                out[f"{section}.{key}"] = value
        return out


def _coerce(key: str, value, annotation):
    origin = typing.get_origin(annotation)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {key!r} must be a list, got {type(value).__name__}")
        return tuple(float(v) for v in value)
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be a boolean")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} must be an integer")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} must be a number")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} must be a string")
        return value
    raise ConfigError(f"config key {key!r} has unsupported type")


def parse_config(path=None, overrides: dict | None = None) -> CliConfig:
    """defaults -> file -> flag overrides, strict about unknown keys."""
    entries: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                raw = f.read()
        except OSError as err:
            raise ConfigError(f"cannot read config file {path}: {err}") from err
        try:
            entries = json.loads(raw) if raw.strip() else {}
        except json.JSONDecodeError as err:
            raise ConfigError(f"invalid JSON in {path}: {err}") from err
        if not isinstance(entries, dict):
            raise ConfigError("config file must hold a JSON object")
    if overrides:
        entries.update(overrides)

    fields = {
        f"scene.{f.name}": ("scene", f) for f in dataclasses.fields(SceneConfig)
    }
    fields.update({f"train.{f.name}": ("train", f) for f in dataclasses.fields(TrainConfig)})

    values = {"scene": {}, "train": {}}
    for key, value in entries.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        section, fld = fields[key]
        annotation = typing.get_type_hints(SceneConfig if section == "scene" else TrainConfig)[fld.name]
        values[section][fld.name] = _coerce(key, value, annotation)

    try:
        cfg = CliConfig(scene=SceneConfig(**values["scene"]),
                        train=TrainConfig(**values["train"]))
        cfg.scene.validate()
        cfg.train.validate()
    except (DataError, NumericsError) as err:
        raise ConfigError(str(err)) from err
    return cfg


def _echo_config(cfg: CliConfig) -> None:
    print(json.dumps(cfg.flat(), sort_keys=True))


def _worker_count() -> int:
    env = os.environ.get("LATENT_DYN_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError as err:
            raise ConfigError(f"LATENT_DYN_THREADS must be an integer, got {env!r}") from err
        if n < 1:
            raise ConfigError("LATENT_DYN_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _cmd_gen_data(args) -> int:
    cfg = parse_config(args.config)
    _echo_config(cfg)
    scene = cfg.scene
    seeds = [trajectory_seed(args.seed, i) for i in range(scene.n_trajectories)]
    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        trajs = list(pool.map(lambda s: generate_trajectory(scene, s), seeds))
    if args.skip_frames or args.stride != 1:
        trajs = [subsample_trajectory(t, args.skip_frames, args.stride) for t in trajs]
    write_dataset(trajs, args.out, config=scene, seed=args.seed)
    print(f"wrote {len(trajs)} trajectories to {args.out}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    overrides: dict = {}
    if args.interval is not None:
        overrides["train.k"] = args.interval
    if args.d_act is not None:
        overrides["train.action_dim"] = args.d_act
    if args.idm_input is not None:
        overrides["train.idm_input"] = args.idm_input
    if args.objective is not None:
        overrides["train.objective"] = args.objective
    if args.no_history:
        overrides["train.no_history"] = True
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    cfg = parse_config(args.config, overrides)
    _echo_config(cfg)
    dataset = read_dataset(args.data)
    final = train(cfg.train, dataset, args.out, resume_from=args.resume)
    print(f"final checkpoint: {final}")
    return EXIT_OK


def _cmd_probe(args) -> int:
    state = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    report = run_probe(state, dataset)
    write_probe_report(report, args.report)
    print(json.dumps({"r2": report["r2"], "r2_shuffled": report["r2_shuffled"],
                      "min_std": report["min_std"], "median_std": report["median_std"],
                      "n_samples": report["n_samples"]}, sort_keys=True))
    return EXIT_OK


def _cmd_embed(args) -> int:
    state = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    coords = export_embedding(state, dataset, args.out)
    print(f"wrote {coords.shape[0]} embedded frames to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    results = run_gradcheck_suite(seed=args.seed)
    failed = 0
    for res in results:
        status = "pass" if res.passed else "FAIL"
        print(f"{status}  {res.name:20s} max_rel_err={res.max_rel_err:.3e} "
              f"(tol {res.tolerance:.0e})")
        failed += 0 if res.passed else 1
    if failed:
        print(f"{failed}/{len(results)} gradient checks failed")
        return EXIT_NUMERICAL
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latent-dyn",
        description="Action-free 3D latent-dynamics pre-training on point clouds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic trajectory dataset")
    p.add_argument("--config", type=Path, default=None, help="JSON config (flat dotted keys)")
    p.add_argument("--out", type=Path, required=True, help="output dataset path (.afro)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-frames", type=int, default=0, dest="skip_frames",
                   help="drop this many leading frames per trajectory")
    p.add_argument("--stride", type=int, default=1, help="keep every stride-th frame")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="run latent-dynamics pre-training")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--no-history", action="store_true", dest="no_history",
                   help="disable the predict-history branch")
    p.add_argument("--idm-input", choices=["diff", "concat"], default=None, dest="idm_input")
    p.add_argument("--objective", choices=["vicreg", "mse"], default=None)
    p.add_argument("--interval", type=int, default=None, help="frame interval k")
    p.add_argument("--d-act", type=int, default=None, dest="d_act", help="latent action dim")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", type=Path, default=None, help="epoch-boundary checkpoint")
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("probe", help="latent-action decodability + collapse report")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True, help="output JSON path")
    p.set_defaults(fn=_cmd_probe)

    p = sub.add_parser("embed", help="export a 2D PCA embedding of frame features")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output CSV path")
    p.set_defaults(fn=_cmd_embed)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
