"""``harmoniz`` command line: harmonize, train-toy and sweep.

Exit codes: 0 success, 2 configuration error, 3 shape error, 4 numeric
failure (or a sweep with too many failed runs).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tomllib
from pathlib import Path
from typing import TypeVar

import logfire
import torch
from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from harmoniz import __version__
from harmoniz.errors import (
    ConfigError,
    ContractError,
    NumericError,
    ParameterError,
    ShapeError,
)
from harmoniz.harmonizer import harmonize, run_record_json
from harmoniz.image_io import load_image, load_mask, save_image, sha256_hex
from harmoniz.latent_codec import make_codec
from harmoniz.models import RunConfigFile, SweepSpec, TrainConfig
from harmoniz.sweep import run_sweep, write_csv
from harmoniz.textures import TextureDataset
from harmoniz.toy_backend import load_snapshot, save_snapshot, train_toy

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SHAPE = 3
EXIT_NUMERIC = 4

LOSS_TRACE_COLUMNS = (
    "iteration", "round", "level", "style", "content", "histogram", "tv",
    "weighted_style", "weighted_content", "weighted_stability", "total",
)

M = TypeVar("M", bound=BaseModel)


def configure_logging() -> None:
    load_dotenv()
    logfire.configure(
        service_name="harmoniz",
        environment=os.environ.get("HARMONIZ_ENVIRONMENT", "development"),
        send_to_logfire="if-token-present",
    )
    logging.basicConfig(level=logging.INFO, handlers=[logfire.LogfireLoggingHandler()])


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------
def config_error(exc: ValidationError) -> ConfigError:
    """The first validation failure, named by its dotted field path."""
    err = exc.errors()[0]
    field = ".".join(str(p) for p in err["loc"]) or "config"
    return ConfigError(field, err["msg"])


def read_config(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError("config", f"{path} does not exist")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".toml":
            return tomllib.loads(text)
        if path.suffix == ".json":
            return json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from exc
    raise ConfigError("config", f"{path}: expected a .toml or .json file")


def load_config_file(path: Path, model: type[M]) -> M:
    """Validate a TOML/JSON file into ``model``; relative paths in it are
    taken relative to the file."""
    data = read_config(path)
    try:
        cfg = model.model_validate(data)
    except ValidationError as exc:
        raise config_error(exc) from exc
    updates = {
        name: path.parent / value
        for name, value in cfg
        if isinstance(value, Path) and not value.is_absolute()
    }
    return cfg.model_copy(update=updates) if updates else cfg


def _require_file(field: str, path: Path) -> None:
    if not path.is_file():
        raise ConfigError(field, f"{path} does not exist")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_harmonize(config_path: Path, *, seed: int | None = None, literal: bool = False) -> int:
    run_cfg = load_config_file(config_path, RunConfigFile)
    for field in ("foreground", "background", "mask", "backend"):
        _require_file(field, getattr(run_cfg, field))

    cfg = run_cfg.harmonize_config()
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    if literal:
        cfg = cfg.literal_objective()

    dtype = getattr(torch, cfg.dtype)
    background = load_image(run_cfg.background, dtype, field="background")
    foreground = load_image(run_cfg.foreground, dtype, field="foreground")
    mask = load_mask(run_cfg.mask, dtype)
    backend = load_snapshot(run_cfg.backend)
    codec = make_codec(run_cfg.codec.kind, run_cfg.codec.factor)

    result = harmonize(background, foreground, mask, cfg, backend, codec)

    out = run_cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    result.record.hashes["fused_png"] = save_image(result.fused_image, out / "fused.png")
    write_csv(out / "loss_trace.csv", LOSS_TRACE_COLUMNS, [r.to_row() for r in result.loss_trace])
    result.record.hashes["loss_trace_csv"] = sha256_hex((out / "loss_trace.csv").read_bytes())
    (out / "run.json").write_text(run_record_json(result.record))
    logfire.info("wrote {output_dir}", output_dir=str(out), run_hash=result.record.run_hash)
    print(out / "fused.png")
    return EXIT_OK


def cmd_train_toy(config_path: Path, *, seed: int | None = None) -> int:
    cfg = load_config_file(config_path, TrainConfig)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})

    dataset = TextureDataset(cfg.dataset)
    result = train_toy(dataset, cfg.schedule.build(), cfg)
    path = save_snapshot(result.backend, cfg.output_dir)
    # val_trace[0] is the untrained model
    rows = [{"epoch": 0, "train_eps_mse": "", "val_eps_mse": result.val_trace[0]}]
    rows += [
        {"epoch": epoch, "train_eps_mse": train, "val_eps_mse": val}
        for epoch, (train, val) in enumerate(zip(result.loss_trace, result.val_trace[1:]), start=1)
    ]
    write_csv(path.with_name(f"{path.stem}_training_loss.csv"), ("epoch", "train_eps_mse", "val_eps_mse"), rows)
    print(path)
    return EXIT_OK


def cmd_sweep(
    spec_path: Path, *, jobs: int = 1, seed: int | None = None, literal: bool = False
) -> int:
    spec = load_config_file(spec_path, SweepSpec)
    _require_file("backend", spec.backend)
    if seed is not None:
        spec = spec.model_copy(update={"seeds": [seed]})
    if literal:
        spec = spec.model_copy(update={"base": spec.base.literal_objective()})

    outcome = run_sweep(spec, jobs=jobs)
    print(f"{outcome.succeeded}/{outcome.total} runs succeeded; tables in {spec.output_dir}")
    return EXIT_OK if outcome.ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harmoniz", description="Painterly image harmonization with a frozen denoiser.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("harmonize", help="harmonize one foreground/background pair")
    p.add_argument("--config", type=Path, required=True, help="TOML or JSON run config")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument(
        "--literal-objective", "--strict-paper", dest="literal_objective", action="store_true",
        help="unnormalized Gram, background content target",
    )

    p = sub.add_parser("train-toy", help="train the toy denoiser and write a snapshot")
    p.add_argument("--config", type=Path, required=True, help="TOML or JSON training config")
    p.add_argument("--seed", type=int, default=None, help="override the training seed")

    p = sub.add_parser("sweep", help="run an ablation grid and write metric tables and plots")
    p.add_argument("--spec", type=Path, required=True, help="TOML or JSON sweep spec")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (1 runs in-process)")
    p.add_argument("--seed", type=int, default=None, help="replace the seed list with one seed")
    p.add_argument(
        "--literal-objective", "--strict-paper", dest="literal_objective", action="store_true",
        help="unnormalized Gram, background content target",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        if args.command == "harmonize":
            return cmd_harmonize(args.config, seed=args.seed, literal=args.literal_objective)
        if args.command == "train-toy":
            return cmd_train_toy(args.config, seed=args.seed)
        return cmd_sweep(args.spec, jobs=args.jobs, seed=args.seed, literal=args.literal_objective)
    except (ConfigError, ParameterError, ContractError) as exc:
        code, message = EXIT_CONFIG, str(exc)
    except ValidationError as exc:
        code, message = EXIT_CONFIG, str(config_error(exc))
    except ShapeError as exc:
        code, message = EXIT_SHAPE, str(exc)
    except NumericError as exc:
        code, message = EXIT_NUMERIC, str(exc)
    print(f"error: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
