"""Command-line entry point: ``generate``, ``train``, ``eval`` and ``sweep``.

Exit codes: 0 success, 1 runtime failure, 2 invalid usage or configuration.

A TOML config file may carry the sections ``[model]``, ``[train]``,
``[loss]``, ``[data]`` and ``[run]``; their keys are the fields of the
matching config types. Command-line flags override file values.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .checkpoint import CheckpointError, load_checkpoint
from .data import DataError, DatasetManifest, generate_synthetic_dataset, is_empty_dir
from .losses import LossWeights
from .metrics import evaluate, write_reports
from .model import INFERENCE_PATHS, ModelConfig
from .trainer import DEFAULT_BETAS, ConfigError, TrainConfig, sweep_beta, train

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

_SECTION_TYPES = {"model": ModelConfig, "train": TrainConfig, "loss": LossWeights}
_HIDDEN = {"model": {"norm_affine"}, "train": {"loss_weights"}, "loss": set()}
_EXTRA_SECTIONS = {"data": {"root": str}, "run": {"out": str, "seed": int}}


class UsageError(Exception):
    """Bad flags, config values or inputs; maps to exit code 2."""


@dataclass
class CliConfig:
    """Merged, validated view of everything a command needs."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_root: Optional[Path] = None
    out: Optional[Path] = None

    def to_dict(self) -> dict:
        train = dataclasses.asdict(self.train)
        loss = train.pop("loss_weights")
        return {
            "model": self.model.to_dict(),
            "train": train,
            "loss": loss,
            "data": {"root": None if self.data_root is None else str(self.data_root)},
            "run": {"out": None if self.out is None else str(self.out)},
        }


def _section_fields(section: str) -> dict:
    if section in _EXTRA_SECTIONS:
        return dict(_EXTRA_SECTIONS[section])
    cls = _SECTION_TYPES[section]
    defaults = cls()
    return {
        f.name: type(getattr(defaults, f.name))
        for f in dataclasses.fields(cls)
        if f.name not in _HIDDEN[section]
    }


def _coerce(section: str, key: str, value, kind):
    where = f"[{section}] {key}"
    if section == "train" and key == "max_steps":
        kind = int
    if kind is tuple:
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise UsageError(f"{where} must be a list of integers")
        return tuple(value)
    if kind is bool:
        if not isinstance(value, bool):
            raise UsageError(f"{where} must be true or false")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise UsageError(f"{where} must be an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"{where} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise UsageError(f"{where} must be a string, got {value!r}")
    return value


def parse_config_dict(raw: dict) -> dict:
    """Type-check a raw config mapping; unknown sections or keys are errors."""
    known = set(_SECTION_TYPES) | set(_EXTRA_SECTIONS)
    out = {}
    for section, values in raw.items():
        if section not in known:
            raise UsageError(f"unknown config section [{section}]; expected one of {sorted(known)}")
        if not isinstance(values, dict):
            raise UsageError(f"[{section}] must be a table")
        fields = _section_fields(section)
        for key, value in values.items():
            if key not in fields:
                raise UsageError(f"unknown key {key!r} in [{section}]; expected one of {sorted(fields)}")
            out.setdefault(section, {})[key] = _coerce(section, key, value, fields[key])
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc
    return parse_config_dict(raw)


def build_config(file_values: dict, overrides: dict) -> CliConfig:
    """Merge file values with ``{section: {key: value}}`` overrides and validate."""
    merged = {s: dict(v) for s, v in file_values.items()}
    for section, values in overrides.items():
        for key, value in values.items():
            if value is not None:
                merged.setdefault(section, {})[key] = value
    run = merged.get("run", {})
    model_kw = dict(merged.get("model", {}))
    train_kw = dict(merged.get("train", {}))
    if "seed" in run:
        model_kw.setdefault("seed", run["seed"])
        train_kw.setdefault("seed", run["seed"])
    try:
        weights = LossWeights(**merged.get("loss", {}))
        model = ModelConfig(**model_kw)
        train_cfg = TrainConfig(loss_weights=weights, **train_kw)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    root = merged.get("data", {}).get("root")
    out = run.get("out")
    return CliConfig(model, train_cfg, None if root is None else Path(root), None if out is None else Path(out))


def resolve_out_dir(out, overwrite: bool) -> Path:
    """Use ``out`` if it is absent, empty or ``overwrite`` is set, else a fresh run-stamped child."""
    out = Path(out)
    if overwrite or is_empty_dir(out):
        out.mkdir(parents=True, exist_ok=True)
        return out
    if not out.is_dir():
        raise UsageError(f"output path {out} exists and is not a directory")
    stamp = datetime.now().strftime("run-%Y%m%d-%H%M%S")
    candidate, n = out / stamp, 1
    while candidate.exists():
        n += 1
        candidate = out / f"{stamp}-{n}"
    candidate.mkdir(parents=True)
    return candidate


# ---------------------------------------------------------------------------
# commands


def _load_manifest(root) -> DatasetManifest:
    if root is None:
        raise UsageError("no dataset given; pass --data or set [data] root")
    try:
        return DatasetManifest.load(root)
    except (DataError, FileNotFoundError) as exc:
        raise UsageError(f"cannot load dataset at {root}: {exc}") from exc


def _check_dims(model: ModelConfig, manifest: DatasetManifest):
    m = model.min_input_size
    if manifest.height % m or manifest.width % m:
        return f"dataset images are {manifest.height}x{manifest.width}, the model needs multiples of {m}"
    return None


def _write_config(cfg: CliConfig, out: Path):
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def cmd_generate(args, cfg: CliConfig) -> int:
    seed = args.seed if args.seed is not None else cfg.train.seed
    out = args.out or cfg.out
    if out is None:
        raise UsageError("generate needs --out")
    if args.size % 8:
        raise UsageError(f"--size must be divisible by 8, got {args.size}")
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if args.val_count is not None and not 0 <= args.val_count <= args.count:
        raise UsageError(f"--val-count must lie in [0, {args.count}]")
    root = resolve_out_dir(out, args.overwrite)
    manifest = generate_synthetic_dataset(seed, args.count, args.size, args.size, root, args.val_count)
    print(
        f"wrote {len(manifest.scene_ids)} scenes ({len(manifest.scenes('train'))} train, "
        f"{len(manifest.scenes('val'))} val) of {args.size}x{args.size} to {root}"
    )
    return EXIT_OK


def cmd_train(args, cfg: CliConfig) -> int:
    manifest = _load_manifest(cfg.data_root)
    problem = _check_dims(cfg.model, manifest)
    if problem:
        raise UsageError(problem)
    out = resolve_out_dir(cfg.out or Path("runs/train"), args.overwrite)
    _write_config(cfg, out)
    _, tlog = train(cfg.train, manifest, cfg.model, out)
    print(
        f"trained {len(tlog)} epochs ({tlog.steps} steps); train MSE "
        f"{tlog.initial_train_mse:.4f} -> {tlog.final_train_mse:.4f}; "
        f"best val SSIM {tlog.best_val_ssim:.4f} at epoch {tlog.best_epoch}; outputs in {out}"
    )
    return EXIT_OK


def cmd_eval(args, cfg: CliConfig) -> int:
    manifest = _load_manifest(cfg.data_root)
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    net, _ = load_checkpoint(args.checkpoint)
    problem = _check_dims(net.config, manifest)
    if problem:
        raise CheckpointError(f"checkpoint does not fit dataset: {problem}")
    if not manifest.scenes(args.split):
        raise UsageError(f"dataset has no {args.split!r} scenes")
    paths = INFERENCE_PATHS if args.path == "all" else (args.path.replace("-", "_"),)
    out = resolve_out_dir(cfg.out or Path("runs/eval"), args.overwrite)
    reports = [evaluate(net, manifest, args.split, p) for p in paths]
    csv_path, json_path = write_reports(reports, out / "report.csv")
    for r in reports:
        print(f"{r.path:<13} n={r.n_samples}  SSIM {r.mean_ssim:.4f}  PSNR {r.mean_psnr_db:.2f} dB")
    print(f"reports: {csv_path}, {json_path}")
    return EXIT_OK


def _parse_betas(text: str):
    try:
        betas = [float(b) for b in text.split(",") if b.strip()]
    except ValueError as exc:
        raise UsageError(f"--betas must be comma-separated numbers, got {text!r}") from exc
    if not betas:
        raise UsageError("--betas is empty")
    if any(b < 0 for b in betas):
        raise UsageError("--betas must be non-negative")
    return betas


def cmd_sweep(args, cfg: CliConfig) -> int:
    betas = _parse_betas(args.betas)
    manifest = _load_manifest(cfg.data_root)
    problem = _check_dims(cfg.model, manifest)
    if problem:
        raise UsageError(problem)
    if any(b > 0 for b in betas) and cfg.train.batch_size < 2:
        raise UsageError("contrastive loss (beta > 0) needs batch_size >= 2")
    out = resolve_out_dir(cfg.out or Path("runs/sweep"), args.overwrite)
    _write_config(cfg, out)
    result = sweep_beta(cfg.train, betas, manifest, cfg.model, out)
    table = result.write_table(out / "sweep_table.csv")
    curves = result.write_curves(out / "sweep_curves.csv")
    for row in result.rows:
        print(f"beta={row.beta:<8g} {row.path:<13} val SSIM {row.val_ssim:.4f}  PSNR {row.val_psnr:.2f} dB")
    print(f"best beta (full path, val SSIM): {result.best_beta():g}")
    print(f"tables: {table}, {curves}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--seed", type=int, help="seed for data, initialisation and batching")
    common.add_argument("--overwrite", action="store_true", help="write into --out even if it is not empty")

    parser = argparse.ArgumentParser(prog="corefusion", description="RGB-guided x8 thermal super-resolution")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--count", type=int, default=40)
    g.add_argument("--size", type=int, default=48, help="HR height and width, divisible by 8")
    g.add_argument("--val-count", type=int, default=None, help="validation scenes (default 20%%)")

    def training_flags(p):
        p.add_argument("--data", type=Path, help="dataset root (overrides [data] root)")
        p.add_argument("--epochs", type=int, help="max epochs")
        p.add_argument("--max-steps", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float, help="learning rate")
        p.add_argument("--eval-every", type=int)

    t = sub.add_parser("train", parents=[common], help="train one model")
    training_flags(t)
    t.add_argument("--beta", type=float, help="contrastive loss weight")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path)
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.add_argument("--path", choices=("full", "thermal-only", "rgb-only", "all"), default="all")

    s = sub.add_parser("sweep", parents=[common], help="train and score one model per beta")
    training_flags(s)
    s.add_argument("--betas", default=",".join(f"{b:g}" for b in DEFAULT_BETAS), help="comma-separated")
    return parser


def _overrides(args) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "run": {"out": None if args.out is None else str(args.out)},
        "model": {"seed": args.seed},
        "data": {"root": None if get("data") is None else str(get("data"))},
        "train": {
            "max_epochs": get("epochs"),
            "max_steps": get("max_steps"),
            "batch_size": get("batch_size"),
            "learning_rate": get("lr"),
            "eval_every": get("eval_every"),
            "seed": args.seed,
        },
        "loss": {"beta": get("beta")},
    }


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        file_values = load_config_file(args.config) if args.config else {}
        cfg = build_config(file_values, _overrides(args))
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DataError, OSError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
