"""Command-line entry point: ``stabn gen | train | eval | explain``.

Every subcommand accepts ``--config FILE`` (``key = value`` lines, ``#``
comments); explicit flags override file values. Exit codes: 0 success,
1 usage, 2 data or format error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from . import evaluate as ev
from . import explain
from .errors import InputError, StabnError, UsageError
from .model import ModelConfig, build_model
from .synth import SynthConfig, file_checksum, generate, load_dataset, save_dataset
from .train import TrainConfig, load_checkpoint, restore, train

logger = logging.getLogger("stabn")

TRAIN_FILE = "train.stvid"
VAL_FILE = "val.stvid"


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple:
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


def _opt_float(text: str) -> Optional[float]:
    return None if str(text).strip().lower() in ("", "none") else float(text)


@dataclass(frozen=True)
class Key:
    parse: Callable
    help: str
    default: object = None


# The one schema shared by config files and flags; flag name = key with '-' for '_'.
SCHEMA: Dict[str, Dict[str, Key]] = {
    "gen": {
        "out": Key(str, "output directory"),
        "classes": Key(int, "number of motion classes (2 or 4)", 4),
        "frames": Key(int, "frames per clip", 8),
        "size": Key(int, "frame height and width", 32),
        "channels": Key(int, "channels per frame", 1),
        "shape_size": Key(int, "side of the moving square", 5),
        "window_len": Key(int, "frames of motion", 4),
        "noise_std": Key(float, "background noise scale", 0.1),
        "train": Key(int, "training samples", 2000),
        "val": Key(int, "validation samples", 400),
        "seed": Key(int, "generation seed", 42),
    },
    "train": {
        "data": Key(str, "directory holding train.stvid and val.stvid"),
        "out": Key(str, "run output directory"),
        "stage_channels": Key(_int_list, "comma-separated stage widths", (16, 32, 64)),
        "blocks_per_stage": Key(_int_list, "comma-separated residual blocks per stage (default: 1 each)"),
        "split_stage": Key(int, "stage index where the branches fork (default: last)"),
        "se_reduction": Key(int, "temporal gate reduction ratio", 2),
        "dropout": Key(float, "dropout rate in both branches", 0.5),
        "batchnorm": Key(_bool, "use batch normalization in residual blocks", True),
        "lr": Key(float, "initial learning rate", 0.01),
        "momentum": Key(float, "SGD momentum", 0.9),
        "weight_decay": Key(float, "L2 weight decay", 0.0005),
        "batch_size": Key(int, "mini-batch size", 16),
        "epochs": Key(int, "maximum epochs", 30),
        "patience": Key(int, "epochs without validation improvement before decay", 3),
        "min_lr": Key(float, "stop once the learning rate falls below this", 1e-6),
        "max_grad_norm": Key(_opt_float, "optional gradient-norm clip", None),
        "seed": Key(int, "initialization, shuffle and dropout seed", 0),
    },
    "eval": {
        "ckpt": Key(str, "checkpoint file"),
        "data": Key(str, "dataset file or directory (val.stvid is used)"),
        "out": Key(str, "optional directory for report files"),
        "invert": Key(str, "none | spatial | temporal | both | all", "all"),
        "batch_size": Key(int, "evaluation batch size", 32),
    },
    "explain": {
        "ckpt": Key(str, "checkpoint file"),
        "data": Key(str, "dataset file or directory (val.stvid is used)"),
        "index": Key(int, "sample index", 0),
        "out": Key(str, "output directory"),
        "alpha": Key(float, "overlay opacity", 0.5),
    },
}
REQUIRED = {"gen": ("out",), "train": ("data", "out"), "eval": ("ckpt", "data"), "explain": ("ckpt", "data", "out")}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def read_config_file(path: str) -> Dict[str, str]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def resolve(command: str, flags: argparse.Namespace) -> Dict[str, object]:
    """Merge schema defaults, config-file values and flags, in that order of precedence."""
    schema = SCHEMA[command]
    merged = {k: spec.default for k, spec in schema.items()}
    if flags.config:
        for key, raw in read_config_file(flags.config).items():
            if key not in schema:
                raise UsageError(f"unknown config key {key!r} for '{command}'")
            try:
                merged[key] = schema[key].parse(raw)
            except ValueError as exc:
                raise UsageError(f"bad value for {key!r}: {exc}") from exc
    for key in schema:
        value = getattr(flags, key)
        if value is not None:
            merged[key] = value
    missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[command] if merged.get(k) is None]
    if missing:
        raise UsageError(f"'{command}' needs {', '.join(missing)}")
    return merged


def echo_config(out_dir: Path, command: str, merged: Dict[str, object]) -> None:
    lines = [f"# effective configuration for '{command}'"]
    for key, value in merged.items():
        if isinstance(value, tuple):
            value = ",".join(map(str, value))
        lines.append(f"{key} = {value}")
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _dataset_path(data: str, default_file: str) -> Path:
    p = Path(data)
    return p / default_file if p.is_dir() else p


# -- commands ------------------------------------------------------------------


def cmd_gen(cfg: Dict[str, object]) -> int:
    if cfg["classes"] not in (2, 4):
        raise UsageError(f"--classes must be 2 or 4, got {cfg['classes']}")
    synth = SynthConfig(
        num_classes=cfg["classes"],
        frames=cfg["frames"],
        size=cfg["size"],
        channels=cfg["channels"],
        shape_size=cfg["shape_size"],
        window_len=cfg["window_len"],
        noise_std=cfg["noise_std"],
        samples_train=cfg["train"],
        samples_val=cfg["val"],
        seed=cfg["seed"],
    )
    try:
        synth.validate()
    except StabnError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    train_set, val_set = generate(synth)
    for name, ds in ((TRAIN_FILE, train_set), (VAL_FILE, val_set)):
        crc = save_dataset(out / name, ds)
        hist = " ".join(str(v) for v in ds.class_histogram())
        print(f"{name}: samples={len(ds)} classes=[{hist}] crc32={crc:08x}")
    echo_config(out, "gen", cfg)
    return 0


def cmd_train(cfg: Dict[str, object]) -> int:
    data = Path(cfg["data"])
    if not (data / TRAIN_FILE).exists() or not (data / VAL_FILE).exists():
        raise UsageError(f"{data} does not contain {TRAIN_FILE} and {VAL_FILE}")
    train_set = load_dataset(data / TRAIN_FILE)
    val_set = load_dataset(data / VAL_FILE)
    synth = train_set.config
    if cfg["blocks_per_stage"] is None:
        cfg["blocks_per_stage"] = (1,) * len(cfg["stage_channels"])
    model_cfg = ModelConfig(
        num_classes=synth.num_classes,
        frames=synth.frames,
        input_channels=synth.channels,
        spatial_size=(synth.size, synth.size),
        stage_channels=cfg["stage_channels"],
        blocks_per_stage=cfg["blocks_per_stage"],
        split_stage=cfg["split_stage"],
        se_reduction=cfg["se_reduction"],
        dropout_rate=cfg["dropout"],
        batchnorm=cfg["batchnorm"],
    )
    train_cfg = TrainConfig(
        lr_initial=cfg["lr"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"],
        epochs_max=cfg["epochs"],
        plateau_patience=cfg["patience"],
        min_lr=cfg["min_lr"],
        seed=cfg["seed"],
        max_grad_norm=cfg["max_grad_norm"],
    )
    try:
        model_cfg.validate()
        train_cfg.validate()
    except StabnError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    echo_config(out, "train", cfg)
    model = build_model(model_cfg, cfg["seed"])
    result = train(
        model,
        train_set,
        val_set,
        train_cfg,
        callbacks=[lambda r: print(r.to_json(), flush=True)],
        checkpoint_path=out / "best.ckpt",
        log_path=out / "train_log.jsonl",
    )
    best = result.best
    print(f"best epoch {best.epoch}: val_l_total={best.best_val_loss:.6f} -> {out / 'best.ckpt'}")
    return 0


def _load_model_and_data(cfg):
    ckpt = load_checkpoint(cfg["ckpt"])
    model = restore(ckpt)
    dataset = load_dataset(_dataset_path(cfg["data"], VAL_FILE))
    return model, dataset


def cmd_eval(cfg: Dict[str, object]) -> int:
    mode = cfg["invert"]
    if mode != "all" and mode not in ev.INVERT_MODES:
        raise UsageError(f"--invert must be one of none|spatial|temporal|both|all, got {mode!r}")
    model, dataset = _load_model_and_data(cfg)
    conditions = ev.CONDITIONS if mode == "all" else (ev.INVERT_MODES[mode],)
    report = ev.run_inversion_experiment(model, dataset, conditions, cfg["batch_size"])
    text = report.to_table()
    records = report.to_records()
    loc = None
    if dataset.has_metadata:
        loc = ev.score_localization(model, dataset, cfg["batch_size"])
        text += (
            f"\ntemporal_contrast {loc.temporal_contrast:+.4f} over {loc.temporal_samples} samples\n"
            f"spatial_contrast  {loc.spatial_contrast:+.4f} over {loc.spatial_samples} samples\n"
        )
        records += loc.to_records()
    print(text, end="")
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(records)
        (out / "table.txt").write_text(text)
        echo_config(out, "eval", cfg)
    return 0


def cmd_explain(cfg: Dict[str, object]) -> int:
    alpha = cfg["alpha"]
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"--alpha must lie in [0, 1], got {alpha}")
    model, dataset = _load_model_and_data(cfg)
    index = cfg["index"]
    if not 0 <= index < len(dataset):
        raise InputError(f"--index {index} out of range for {len(dataset)} samples")
    sample = dataset[index]
    out_put = model.infer(sample.video[None].astype("float64"))
    spatial = out_put.attention.spatial.data[0]
    temporal = out_put.attention.temporal.data[0]
    overlays = explain.render_spatial(sample.video, spatial, alpha)
    swatches, csv_text = explain.render_temporal(temporal)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for t, raster in enumerate(overlays):
        explain.write_ppm(out / f"frame_{t:03d}.ppm", raster)
    explain.write_ppm(out / "sheet.ppm", explain.contact_sheet(sample.video, overlays, swatches))
    (out / "temporal.csv").write_text(csv_text)
    echo_config(out, "explain", cfg)
    pred = int(out_put.per_logits.data[0].argmax())
    print(f"sample {index}: label={sample.label} predicted={pred} -> {out}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "explain": cmd_explain}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stabn", description="Spatio-temporal attention branch network at desk scale")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, schema in SCHEMA.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; flags override it")
        for key, spec in schema.items():
            kwargs = {"type": spec.parse, "default": None, "help": spec.help}
            if key == "invert":
                kwargs["choices"] = ["none", "spatial", "temporal", "both", "all"]
            p.add_argument("--" + key.replace("_", "-"), dest=key, **kwargs)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required: gen | train | eval | explain")
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s"
        )
        return COMMANDS[args.command](resolve(args.command, args))
    except StabnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
