"""Operator surface: dataset synthesis, training, evaluation, prediction
dumps, gradient checking, and analysis-table emission.

Every flag has a config-file equivalent (flat ``key = value`` lines with ``#``
comments); flags override the file. Exit codes: 0 success, 1 usage/config
error, 2 data error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import dataio, evalkit, losses, trainer
from .dataio import DataError, DatasetSpec, FormatError
from .tensorcore import ParameterError, ShapeError
from .trainer import ConfigError, TrainConfig, TrainingError


class UsageError(Exception):
    """Bad command line; carries the usage text."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage errors to 1
        raise UsageError(f"{message}\n{self.format_usage()}")


_BOOLS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOLS[text.strip().lower()]
    except KeyError:
        raise ConfigError(f"not a boolean: {text!r}") from None


# Config-file schema: every CLI flag resolves to one of these keys.
SCHEMA = {
    "train_data": str,
    "val_data": str,
    "data": str,
    "table_init": str,
    "out_dir": str,
    "checkpoint": str,
    "alternation_period": int,
    "batch_size": int,
    "emb_lr": float,
    "emb_wd": float,
    "depth_lr": float,
    "depth_wd": float,
    "tau": float,
    "lambda_infonce": float,
    "patience": int,
    "decay_start": int,
    "decay_floor": float,
    "seed": int,
    "freeze_mlps": bool,
    "use_cls": bool,
    "loss_set": str,
    "hidden": int,
    "dropout": float,
    "tta": bool,
    "crop": str,
    "max_steps": int,
    "max_epochs": int,
    "trim": str,
    "instances": int,
    "synth_out": str,
    "synth_seed": int,
    "synth_frames": int,
    "synth_noise": float,
    "synth_dim": int,
    "synth_grid_h": int,
    "synth_grid_w": int,
    "synth_k": int,
    "synth_range_min": float,
    "synth_range_max": float,
    "synth_d_min": float,
    "synth_d_max": float,
}

DEFAULTS = {
    "table_init": "random:0",
    "out_dir": "runs/default",
    "seed": 0,
    "trim": "",
    "instances": 20,
    "synth_out": "synth.pceb",
    "synth_seed": 0,
    "synth_frames": 8,
    "synth_noise": 0.05,
    "synth_dim": 32,
    "synth_grid_h": 24,
    "synth_grid_w": 24,
    "synth_k": 15,
    "synth_range_min": 0.0,
    "synth_range_max": 10.0,
    "synth_d_min": 0.001,
    "synth_d_max": 10.0,
}


def parse_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment; no nesting."""
    out = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        caster = SCHEMA[key]
        try:
            out[key] = _parse_bool(value) if caster is bool else caster(value)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(parse_config_file(args.config))
    for key in SCHEMA:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def train_config_from(cfg: dict) -> TrainConfig:
    tc = TrainConfig()
    for name in (
        "alternation_period", "batch_size", "emb_lr", "emb_wd", "depth_lr", "depth_wd",
        "tau", "lambda_infonce", "patience", "decay_start", "decay_floor", "seed",
        "freeze_mlps", "use_cls", "loss_set", "hidden", "dropout", "table_init",
        "tta", "crop", "max_steps", "max_epochs",
    ):
        if name in cfg:
            setattr(tc, name, cfg[name])
    tc.validate()
    return tc


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")


def cmd_synth(cfg: dict) -> int:
    spec = DatasetSpec(
        dim=cfg["synth_dim"],
        grid_h=cfg["synth_grid_h"],
        grid_w=cfg["synth_grid_w"],
        img_h=cfg["synth_grid_h"] * dataio.PATCH_SIZE,
        img_w=cfg["synth_grid_w"] * dataio.PATCH_SIZE,
        d_min=cfg["synth_d_min"],
        d_max=cfg["synth_d_max"],
        range_min=cfg["synth_range_min"],
        range_max=cfg["synth_range_max"],
        k=cfg["synth_k"],
    )
    path = dataio.synth_generate(
        cfg["synth_seed"], spec, cfg["synth_frames"], cfg["synth_noise"], cfg["synth_out"]
    )
    print(f"wrote {cfg['synth_frames']} frames to {path}")
    return 0


def cmd_train(cfg: dict) -> int:
    _require(cfg, "train_data", "val_data", "out_dir")
    spec, train_frames = dataio.read_pceb(cfg["train_data"])
    val_spec, val_frames = dataio.read_pceb(cfg["val_data"])
    if (val_spec.dim, val_spec.k) != (spec.dim, spec.k):
        raise DataError(
            f"validation file geometry ({val_spec.dim}, {val_spec.k}) does not match "
            f"training file ({spec.dim}, {spec.k})"
        )
    spec.crop = cfg.get("crop", spec.crop)
    config = train_config_from(cfg)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.log"
    with log_path.open("w") as log_file:
        log_file.write(f"# train started {time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime())}\n")

        def log(line: str) -> None:
            log_file.write(line + "\n")
            log_file.flush()

        result = trainer.fit(spec, train_frames, val_frames, config, out_dir, log=log)
    print(f"finished at step {result.state.global_step}, checkpoint {result.final_path}")
    return 0


def _load_model_and_data(cfg: dict):
    _require(cfg, "checkpoint", "data")
    spec, frames = dataio.read_pceb(cfg["data"])
    ckpt = trainer.load_checkpoint(cfg["checkpoint"])
    model = trainer.model_from_checkpoint(ckpt)
    if model.head.dim != spec.dim:
        raise DataError(
            f"checkpoint embedding width {model.head.dim} does not match data {spec.dim}"
        )
    return spec, frames, model


def cmd_eval(cfg: dict) -> int:
    spec, frames, model = _load_model_and_data(cfg)
    report = trainer.evaluate_frames(
        frames, model, spec, crop=cfg.get("crop", "none"), tta=cfg.get("tta", True)
    )
    print(evalkit.format_report(report))
    return 0


def cmd_predict(cfg: dict) -> int:
    _require(cfg, "out_dir")
    spec, frames, model = _load_model_and_data(cfg)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    for frame in frames:
        grid = trainer.predict_frame(frame, model.head, model.table, tta=cfg.get("tta", True))
        px = evalkit.upsample_to_pixels(grid.depth, spec.img_h, spec.img_w)
        evalkit.write_pgm(out_dir / f"frame_{frame.frame_id:05d}.pgm", px, spec.d_min, spec.d_max)
    print(f"wrote {len(frames)} depth maps to {out_dir}")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    results = losses.gradient_suite(seed=cfg["seed"], instances=cfg["instances"])
    for name, err in results.items():
        print(f"loss {name} max_rel_err {err:.3e}")
    print(f"overall max_rel_err {max(results.values()):.3e}")
    return 0


def cmd_analyze(cfg: dict) -> int:
    _require(cfg, "out_dir")
    spec, frames, model = _load_model_and_data(cfg)
    cmask = evalkit.crop_mask(cfg.get("crop", "none"), spec.img_h, spec.img_w)
    gt_all, pred_all = [], []
    for frame in frames:
        if frame.pixel_depth is None:
            raise DataError(f"frame {frame.frame_id}: no ground-truth depth to analyze")
        grid = trainer.predict_frame(frame, model.head, model.table, tta=cfg.get("tta", True))
        px = evalkit.upsample_to_pixels(grid.depth, spec.img_h, spec.img_w)
        gt = frame.pixel_depth.astype(np.float64)
        sel = cmask & np.isfinite(gt) & (gt >= spec.d_min) & (gt <= spec.d_max)
        gt_all.append(gt[sel])
        pred_all.append(px[sel])
    edges = np.linspace(spec.range_min, spec.range_max, spec.k + 1)
    trim = [int(t) for t in cfg["trim"].split(",") if t.strip()] if cfg.get("trim") else []
    tables = evalkit.analysis_tables(
        np.concatenate(gt_all), np.concatenate(pred_all), edges, trim=trim
    )
    paths = evalkit.write_analysis_csv(tables, cfg["out_dir"])
    for p in paths:
        print(f"wrote {p}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="embdepth", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="flat key = value config file")
        return p

    p = add("synth", "generate a synthetic embedding dataset")
    p.add_argument("--out", dest="synth_out", default=None)
    p.add_argument("--seed", dest="synth_seed", type=int, default=None)
    p.add_argument("--frames", dest="synth_frames", type=int, default=None)
    p.add_argument("--noise", dest="synth_noise", type=float, default=None)
    p.add_argument("--dim", dest="synth_dim", type=int, default=None)
    p.add_argument("--grid-h", dest="synth_grid_h", type=int, default=None)
    p.add_argument("--grid-w", dest="synth_grid_w", type=int, default=None)
    p.add_argument("--bins", dest="synth_k", type=int, default=None)
    p.add_argument("--range-min", dest="synth_range_min", type=float, default=None)
    p.add_argument("--range-max", dest="synth_range_max", type=float, default=None)
    p.add_argument("--d-min", dest="synth_d_min", type=float, default=None)
    p.add_argument("--d-max", dest="synth_d_max", type=float, default=None)

    p = add("train", "train a model on PCEB datasets")
    p.add_argument("--train-data", dest="train_data", default=None)
    p.add_argument("--val-data", dest="val_data", default=None)
    p.add_argument("--table-init", dest="table_init", default=None)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.add_argument("--seed", dest="seed", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--period", dest="alternation_period", type=int, default=None)
    p.add_argument("--emb-lr", dest="emb_lr", type=float, default=None)
    p.add_argument("--emb-wd", dest="emb_wd", type=float, default=None)
    p.add_argument("--depth-lr", dest="depth_lr", type=float, default=None)
    p.add_argument("--depth-wd", dest="depth_wd", type=float, default=None)
    p.add_argument("--tau", dest="tau", type=float, default=None)
    p.add_argument("--lambda-infonce", dest="lambda_infonce", type=float, default=None)
    p.add_argument("--patience", dest="patience", type=int, default=None)
    p.add_argument("--decay-start", dest="decay_start", type=int, default=None)
    p.add_argument("--decay-floor", dest="decay_floor", type=float, default=None)
    p.add_argument("--hidden", dest="hidden", type=int, default=None)
    p.add_argument("--dropout", dest="dropout", type=float, default=None)
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--crop", dest="crop", choices=["none", "eigen", "garg"], default=None)
    p.add_argument("--tta", dest="tta", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--freeze-mlps", dest="freeze_mlps",
                   action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--no-cls", dest="use_cls", action="store_const", const=False, default=None)
    p.add_argument("--losses", dest="loss_set",
                   choices=["infonce", "infonce+align", "all"], default=None)

    p = add("eval", "print a metric report for a checkpoint on a dataset")
    p.add_argument("--checkpoint", dest="checkpoint", default=None)
    p.add_argument("--data", dest="data", default=None)
    p.add_argument("--crop", dest="crop", choices=["none", "eigen", "garg"], default=None)
    p.add_argument("--tta", dest="tta", action=argparse.BooleanOptionalAction, default=None)

    p = add("predict", "write 16-bit PGM depth maps for every frame")
    p.add_argument("--checkpoint", dest="checkpoint", default=None)
    p.add_argument("--data", dest="data", default=None)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.add_argument("--tta", dest="tta", action=argparse.BooleanOptionalAction, default=None)

    p = add("gradcheck", "finite-difference check of every loss gradient")
    p.add_argument("--seed", dest="seed", type=int, default=None)
    p.add_argument("--instances", dest="instances", type=int, default=None)

    p = add("analyze", "write joint/sigma/histogram CSV analysis tables")
    p.add_argument("--checkpoint", dest="checkpoint", default=None)
    p.add_argument("--data", dest="data", default=None)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.add_argument("--trim", dest="trim", default=None, help="1-based bins to drop, e.g. 1,14,15")
    p.add_argument("--crop", dest="crop", choices=["none", "eigen", "garg"], default=None)
    p.add_argument("--tta", dest="tta", action=argparse.BooleanOptionalAction, default=None)

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, DataError, ShapeError, TrainingError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
