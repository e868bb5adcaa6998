"""Command-line entry point.

Every option lives in one flat run configuration. Values come from three
layers: built-in defaults, then an optional ``--config`` JSON file, then
flags given on the command line. The resolved configuration is written to
``run_config.json`` in the output directory, and feeding that file back
through ``--config`` replays the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .data import AugmentConfig, DatasetDir, make_dataset, mag_key, scaled_size
from .distill import (DTYPES, DistillConfig, ImageSource, TrainConfig, distill_student, fine_tune, predict,
                      run_ablation, train_teacher, write_ablation)
from .evaluation import emit_report, make_report
from .model import ModelConfig, build_model, count_flops, load_checkpoint
from .optim import AdamConfig
from .resize import ResizeMode

log = logging.getLogger("resdistill")

DEFAULTS: Dict[str, object] = {
    "seed": 0,
    "output_dir": "runs",
    "precision": "f32",
    "jobs": 1,
    "quiet": False,
    # dataset
    "data_dir": "data",
    "patients": 60,
    "aux_v1_patients": 60,
    "aux_v2_patients": 200,
    "dev_patients": 150,
    "base_size": 256,
    "mags": [1.0, 0.5, 0.25, 0.125],
    # model
    "stage_widths": [16, 32, 64, 128],
    "blocks_per_stage": 1,
    "num_groups": 8,
    "num_classes": 3,
    # optimisation
    "epochs": 60,
    "learning_rate": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "epsilon": 1e-8,
    "accumulation_size": 8,
    "micro_batch_size": 8,
    "augment": True,
    "brightness": 0.1,
    "contrast": 0.1,
    "saturation": 0.1,
    "hue": 0.05,
    "flip_prob": 0.5,
    "rotations": [0, 90, 180, 270],
    # distillation
    "temperature": 4.0,
    "resize_mode": "MP_AND_INT",
    "soft_weight": 1.0,
    "pixel_weight": 1.0,
    "teacher_mag": 1.0,
    "student_mag": 0.125,
    "warm_start": False,
    "unlabeled_split": "aux_v1",
    "dev_split": "development",
    # inputs and per-command settings
    "mag": None,
    "teacher": None,
    "student": None,
    "checkpoint": None,
    "patience": 10,
    "max_epochs": 200,
    "split": "test",
    "model_tag": None,
    "bootstrap_iterations": 10000,
    "ablate_mags": [0.125, 0.25, 0.5],
    "ablate_modes": ["NONE", "MP", "INT", "MP_AND_INT"],
    "ablate_seeds": [0, 1, 2],
    "run_dir": None,
}

COMMANDS = ("gen-data", "train-teacher", "distill", "finetune", "eval", "ablate", "flops", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v]


def _ints(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v]


def _strs(text: str) -> List[str]:
    return [v for v in text.split(",") if v]


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _add(p, name, **kw):
    p.add_argument("--" + name.replace("_", "-"), dest=name, default=argparse.SUPPRESS, **kw)


def _common(p):
    _add(p, "config", metavar="PATH", help="JSON run configuration; flags override its values")
    _add(p, "seed", type=int)
    _add(p, "output_dir", metavar="DIR")
    _add(p, "precision", choices=sorted(DTYPES))
    _add(p, "jobs", type=int)
    _add(p, "quiet", action="store_const", const=True)


def _data_opts(p):
    _add(p, "data_dir", metavar="DIR")


def _model_opts(p):
    _add(p, "stage_widths", type=_ints, metavar="W,W,...")
    _add(p, "blocks_per_stage", type=int)
    _add(p, "num_groups", type=int)
    _add(p, "num_classes", type=int)


def _train_opts(p):
    for name in ("epochs", "accumulation_size", "micro_batch_size"):
        _add(p, name, type=int)
    for name in ("learning_rate", "beta1", "beta2", "epsilon", "brightness", "contrast", "saturation", "hue",
                 "flip_prob"):
        _add(p, name, type=float)
    _add(p, "rotations", type=_ints, metavar="DEG,DEG,...")
    _add(p, "augment", type=_bool, metavar="BOOL")


def _distill_opts(p):
    for name in ("temperature", "soft_weight", "pixel_weight", "teacher_mag", "student_mag"):
        _add(p, name, type=float)
    _add(p, "resize_mode", choices=[m.value for m in ResizeMode])
    _add(p, "warm_start", type=_bool, metavar="BOOL")
    _add(p, "unlabeled_split")
    _add(p, "dev_split")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="resdistill", description="Resolution-based knowledge distillation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate the synthetic dataset into --output-dir")
    _common(p)
    for name in ("patients", "aux_v1_patients", "aux_v2_patients", "dev_patients", "base_size"):
        _add(p, name, type=int)
    _add(p, "mags", type=_floats, metavar="M,M,...")

    p = sub.add_parser("train-teacher", help="supervised training at --mag (default: teacher magnification)")
    _common(p), _data_opts(p), _model_opts(p), _train_opts(p)
    _add(p, "mag", type=float)
    _add(p, "teacher_mag", type=float)

    p = sub.add_parser("distill", help="distill a frozen teacher into a low-resolution student")
    _common(p), _data_opts(p), _train_opts(p), _distill_opts(p)
    _add(p, "teacher", metavar="CKPT")

    p = sub.add_parser("finetune", help="train only the classification head of a student")
    _common(p), _data_opts(p), _train_opts(p)
    _add(p, "student", metavar="CKPT")
    _add(p, "mag", type=float)
    _add(p, "student_mag", type=float)
    _add(p, "patience", type=int)
    _add(p, "max_epochs", type=int)

    p = sub.add_parser("eval", help="metrics with bootstrap intervals on one split")
    _common(p), _data_opts(p)
    _add(p, "checkpoint", metavar="CKPT")
    _add(p, "mag", type=float)
    _add(p, "student_mag", type=float)
    _add(p, "split")
    _add(p, "model_tag")
    _add(p, "bootstrap_iterations", type=int)

    p = sub.add_parser("ablate", help="distil over resize modes x magnifications x seeds")
    _common(p), _data_opts(p), _train_opts(p), _distill_opts(p)
    _add(p, "teacher", metavar="CKPT")
    _add(p, "ablate_mags", type=_floats, metavar="M,M,...")
    _add(p, "ablate_modes", type=_strs, metavar="MODE,...")
    _add(p, "ablate_seeds", type=_ints, metavar="S,S,...")

    p = sub.add_parser("flops", help="forward-pass FLOPs at --mag and the reduction against full size")
    _common(p), _model_opts(p)
    _add(p, "mag", type=float)
    _add(p, "student_mag", type=float)
    _add(p, "base_size", type=int)

    p = sub.add_parser("report", help="collect metrics.json and ablation rows into the report bundle")
    _common(p)
    _add(p, "run_dir", metavar="DIR")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    cfg = dict(DEFAULTS)
    flags = vars(args).copy()
    flags.pop("command", None)
    path = flags.pop("config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}")
        if not isinstance(loaded, dict):
            raise UsageError(f"{path}: expected a JSON object")
        loaded.pop("command", None)
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"{path}: unknown keys: {', '.join(unknown)}")
        cfg.update(loaded)
    cfg.update(flags)
    return cfg


# ---------------------------------------------------------------------------
# config -> library objects
# ---------------------------------------------------------------------------


def model_config(c: dict) -> ModelConfig:
    return ModelConfig(stage_widths=tuple(c["stage_widths"]), blocks_per_stage=c["blocks_per_stage"],
                       num_classes=c["num_classes"], num_groups=c["num_groups"])


def augment_config(c: dict) -> AugmentConfig:
    return AugmentConfig(c["brightness"], c["contrast"], c["saturation"], c["hue"], c["flip_prob"],
                         tuple(c["rotations"]))


def adam_config(c: dict) -> AdamConfig:
    return AdamConfig(c["learning_rate"], c["beta1"], c["beta2"], c["epsilon"])


def train_config(c: dict, mag: float) -> TrainConfig:
    return TrainConfig(mag=mag, epochs=c["epochs"], adam=adam_config(c), accumulation_size=c["accumulation_size"],
                       micro_batch_size=c["micro_batch_size"], augment=c["augment"],
                       augment_config=augment_config(c), precision=c["precision"], seed=c["seed"])


def distill_config(c: dict) -> DistillConfig:
    return DistillConfig(temperature=c["temperature"], resize_mode=c["resize_mode"], soft_weight=c["soft_weight"],
                         pixel_weight=c["pixel_weight"], teacher_mag=c["teacher_mag"], student_mag=c["student_mag"],
                         adam=adam_config(c), epochs=c["epochs"], accumulation_size=c["accumulation_size"],
                         micro_batch_size=c["micro_batch_size"], augment=c["augment"],
                         augment_config=augment_config(c), warm_start=c["warm_start"], precision=c["precision"],
                         seed=c["seed"])


def _require(c: dict, key: str) -> str:
    if not c.get(key):
        raise UsageError(f"--{key.replace('_', '-')} is required")
    return c[key]


def _output_dir(c: dict) -> Path:
    out = Path(c["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_config(c: dict, command: str, out: Path) -> Path:
    path = out / "run_config.json"
    path.write_text(json.dumps({"command": command, **c}, indent=2, sort_keys=True) + "\n")
    return path


def _step_log(c: dict):
    return None if c["quiet"] else log.info


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(c: dict) -> int:
    out = Path(c["output_dir"])
    ds = make_dataset(out, c["patients"], seed=c["seed"], base_size=c["base_size"], mags=c["mags"],
                      aux_v1_patients=c["aux_v1_patients"], aux_v2_patients=c["aux_v2_patients"],
                      dev_patients=c["dev_patients"])
    write_run_config(c, "gen-data", out)
    sizes = {name: len(ds.split(name)) for name in ("train", "validation", "test", "aux_v1", "aux_v2",
                                                     "development")}
    log.info("wrote %d records to %s %s", len(ds.records), out, sizes)
    return 0


def cmd_train_teacher(c: dict) -> int:
    out = _output_dir(c)
    ds = DatasetDir(c["data_dir"])
    mag = c["mag"] if c["mag"] is not None else c["teacher_mag"]
    res = train_teacher(ds, model_config(c), train_config(c, mag), log=_step_log(c))
    res.save(out)
    write_run_config(c, "train-teacher", out)
    log.info("best epoch %d, checkpoint %s", res.best_epoch, res.checkpoint)
    return 0


def cmd_distill(c: dict) -> int:
    teacher_path = _require(c, "teacher")
    out = _output_dir(c)
    ds = DatasetDir(c["data_dir"])
    teacher, _ = load_checkpoint(teacher_path)
    unlabeled = [r.unlabeled() for r in ds.split(c["unlabeled_split"])]
    res = distill_student(teacher, ds, unlabeled, distill_config(c), ds.split(c["dev_split"]), log=_step_log(c))
    res.save(out)
    write_run_config(c, "distill", out)
    log.info("best epoch %d, checkpoint %s", res.best_epoch, res.checkpoint)
    return 0


def cmd_finetune(c: dict) -> int:
    student_path = _require(c, "student")
    out = _output_dir(c)
    ds = DatasetDir(c["data_dir"])
    student, _ = load_checkpoint(student_path)
    mag = c["mag"] if c["mag"] is not None else c["student_mag"]
    res = fine_tune(student.astype(DTYPES[c["precision"]]), ds, ds.split("train"), ds.split("validation"),
                    train_config(c, mag), patience=c["patience"], max_epochs=c["max_epochs"], log=_step_log(c))
    res.save(out)
    write_run_config(c, "finetune", out)
    log.info("best epoch %d, checkpoint %s", res.best_epoch, res.checkpoint)
    return 0


def cmd_eval(c: dict) -> int:
    ckpt = _require(c, "checkpoint")
    out = _output_dir(c)
    ds = DatasetDir(c["data_dir"])
    model, _ = load_checkpoint(ckpt)
    mag = c["mag"] if c["mag"] is not None else c["student_mag"]
    records = ds.split(c["split"])
    if not records:
        raise ValueError(f"split {c['split']!r} is empty")
    src = ImageSource.from_dataset(ds, records, mag, model.dtype)
    preds, _ = predict(model, src, [r.id for r in records])
    labels = np.array([r.class_label for r in records])
    h, w = ds.image(records[0], mag).shape[-2:]
    tag = c["model_tag"] or Path(ckpt).parent.name or "model"
    report = make_report(tag, mag_key(mag), preds, labels, model.config.num_classes,
                         count_flops(model, h, w) / 1e9, iterations=c["bootstrap_iterations"], seed=c["seed"],
                         checkpoint=str(ckpt))
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    write_run_config(c, "eval", out)
    lo, hi = report.ci["accuracy"]
    log.info("%s @%s: accuracy %.2f [%.2f, %.2f], macro F1 %.2f", tag, mag_key(mag), report.accuracy, lo, hi,
             report.f1)
    return 0


def cmd_ablate(c: dict) -> int:
    teacher_path = _require(c, "teacher")
    out = _output_dir(c)
    ds = DatasetDir(c["data_dir"])
    teacher, _ = load_checkpoint(teacher_path)
    rows = run_ablation(ds, teacher, c["ablate_mags"], [ResizeMode.parse(m) for m in c["ablate_modes"]],
                        c["ablate_seeds"], distill_config(c), c["unlabeled_split"], c["dev_split"],
                        jobs=c["jobs"], teacher_path=teacher_path)
    write_ablation(rows, out / "ablation_rows.csv")
    write_run_config(c, "ablate", out)
    for r in rows:
        log.info("%-10s mag %-6s seed %d dev accuracy %.2f", r["mode"], r["magnification"], r["seed"],
                 r["dev_accuracy"])
    return 0


def cmd_flops(c: dict) -> int:
    mag = c["mag"] if c["mag"] is not None else c["student_mag"]
    model = build_model(model_config(c), 0)
    full = count_flops(model, c["base_size"], c["base_size"])
    side = scaled_size(c["base_size"], mag)
    flops = count_flops(model, side, side)
    print(f"magnification {mag_key(mag)} input {side}x{side}: {flops} FLOPs ({flops / 1e9:.6f} GFLOPs)")
    print(f"full size {c['base_size']}x{c['base_size']}: {full} FLOPs; reduction factor {full / flops:.2f}")
    return 0


def cmd_report(c: dict) -> int:
    run_dir = Path(c["run_dir"] or c["output_dir"])
    paths = emit_report(run_dir)
    for name, path in paths.items():
        log.info("wrote %s", path)
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "flops": cmd_flops,
    "report": cmd_report,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns 0 on success, 1 on usage error, 2 on runtime failure."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip("\n") + "\n")
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if cfg["quiet"] else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    try:
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        sys.stderr.write(f"resdistill {args.command}: error: {exc}\n")
        return 1
    except Exception as exc:
        sys.stderr.write(f"resdistill {args.command}: {type(exc).__name__}: {exc}\n")
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
