"""Command-line front end.

Every command resolves its settings from three layers, later ones winning:
built-in defaults, a flat ``key = value`` config file, then flags. The
effective settings are written to ``resolved_config`` next to the outputs,
and feeding that file back through ``--config`` reproduces the run.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import analysis
from .data import BlobSpec, Dataset, generate_blobs, load_csv, load_idx, save_csv
from .distill import DistillConfig
from .errors import ConfigError, DimensionError, DivergenceError, FormatError, InputError
from .models import MlpSpec, load_checkpoint, spec_from_params, validate_params
from .trainer import TrainConfig, distill_student, evaluate, train_teacher, write_log

logger = logging.getLogger("eakd")

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 2, 3, 4


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


bench = analysis.BENCHMARK

# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], object], object]] = {
    "seed": (int, 0),
    "epochs": (int, bench.epochs),
    "batch_size": (int, 64),
    "learning_rate": (float, bench.student_learning_rate),
    "momentum": (float, 0.9),
    "weight_decay": (float, bench.student_weight_decay),
    "lr_decay_epochs": (_int_list, bench.lr_decay_epochs),
    "lr_decay_factor": (float, 0.1),
    "temperature": (float, 4.0),
    "entropy_temperature": (float, 3.0),
    "diagnostic_temperature": (float, 1.0),
    "weighting_mode": (str, "ea"),
    "loss_kind": (str, "kd"),
    "ce_weight": (float, 1.0),
    "kd_weight": (float, 1.0),
    "dkd_alpha": (float, 1.0),
    "dkd_beta": (float, 8.0),
    "normalize_weights": (_bool, False),
    "teacher_hidden": (_int_list, bench.teacher_hidden),
    "student_hidden": (_int_list, bench.student_hidden),
    "class_count": (int, bench.blobs.class_count),
    "dims": (int, bench.blobs.dims),
    "samples_per_class": (int, bench.blobs.samples_per_class),
    "cluster_spread": (float, bench.blobs.cluster_spread),
    "center_scale": (float, bench.blobs.center_scale),
    "data_seed": (int, bench.blobs.seed),
    "data": (str, ""),
    "teacher": (str, ""),
    "checkpoint": (str, ""),
    "out": (str, "runs"),
    "study": (str, "weighting"),
    "seeds": (int, 5),
    "threads": (int, 1),
}

COMMAND_DEFAULTS = {
    "train-teacher": {"learning_rate": bench.teacher_learning_rate, "weight_decay": bench.teacher_weight_decay},
}

FLAGS = {
    "--seed": "seed", "--epochs": "epochs", "--batch-size": "batch_size", "--lr": "learning_rate",
    "--temperature": "temperature", "--entropy-temperature": "entropy_temperature",
    "--weighting-mode": "weighting_mode", "--loss-kind": "loss_kind", "--dkd-alpha": "dkd_alpha",
    "--dkd-beta": "dkd_beta", "--kd-weight": "kd_weight", "--teacher": "teacher", "--data": "data",
    "--out": "out", "--threads": "threads",
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = _convert(key, value, f"{source}:{lineno}")
    return values


def _convert(key: str, value: str, where: str):
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown setting {key!r}")
    try:
        return SCHEMA[key][0](value)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None


def format_config(values: dict[str, object]) -> str:
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, tuple):
            text = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def resolve(command: str, args: argparse.Namespace) -> dict[str, object]:
    values = {k: default for k, (_, default) in SCHEMA.items()}
    values.update(COMMAND_DEFAULTS.get(command, {}))
    env_threads = os.environ.get("EAKD_THREADS")
    if env_threads:
        values["threads"] = _convert("threads", env_threads, "EAKD_THREADS")
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise FormatError(f"cannot read config: {exc.strerror}", None, args.config) from None
        values.update(parse_config_text(text, args.config))
    for key in list(SCHEMA):
        given = getattr(args, key, None)
        if given is not None:
            values[key] = _convert(key, str(given), f"--{key.replace('_', '-')}")
    for item in getattr(args, "spec", None) or []:
        for pair in item.split(","):
            if "=" not in pair:
                raise ConfigError(f"--spec expects key=value pairs, got {pair!r}")
            key, value = (p.strip() for p in pair.split("=", 1))
            values[key] = _convert(key, value, "--spec")
    return values


def distill_config(v) -> DistillConfig:
    return DistillConfig(
        class_count=v["class_count"], distill_temperature=v["temperature"],
        entropy_temperature=v["entropy_temperature"], ce_weight=v["ce_weight"], kd_weight=v["kd_weight"],
        dkd_alpha=v["dkd_alpha"], dkd_beta=v["dkd_beta"], weighting_mode=v["weighting_mode"],
        normalize_weights=v["normalize_weights"])


def train_config(v) -> TrainConfig:
    return TrainConfig(
        distill_config(v), epochs=v["epochs"], batch_size=v["batch_size"], learning_rate=v["learning_rate"],
        momentum=v["momentum"], weight_decay=v["weight_decay"], lr_decay_epochs=v["lr_decay_epochs"],
        lr_decay_factor=v["lr_decay_factor"], seed=v["seed"], loss_kind=v["loss_kind"],
        diagnostic_temperature=v["diagnostic_temperature"])


def blob_spec(v) -> BlobSpec:
    return BlobSpec(class_count=v["class_count"], dims=v["dims"], samples_per_class=v["samples_per_class"],
                    cluster_spread=v["cluster_spread"], center_scale=v["center_scale"], seed=v["data_seed"])


def load_data(v) -> tuple[Dataset, Dataset]:
    """Read ``train``/``val`` CSV or IDX files from ``data``; without one, generate blobs."""
    if not v["data"]:
        return generate_blobs(blob_spec(v))
    root = Path(v["data"])
    c = v["class_count"]
    if (root / "train.csv").exists() or not root.exists():
        return (load_csv(root / "train.csv", c, "train"), load_csv(root / "val.csv", c, "val"))
    return (load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte", c, "train"),
            load_idx(root / "val-images-idx3-ubyte", root / "val-labels-idx1-ubyte", c, "val"))


def make_run_dir(v) -> Path:
    root = Path(v["out"])
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-seed{v['seed']}"
    path, k = base, 1
    while path.exists():
        path = Path(f"{base}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def write_resolved(v, directory: Path) -> None:
    (directory / "resolved_config").write_text(format_config(v), encoding="utf-8")


def load_teacher(v):
    if not v["teacher"]:
        raise ConfigError("a teacher checkpoint is required (--teacher PATH)")
    return load_checkpoint(v["teacher"])


def cmd_gen_data(v) -> Path:
    spec = blob_spec(v)
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    train, val = generate_blobs(spec)
    save_csv(train, out / "train.csv")
    save_csv(val, out / "val.csv")
    manifest = {"seed": spec.seed, "class_count": spec.class_count, "dims": spec.dims,
                "samples_per_class": spec.samples_per_class, "cluster_spread": spec.cluster_spread,
                "center_scale": spec.center_scale, "train_samples": len(train), "val_samples": len(val)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_resolved(v, out)
    print(f"wrote {len(train)} train / {len(val)} val samples to {out} (seed {spec.seed})")
    return out


def cmd_train_teacher(v) -> Path:
    cfg = train_config(v)
    train, val = load_data(v)
    spec = MlpSpec(train.dims, v["teacher_hidden"], train.class_count)
    run = make_run_dir(v)
    write_resolved(v, run)
    _, log = train_teacher(spec, train, val, cfg, checkpoint=run / "teacher.ck")
    write_log(log, run / "log.csv")
    print(f"teacher val accuracy {log[-1].acc_student:.4f}; outputs in {run}")
    return run


def cmd_distill(v) -> Path:
    cfg = train_config(v)
    teacher = load_teacher(v)
    train, val = load_data(v)
    validate_params(teacher, MlpSpec(train.dims, spec_from_params(teacher).hidden_dims, train.class_count))
    spec = MlpSpec(train.dims, v["student_hidden"], train.class_count)
    run = make_run_dir(v)
    write_resolved(v, run)
    _, log = distill_student(teacher, spec, train, val, cfg, checkpoint=run / "student.ck")
    write_log(log, run / "log.csv")
    analysis.write_quartile_report(analysis.quartile_report(log), run / "quartiles.csv")
    print(f"student val accuracy {log[-1].acc_student:.4f} ({cfg.loss_kind}, {cfg.distill.weighting_mode}); "
          f"outputs in {run}")
    return run


def cmd_eval(v) -> Path:
    if not v["checkpoint"]:
        raise ConfigError("eval needs --checkpoint PATH")
    params = load_checkpoint(v["checkpoint"])
    _, val = load_data(v)
    validate_params(params, MlpSpec(val.dims, spec_from_params(params).hidden_dims, val.class_count))
    ev = evaluate(params, val, v["diagnostic_temperature"])
    run = make_run_dir(v)
    write_resolved(v, run)
    with open(run / "eval.csv", "w", encoding="utf-8", newline="") as f:
        f.write("index,label,prediction,correct,entropy\n")
        for i, (label, logit, ok, h) in enumerate(zip(val.labels, ev.logits, ev.correct, ev.entropy)):
            f.write(f"{i},{label},{int(np.argmax(logit))},{int(ok)},{float(h)!r}\n")
    (run / "summary.csv").write_text(f"accuracy,n\n{ev.accuracy!r},{len(val)}\n", encoding="utf-8")
    print(f"accuracy {ev.accuracy:.4f} on {len(val)} samples; outputs in {run}")
    return run


def cmd_ablate(v) -> Path:
    study = v["study"]
    if study not in ("weighting", "tprime", "beta"):
        raise ConfigError(f"--study must be weighting, tprime or beta, got {study!r}")
    if v["seeds"] < 1:
        raise ConfigError("--seeds must be >= 1")
    teacher = load_teacher(v)
    train, val = load_data(v)
    spec = MlpSpec(train.dims, v["student_hidden"], train.class_count)
    base = train_config(v)
    seeds = [v["seed"] + k for k in range(v["seeds"])]
    run = make_run_dir(v)
    write_resolved(v, run)
    threads = v["threads"]
    if study == "weighting":
        res = analysis.run_weighting_study(base, seeds, teacher, spec, train, val, threads=threads, out_dir=run)
        summary = ", ".join(f"{m}={a:.4f}" for m, a in res.means().items())
    elif study == "tprime":
        res = analysis.run_tprime_ablation(base, seeds, teacher, spec, train, val, threads=threads, out_dir=run)
        summary = f"best T'={res.best_value()}"
    else:
        sweep = analysis.run_beta_sweep(base.replace(loss_kind="dkd"), seeds, teacher, spec, train, val,
                                        threads=threads, out_dir=run)
        summary = f"var_beta DKD={sweep.variance_dkd:.3g}, EA-DKD={sweep.variance_ea_dkd:.3g}"
    print(f"{study} study: {summary}; outputs in {run}")
    return run


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value settings file")
    for flag, key in FLAGS.items():
        common.add_argument(flag, dest=key, default=None, metavar=key.upper())
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="eakd", description="Entropy-weighted knowledge distillation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen-data", parents=[common], help="write a synthetic blob dataset")
    gen.add_argument("--spec", action="append", metavar="KEY=VALUE[,...]",
                     help="blob settings, e.g. class_count=20,cluster_spread=1.0")
    sub.add_parser("train-teacher", parents=[common], help="cross-entropy training of the teacher")
    sub.add_parser("distill", parents=[common], help="distill a student from a teacher checkpoint")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the validation split")
    ev.add_argument("--checkpoint", dest="checkpoint", default=None)
    ab = sub.add_parser("ablate", parents=[common], help="run a weighting, T' or beta grid")
    ab.add_argument("--study", dest="study", choices=["weighting", "tprime", "beta"], default=None)
    ab.add_argument("--seeds", dest="seeds", default=None, metavar="N", help="number of seeds per cell")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = resolve(args.command, args)
        COMMANDS[args.command](values)
    except (ConfigError, DimensionError) as exc:
        print(f"eakd: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, InputError, OSError) as exc:
        print(f"eakd: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"eakd: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
