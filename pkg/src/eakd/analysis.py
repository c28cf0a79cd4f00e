"""Experiment grids over one hyperparameter axis, and CSV reports.

A grid runs one distillation per (axis value, seed) cell against a shared
frozen teacher and dataset. Cells are independent, so they may run on a
thread pool; results are always collected and written in grid order.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import BlobSpec, Dataset
from .distill import WEIGHTING_MODES
from .errors import ConfigError, FormatError
from .models import MlpSpec, ModelParams
from .trainer import TrainConfig, TrainRecord, distill_student, read_log, write_log

logger = logging.getLogger(__name__)

AXES = ("weighting_mode", "entropy_temperature", "dkd_beta")
TPRIME_VALUES = (1.0, 2.0, 3.0, 4.0)
BETA_VALUES = tuple(float(b) for b in range(1, 11))


@dataclass(frozen=True)
class Benchmark:
    """The desk-scale blob benchmark used by the acceptance runs and CLI defaults."""

    blobs: BlobSpec = BlobSpec(class_count=20, dims=16, samples_per_class=250, cluster_spread=1.0,
                               center_scale=1.0, seed=0)
    teacher_hidden: tuple[int, ...] = (256, 256)
    student_hidden: tuple[int, ...] = (32,)
    teacher_learning_rate: float = 0.01
    teacher_weight_decay: float = 5e-3
    student_learning_rate: float = 0.05
    student_weight_decay: float = 5e-4
    epochs: int = 30
    lr_decay_epochs: tuple[int, ...] = (20, 25)

    def teacher_spec(self) -> MlpSpec:
        return MlpSpec(self.blobs.dims, self.teacher_hidden, self.blobs.class_count)

    def student_spec(self) -> MlpSpec:
        return MlpSpec(self.blobs.dims, self.student_hidden, self.blobs.class_count)


BENCHMARK = Benchmark()


def _axis_str(value) -> str:
    return value if isinstance(value, str) else repr(float(value))


@dataclass(frozen=True)
class ExperimentGrid:
    base: TrainConfig
    axis: str
    values: tuple
    seeds: tuple[int, ...]

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown grid axis {self.axis!r}; expected one of {AXES}")
        if not self.values or not self.seeds:
            raise ConfigError("a grid needs at least one axis value and one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("grid seeds must be distinct")
        if self.axis == "weighting_mode" and any(v not in WEIGHTING_MODES for v in self.values):
            raise ConfigError(f"unknown weighting mode in {self.values}")
        if len(self.seeds) < 5:
            logger.warning("grid over %s uses %d seeds; five or more are recommended", self.axis, len(self.seeds))

    def cells(self) -> list[tuple[object, int]]:
        return [(v, s) for v in self.values for s in self.seeds]

    def config_for(self, value, seed: int) -> TrainConfig:
        return self.base.replace(**{self.axis: value, "seed": seed})


@dataclass
class GridResult:
    axis: str
    values: tuple
    seeds: tuple[int, ...]
    accuracy: dict[tuple[object, int], float]
    logs: dict[tuple[object, int], list[TrainRecord]] = field(default_factory=dict, repr=False)

    def cell_rows(self) -> list[tuple[object, int, float]]:
        return [(v, s, self.accuracy[(v, s)]) for v in self.values for s in self.seeds]

    def stats(self, value) -> tuple[float, float, int]:
        """Mean, population standard deviation and count of one axis value's cells."""
        accs = np.array([self.accuracy[(value, s)] for s in self.seeds])
        return float(accs.mean()), float(accs.std()), len(accs)

    def aggregate(self) -> list[tuple[object, float, float, int]]:
        return [(v, *self.stats(v)) for v in self.values]

    def means(self) -> dict[object, float]:
        return {v: self.stats(v)[0] for v in self.values}

    def across_axis_variance(self) -> float:
        """Population variance of the per-value mean accuracies."""
        return float(np.var(list(self.means().values())))

    def best_value(self):
        means = self.means()
        return max(self.values, key=lambda v: means[v])

    def write(self, out_dir, prefix: str = "grid") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cells, agg = out / f"{prefix}_cells.csv", out / f"{prefix}_aggregate.csv"
        with open(cells, "w", encoding="utf-8", newline="") as f:
            f.write("axis_value,seed,final_val_acc\n")
            for v, s, a in self.cell_rows():
                f.write(f"{_axis_str(v)},{s},{a!r}\n")
        with open(agg, "w", encoding="utf-8", newline="") as f:
            f.write("axis_value,mean,std,n\n")
            for v, m, sd, n in self.aggregate():
                f.write(f"{_axis_str(v)},{m!r},{sd!r},{n}\n")
        return cells, agg


def read_grid_cells(path) -> list[tuple[str, int, float]]:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["axis_value", "seed", "final_val_acc"]:
        raise FormatError("grid cell CSV header mismatch", 1, os.fspath(path))
    try:
        return [(r[0], int(r[1]), float(r[2])) for r in rows[1:] if r]
    except (ValueError, IndexError) as exc:
        raise FormatError(f"malformed grid row: {exc}", None, os.fspath(path)) from None


def run_grid(grid: ExperimentGrid, teacher: ModelParams | None, student_spec: MlpSpec, train: Dataset,
             val: Dataset, threads: int = 1, out_dir=None) -> GridResult:
    """Run every cell; with ``out_dir`` each cell's log goes to ``cells/<value>_seed<seed>.csv``."""
    if teacher is None:
        raise ConfigError("grid runs need a trained teacher checkpoint")
    cell_dir = None
    if out_dir is not None:
        cell_dir = Path(out_dir) / "cells"
        cell_dir.mkdir(parents=True, exist_ok=True)

    def run(cell):
        value, seed = cell
        _, log = distill_student(teacher, student_spec, train, val, grid.config_for(value, seed))
        if cell_dir is not None:
            write_log(log, cell_dir / f"{grid.axis}={_axis_str(value)}_seed{seed}.csv")
        return log

    cells = grid.cells()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            logs = list(pool.map(run, cells))
    else:
        logs = [run(c) for c in cells]
    result = GridResult(grid.axis, tuple(grid.values), tuple(grid.seeds),
                        {c: log[-1].acc_student for c, log in zip(cells, logs)}, dict(zip(cells, logs)))
    if out_dir is not None:
        result.write(out_dir, grid.axis)
    return result


def run_weighting_study(base: TrainConfig, seeds: Sequence[int], teacher, student_spec, train, val,
                        modes: Sequence[str] = WEIGHTING_MODES, threads: int = 1, out_dir=None) -> GridResult:
    grid = ExperimentGrid(base, "weighting_mode", tuple(modes), tuple(seeds))
    return run_grid(grid, teacher, student_spec, train, val, threads, out_dir)


def run_tprime_ablation(base: TrainConfig, seeds: Sequence[int], teacher, student_spec, train, val,
                        values: Sequence[float] = TPRIME_VALUES, threads: int = 1, out_dir=None) -> GridResult:
    """EA weighting at every entropy temperature in ``values``; nothing else varies."""
    grid = ExperimentGrid(base.replace(weighting_mode="ea"), "entropy_temperature", tuple(values), tuple(seeds))
    result = run_grid(grid, teacher, student_spec, train, val, threads, out_dir)
    if out_dir is not None:
        with open(Path(out_dir) / "best_entropy_temperature.txt", "w", encoding="utf-8") as f:
            f.write(f"{_axis_str(result.best_value())}\n")
    return result


@dataclass
class BetaSweepResult:
    dkd: GridResult
    ea_dkd: GridResult

    @property
    def variance_dkd(self) -> float:
        return self.dkd.across_axis_variance()

    @property
    def variance_ea_dkd(self) -> float:
        return self.ea_dkd.across_axis_variance()


def run_beta_sweep(base: TrainConfig, seeds: Sequence[int], teacher, student_spec, train, val,
                   values: Sequence[float] = BETA_VALUES, threads: int = 1, out_dir=None) -> BetaSweepResult:
    """DKD and EA-DKD over the same β values, seeds and data (a paired design)."""
    if base.loss_kind != "dkd":
        raise ConfigError("the β sweep needs loss_kind=dkd")
    results = []
    for mode in ("none", "ea"):
        grid = ExperimentGrid(base.replace(weighting_mode=mode), "dkd_beta", tuple(values), tuple(seeds))
        sub = None if out_dir is None else Path(out_dir) / ("dkd" if mode == "none" else "ea_dkd")
        results.append(run_grid(grid, teacher, student_spec, train, val, threads, sub))
    sweep = BetaSweepResult(*results)
    if out_dir is not None:
        with open(Path(out_dir) / "beta_variance.csv", "w", encoding="utf-8", newline="") as f:
            f.write("method,variance_over_beta\n")
            f.write(f"dkd,{sweep.variance_dkd!r}\nea_dkd,{sweep.variance_ea_dkd!r}\n")
    return sweep


def quartile_report(student_log) -> list[tuple[int, int, float]]:
    """Reshape a training log into ``(epoch, quartile, share)`` rows, quartiles 1..4.

    ``student_log`` is a list of records or a path to a log CSV.
    """
    records = student_log if isinstance(student_log, list) else read_log(student_log)
    rows = []
    for r in records:
        shares = r.quartile_shares
        if any(not math.isfinite(s) for s in shares) or abs(sum(shares) - 1.0) > 1e-9:
            raise FormatError(f"quartile shares of epoch {r.epoch} do not sum to 1", r.epoch)
        rows.extend((r.epoch, q + 1, float(s)) for q, s in enumerate(shares))
    return rows


def write_quartile_report(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("epoch,quartile,share\n")
        for epoch, q, share in rows:
            f.write(f"{epoch},{q},{share!r}\n")
