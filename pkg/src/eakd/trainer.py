"""Teacher pretraining, student distillation and per-epoch diagnostics."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import distill as dl
from .data import Dataset, batches
from .distill import DistillConfig
from .errors import ConfigError, ContractError, DivergenceError, FormatError
from .models import MlpSpec, ModelParams, clone_params, forward, init_params, save_checkpoint, validate_params
from .tensor import Graph, Tensor, backward

logger = logging.getLogger(__name__)

LOG_HEADER = (
    "epoch,loss_total,loss_ce,loss_kd,acc_student,acc_teacher,"
    "q1_share,q2_share,q3_share,q4_share,seg1_gap,seg2_gap,seg3_gap,seg4_gap,"
    "w_min,w_mean,w_max,hs_min,hs_q1,hs_med,hs_q3,hs_max"
).split(",")


@dataclass(frozen=True)
class TrainConfig:
    distill: DistillConfig
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    seed: int = 0
    loss_kind: str = "kd"
    diagnostic_temperature: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.weight_decay >= 0:
            raise ConfigError("weight_decay must be >= 0")
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ConfigError(f"lr_decay_epochs must be strictly increasing: {self.lr_decay_epochs}")
        if self.loss_kind not in dl.LOSS_KINDS:
            raise ConfigError(f"unknown loss_kind {self.loss_kind!r}")
        if not self.diagnostic_temperature > 0:
            raise ConfigError("diagnostic_temperature must be > 0")

    def replace(self, **changes) -> "TrainConfig":
        distill_changes = {k: changes.pop(k) for k in list(changes) if k in DISTILL_FIELDS}
        cfg = dataclasses.replace(self, **changes)
        if distill_changes:
            cfg = dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, **distill_changes))
        return cfg

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch`` under step decay."""
        steps = sum(1 for e in self.lr_decay_epochs if epoch > e)
        return self.learning_rate * self.lr_decay_factor**steps


DISTILL_FIELDS = {f.name for f in dataclasses.fields(DistillConfig)}


@dataclass
class TrainRecord:
    epoch: int
    loss_total: float
    loss_ce: float
    loss_kd: float
    acc_student: float
    acc_teacher: float
    quartile_shares: tuple[float, float, float, float]
    segment_gaps: tuple[float, float, float, float]
    weight_stats: tuple[float, float, float]
    hs_stats: tuple[float, float, float, float, float]

    def to_row(self) -> list[float]:
        return [self.epoch, self.loss_total, self.loss_ce, self.loss_kd, self.acc_student, self.acc_teacher,
                *self.quartile_shares, *self.segment_gaps, *self.weight_stats, *self.hs_stats]

    @classmethod
    def from_row(cls, row: Sequence[float]) -> "TrainRecord":
        v = list(row)
        return cls(int(v[0]), v[1], v[2], v[3], v[4], v[5], tuple(v[6:10]), tuple(v[10:14]),
                   tuple(v[14:17]), tuple(v[17:22]))


_NAN4 = (math.nan,) * 4


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def write_log(records: Sequence[TrainRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(",".join(LOG_HEADER) + "\n")
        for r in records:
            f.write(",".join(_fmt(v) for v in r.to_row()) + "\n")


def read_log(path) -> list[TrainRecord]:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != LOG_HEADER:
        raise FormatError("train log header does not match the expected columns", 1, os.fspath(path))
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(LOG_HEADER):
            raise FormatError(f"expected {len(LOG_HEADER)} fields, got {len(row)}", lineno, os.fspath(path))
        try:
            out.append(TrainRecord.from_row([int(row[0])] + [float(x) for x in row[1:]]))
        except ValueError as exc:
            raise FormatError(f"unparseable value: {exc}", lineno, os.fspath(path)) from None
    return out


@dataclass
class SgdState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: ModelParams, state: SgdState, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """Heavy-ball SGD with L2 decay folded into the velocity, in place."""
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"no gradient for parameter {name!r}")
    for name, p in params.items():
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        v = state.velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        state.velocity[name] = v
        p.data = p.data - lr * v


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1, np.uint64)[0])


@dataclass
class EvalResult:
    accuracy: float
    entropy: np.ndarray
    correct: np.ndarray
    logits: np.ndarray


def evaluate(params: ModelParams, ds: Dataset, temperature: float = 1.0) -> EvalResult:
    """Top-1 accuracy (ties go to the lowest class index) and per-sample entropy."""
    logits = forward(params, ds.features).data
    pred = np.argmax(logits, axis=1)
    correct = pred == ds.labels
    return EvalResult(float(np.mean(correct)), dl.entropy(logits, temperature), correct, logits)


def _check_finite(value: float, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite training loss {value}", epoch, step)


def train_teacher(spec: MlpSpec, train: Dataset, val: Dataset, config: TrainConfig,
                  checkpoint=None) -> tuple[ModelParams, list[TrainRecord]]:
    """Cross-entropy training from Glorot init seeded by ``config.seed``.

    Distillation-only columns of the log are NaN.
    """
    if spec.class_count != train.class_count:
        raise ConfigError(f"model has {spec.class_count} outputs but data has {train.class_count} classes")
    params = init_params(spec, config.seed)
    state = SgdState()
    log: list[TrainRecord] = []
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        total = 0.0
        for step, (xb, yb) in enumerate(batches(train, config.batch_size, epoch_seed(config.seed, epoch))):
            with Graph() as g:
                loss = dl.cross_entropy(forward(params, xb), yb)
            _check_finite(loss.item(), epoch, step)
            backward(g, loss)
            sgd_step(params, state, lr, config.momentum, config.weight_decay)
            total += loss.item() * len(yb)
        acc = evaluate(params, val).accuracy
        mean_loss = total / len(train)
        log.append(TrainRecord(epoch, mean_loss, mean_loss, 0.0, acc, math.nan, _NAN4, _NAN4,
                               (math.nan,) * 3, (math.nan,) * 5))
        logger.info("teacher epoch %d loss %.4f val acc %.4f", epoch, mean_loss, acc)
    if checkpoint is not None:
        save_checkpoint(params, checkpoint)
    return params, log


@dataclass
class TeacherView:
    """Frozen-teacher quantities on the validation split, computed once."""

    logits: np.ndarray
    correct: np.ndarray
    accuracy: float
    entropy: np.ndarray
    quartile: np.ndarray
    top_decile: np.ndarray

    @classmethod
    def build(cls, teacher: ModelParams, val: Dataset, temperature: float) -> "TeacherView":
        ev = evaluate(teacher, val, temperature)
        order = np.argsort(ev.entropy, kind="stable")
        quartile = np.empty(len(val), dtype=np.int64)
        for q, chunk in enumerate(np.array_split(order, 4)):
            quartile[chunk] = q
        k = max(1, int(math.ceil(0.1 * len(val))))
        return cls(ev.logits, ev.correct, ev.accuracy, ev.entropy, quartile, order[-k:])


def quartile_shares(per_sample: np.ndarray, quartile: np.ndarray) -> tuple[float, float, float, float]:
    """Fraction of the summed loss falling in each teacher-entropy quartile."""
    sums = np.array([per_sample[quartile == q].sum() for q in range(4)])
    total = sums.sum()
    if not total > 0:
        return (0.25, 0.25, 0.25, 0.25)
    return tuple(float(s) for s in sums / total)


def _diagnostics(student: ModelParams, view: TeacherView, val: Dataset, config: TrainConfig):
    cfg = config.distill
    ev = evaluate(student, val, config.diagnostic_temperature)
    t_logits = Tensor(view.logits)
    s_logits = Tensor(ev.logits)
    per = dl.per_sample_distill_loss(cfg, config.loss_kind, t_logits, s_logits, val.labels).data
    w = dl.sample_weights(cfg.weighting_mode, t_logits, s_logits, cfg.entropy_temperature).values
    shares = quartile_shares(np.maximum(per, 0.0) * w, view.quartile)
    gaps = []
    for q in range(4):
        m = view.quartile == q
        gaps.append(float(view.correct[m].mean() - ev.correct[m].mean()) if m.any() else math.nan)
    hs = ev.entropy[view.top_decile]
    hs_stats = tuple(float(v) for v in np.percentile(hs, [0, 25, 50, 75, 100]))
    return ev.accuracy, shares, tuple(gaps), hs_stats


def distill_student(teacher: ModelParams, student_spec: MlpSpec, train: Dataset, val: Dataset,
                    config: TrainConfig, checkpoint=None) -> tuple[ModelParams, list[TrainRecord]]:
    """Train a fresh student against a frozen teacher.

    Per step: ``ce_weight * CE + kd_weight * mean_n(w_n * L_n)``, where
    ``L_n`` is the per-sample KD or DKD loss and ``w_n`` the weight of the
    configured mode. The student init and batch order use the same seeds as
    :func:`train_teacher`, so ``kd_weight=0`` reproduces plain CE training.
    """
    cfg = config.distill
    t_out = teacher[f"layer{sum(1 for k in teacher if k.endswith('.weight')) - 1}.weight"].shape[1]
    if not (t_out == student_spec.class_count == cfg.class_count == train.class_count):
        raise ConfigError(
            f"class-count mismatch: teacher {t_out}, student {student_spec.class_count}, "
            f"config {cfg.class_count}, data {train.class_count}")
    frozen = clone_params(teacher, requires_grad=False)
    params = init_params(student_spec, config.seed)
    validate_params(params, student_spec)
    view = TeacherView.build(frozen, val, config.diagnostic_temperature)
    state = SgdState()
    log: list[TrainRecord] = []
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        sums = np.zeros(3)
        w_min, w_max, w_sum, w_n = math.inf, -math.inf, 0.0, 0
        for step, (xb, yb) in enumerate(batches(train, config.batch_size, epoch_seed(config.seed, epoch))):
            t_logits = forward(frozen, xb)
            with Graph() as g:
                s_logits = forward(params, xb)
                ce = dl.cross_entropy(s_logits, yb)
                w = dl.sample_weights(cfg.weighting_mode, t_logits, s_logits, cfg.entropy_temperature)
                per = dl.per_sample_distill_loss(cfg, config.loss_kind, t_logits, s_logits, yb)
                kd = dl.reweighted_loss(per, w, "mean", cfg.normalize_weights)
                total = ce * cfg.ce_weight + kd * cfg.kd_weight
            _check_finite(total.item(), epoch, step)
            backward(g, total)
            sgd_step(params, state, lr, config.momentum, config.weight_decay)
            n = len(yb)
            sums += np.array([total.item(), ce.item(), kd.item()]) * n
            w_min = min(w_min, float(w.values.min()))
            w_max = max(w_max, float(w.values.max()))
            w_sum += float(w.values.sum())
            w_n += n
        acc, shares, gaps, hs_stats = _diagnostics(params, view, val, config)
        loss_total, loss_ce, loss_kd = (float(v) for v in sums / len(train))
        log.append(TrainRecord(epoch, loss_total, loss_ce, loss_kd, acc, view.accuracy, shares, gaps,
                               (w_min, w_sum / w_n, w_max), hs_stats))
        logger.info("distill[%s/%s] epoch %d loss %.4f val acc %.4f", config.loss_kind, cfg.weighting_mode,
                    epoch, loss_total, acc)
    if checkpoint is not None:
        save_checkpoint(params, checkpoint)
    return params, log
