"""Distillation losses and entropy-based sample weighting.

All per-sample losses are returned unreduced (shape ``(N,)``) so any weighting
mode composes with any loss. Weights are plain numpy arrays computed from
detached logits; they scale gradients but never carry any of their own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError, DimensionError, InputError
from .tensor import Tensor

WEIGHTING_MODES = ("none", "base", "interact", "ea", "inverted_base", "inverted_student")
LOSS_KINDS = ("kd", "dkd")


@dataclass(frozen=True)
class DistillConfig:
    class_count: int
    distill_temperature: float = 4.0
    entropy_temperature: float = 3.0
    ce_weight: float = 1.0
    kd_weight: float = 1.0
    dkd_alpha: float = 1.0
    dkd_beta: float = 8.0
    weighting_mode: str = "ea"
    normalize_weights: bool = False

    def __post_init__(self):
        if int(self.class_count) != self.class_count or self.class_count < 2:
            raise ConfigError(f"class_count must be an integer >= 2, got {self.class_count}")
        if not self.distill_temperature > 0:
            raise ConfigError(f"distill_temperature must be > 0, got {self.distill_temperature}")
        if not self.entropy_temperature > 0:
            raise ConfigError(f"entropy_temperature must be > 0, got {self.entropy_temperature}")
        for name in ("ce_weight", "kd_weight", "dkd_alpha", "dkd_beta"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.weighting_mode not in WEIGHTING_MODES:
            raise ConfigError(f"unknown weighting_mode {self.weighting_mode!r}; expected one of {WEIGHTING_MODES}")

    @property
    def entropy_bound(self) -> float:
        return math.log(self.class_count)


@dataclass(frozen=True)
class EntropyPair:
    teacher: np.ndarray
    student: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.teacher.shape != self.student.shape:
            raise DimensionError(f"entropy shapes differ: {self.teacher.shape} vs {self.student.shape}")

    @property
    def bound(self) -> float:
        return math.log(self.class_count)


@dataclass(frozen=True)
class SampleWeights:
    values: np.ndarray
    mode: str

    def __len__(self) -> int:
        return len(self.values)


def _logits(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def entropy(logits, temperature: float = 1.0) -> np.ndarray:
    """Shannon entropy (nats) of ``softmax(logits / temperature)`` per row.

    Detached; clipped to ``[0, ln C]`` to absorb rounding.
    """
    z = _logits(logits)
    if not np.all(np.isfinite(z.data)):
        raise InputError("entropy: logits contain NaN or Inf")
    logp = tn.log_softmax(tn.detach(z), temperature).data
    h = -np.sum(np.exp(logp) * logp, axis=1)
    return np.clip(h, 0.0, math.log(z.shape[1]))


def entropy_pair(teacher_logits, student_logits, temperature: float) -> EntropyPair:
    t, s = _logits(teacher_logits), _logits(student_logits)
    if t.shape != s.shape:
        raise DimensionError(f"teacher logits {t.shape} vs student logits {s.shape}")
    return EntropyPair(entropy(t, temperature), entropy(s, temperature), t.shape[1])


def weight_base(h: EntropyPair) -> SampleWeights:
    return SampleWeights(h.teacher.copy(), "base")


def weight_interact(h: EntropyPair) -> SampleWeights:
    return SampleWeights(h.teacher * h.student / h.bound, "interact")


def weight_ea(h: EntropyPair) -> SampleWeights:
    """Mean of the base and interaction terms.

    Equal to ``0.5 * H_T * (1 + H_S / H_ub)``: the teacher entropy scaled by
    a factor in ``[1/2, 1]`` that tracks how unsure the student still is.
    """
    base = weight_base(h).values
    interact = weight_interact(h).values
    return SampleWeights((base + interact) / 2.0, "ea")


def weight_ea_factored(h: EntropyPair) -> np.ndarray:
    return 0.5 * h.teacher * (1.0 + h.student / h.bound)


def weight_inverted(w: SampleWeights, bound: float, mode: str | None = None) -> SampleWeights:
    """``bound - w``: down-weights exactly the samples ``w`` favours."""
    if np.any(w.values > bound):
        raise ContractError(f"weights exceed the bound {bound}: max {np.max(w.values)}")
    return SampleWeights(bound - w.values, mode or f"inverted_{w.mode}")


def sample_weights(mode: str, teacher_logits, student_logits, entropy_temperature: float) -> SampleWeights:
    """Weights for one batch under ``mode``; ``none`` gives all ones."""
    if mode not in WEIGHTING_MODES:
        raise ConfigError(f"unknown weighting_mode {mode!r}")
    t = _logits(teacher_logits)
    if mode == "none":
        return SampleWeights(np.ones(t.shape[0]), "none")
    h = entropy_pair(t, student_logits, entropy_temperature)
    if mode == "base":
        return weight_base(h)
    if mode == "interact":
        return weight_interact(h)
    if mode == "ea":
        return weight_ea(h)
    if mode == "inverted_base":
        return weight_inverted(weight_base(h), h.bound, mode)
    return weight_inverted(SampleWeights(h.student.copy(), "student"), h.bound, mode)


def _check_pair(teacher_logits, student_logits) -> tuple[Tensor, Tensor]:
    t, s = _logits(teacher_logits), _logits(student_logits)
    if t.shape != s.shape or t.data.ndim != 2:
        raise DimensionError(f"teacher logits {t.shape} vs student logits {s.shape}")
    return tn.detach(t), s


def kd_loss(teacher_logits, student_logits, temperature: float = 4.0) -> Tensor:
    """Per-sample ``KL(p_T || p_S) * T^2`` at temperature ``T``."""
    t, s = _check_pair(teacher_logits, student_logits)
    log_pt = tn.log_softmax(t, temperature).data
    pt = np.exp(log_pt)
    self_term = np.sum(pt * log_pt, axis=1)
    cross = tn.sum_rows(tn.mul(Tensor(pt), tn.log_softmax(s, temperature)))
    return tn.mul(tn.sub(Tensor(self_term), cross), temperature**2)


def _target_index(target, n: int, c: int) -> np.ndarray:
    idx = np.asarray(target)
    if idx.shape != (n,) or not np.issubdtype(idx.dtype, np.integer):
        raise InputError(f"targets must be {n} integer class indices")
    if n and (idx.min() < 0 or idx.max() >= c):
        raise InputError(f"target class out of range [0, {c})")
    return idx


def _xlogy_diff(p: np.ndarray, log_p: np.ndarray) -> np.ndarray:
    return np.where(p > 0, p * log_p, 0.0)


def tckd_nckd(teacher_logits, student_logits, target, temperature: float = 4.0) -> tuple[Tensor, Tensor]:
    """Per-sample target-class and non-target-class KL terms (no ``T^2``).

    The target term compares the binary split ``(p_target, 1 - p_target)``;
    the non-target term compares the distributions renormalised over the
    remaining classes. Both are evaluated in log space.
    """
    t, s = _check_pair(teacher_logits, student_logits)
    n, c = t.shape
    idx = _target_index(target, n, c)

    lse_t = tn.logsumexp(t, temperature).data
    log_pt_target = t.data[np.arange(n), idx] / temperature - lse_t
    log_pt_other = tn.logsumexp(t, temperature, exclude=idx).data - lse_t
    pt_target, pt_other = np.exp(log_pt_target), np.exp(log_pt_other)

    lse_s = tn.logsumexp(s, temperature)
    log_ps_target = tn.sub(tn.mul(tn.gather(s, idx), 1.0 / temperature), lse_s)
    log_ps_other = tn.sub(tn.logsumexp(s, temperature, exclude=idx), lse_s)

    tckd_const = _xlogy_diff(pt_target, log_pt_target) + _xlogy_diff(pt_other, log_pt_other)
    tckd = tn.sub(
        Tensor(tckd_const),
        tn.add(tn.mul(Tensor(pt_target), log_ps_target), tn.mul(Tensor(pt_other), log_ps_other)),
    )

    log_qt = tn.log_softmax(t, temperature, exclude=idx).data
    qt = np.exp(log_qt)
    qt[np.arange(n), idx] = 0.0
    nckd_const = np.sum(_xlogy_diff(qt, log_qt), axis=1)
    log_qs = tn.log_softmax(s, temperature, exclude=idx)
    nckd = tn.sub(Tensor(nckd_const), tn.sum_rows(tn.mul(Tensor(qt), log_qs)))
    return tckd, nckd


def dkd_loss(teacher_logits, student_logits, target, alpha: float = 1.0, beta: float = 8.0,
             temperature: float = 4.0) -> Tensor:
    """Per-sample ``(alpha * TCKD + beta * NCKD) * T^2``."""
    tckd, nckd = tckd_nckd(teacher_logits, student_logits, target, temperature)
    return tn.mul(tn.add(tn.mul(tckd, alpha), tn.mul(nckd, beta)), temperature**2)


def reweighted_loss(per_sample: Tensor, weights, reduction: str = "mean", normalize: bool = False) -> Tensor:
    """``Σ_n w_n L_n`` (or its mean over N). ``weights`` are treated as constants.

    With ``normalize`` the weights are first divided by their batch mean.
    """
    w = weights.values if isinstance(weights, SampleWeights) else np.asarray(weights, dtype=np.float64)
    if per_sample.data.ndim != 1 or w.shape != per_sample.shape:
        raise DimensionError(f"loss vector {per_sample.shape} vs weights {w.shape}")
    if normalize:
        m = w.mean()
        w = w / m if m > 0 else w
    weighted = tn.mul(per_sample, Tensor(w))
    if reduction == "sum":
        return tn.sum_all(weighted)
    if reduction == "mean":
        return tn.mean_all(weighted)
    raise ConfigError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def cross_entropy(student_logits, targets) -> Tensor:
    """Mean ``-log softmax(z)[target]`` at temperature 1."""
    s = _logits(student_logits)
    n, c = s.shape
    idx = _target_index(targets, n, c)
    return tn.neg(tn.mean_all(tn.gather(tn.log_softmax(s, 1.0), idx)))


def per_sample_distill_loss(config: DistillConfig, loss_kind: str, teacher_logits, student_logits,
                            targets) -> Tensor:
    if loss_kind == "kd":
        return kd_loss(teacher_logits, student_logits, config.distill_temperature)
    if loss_kind == "dkd":
        return dkd_loss(teacher_logits, student_logits, targets, config.dkd_alpha, config.dkd_beta,
                        config.distill_temperature)
    raise ConfigError(f"unknown loss_kind {loss_kind!r}; expected one of {LOSS_KINDS}")
