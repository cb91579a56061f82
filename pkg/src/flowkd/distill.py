"""Distillation plans, the critical-period weighting schedule, and all loss terms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .infoflow import flow_vector, match_layers
from .kernels import hybrid_layer_loss, pairwise_sq_dists
from .nn import Dense
from .tensor import NonFiniteError, Tensor

METHODS = ("proposed", "pkt_single", "pkt_multi", "hint", "softlabel", "none")
KD_PAIR_METHODS = ("proposed", "pkt_single", "pkt_multi", "hint")


class NumericalFailure(ArithmeticError):
    pass


@dataclass
class Supervision:
    kind: str = "none"
    margin: float = 1.0
    weight: float | None = None

    def __post_init__(self):
        if self.kind not in ("none", "contrastive", "crossentropy"):
            raise ValueError(f"unknown supervision '{self.kind}'")
        if self.weight is None:
            self.weight = 0.1 if self.kind == "contrastive" else 1.0
        if self.margin <= 0 or self.weight < 0:
            raise ValueError("margin must be positive and weight non-negative")


@dataclass
class DistillPlan:
    """Which layers are matched and how strongly, epoch by epoch.

    ``pairs`` holds ``(teacher transfer point, student transfer point)``
    tuples in student order.  Intermediate pairs are weighted
    ``alpha_init * gamma ** epoch``; the final pair always weighs 1.  A
    per-pair ``alpha_override`` replaces the schedule with constants.
    """

    pairs: list[tuple[int, int]] = field(default_factory=list)
    alpha_init: float = 100.0
    gamma: float = 0.7
    alpha_override: list[float] | None = None
    method: str = "proposed"
    supervision: Supervision = field(default_factory=Supervision)
    degree: int = 1
    temperature: float = 2.0

    def __post_init__(self):
        self.pairs = [(int(a), int(b)) for a, b in self.pairs]
        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}'")
        if self.method in KD_PAIR_METHODS and not self.pairs:
            raise ValueError(f"method '{self.method}' needs at least one layer pair")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not self.alpha_init > 0:
            raise ValueError("alpha_init must be positive")
        if self.alpha_override is not None and len(self.alpha_override) != len(self.pairs):
            raise ValueError("alpha_override needs one weight per pair")
        if self.degree < 1:
            raise ValueError("kernel degree must be >= 1")


def alpha_schedule(plan: DistillPlan, i: int, k: int, n_layers: int) -> float:
    if not 0 <= i < n_layers:
        raise IndexError(f"layer {i} outside [0, {n_layers})")
    if plan.alpha_override is not None:
        return float(plan.alpha_override[i])
    if i == n_layers - 1:
        return 1.0
    return plan.alpha_init * plan.gamma ** k


def make_plan(method: str, n_teacher: int, n_student: int, **kwargs) -> DistillPlan:
    """Standard pairings: one-to-one for multi-layer methods, last-to-last otherwise."""
    if method in ("proposed", "pkt_multi"):
        if n_teacher != n_student:
            raise ValueError(f"{method} needs matching transfer points ({n_teacher} vs {n_student}); "
                             "use matched_plan() for heterogeneous pairs")
        pairs = [(i, i) for i in range(n_student)]
    elif method in ("pkt_single", "hint"):
        pairs = [(n_teacher - 1, n_student - 1)]
    else:
        pairs = []
    if method == "pkt_multi" and "alpha_override" not in kwargs:
        kwargs["alpha_override"] = [1.0] * len(pairs)
    return DistillPlan(pairs=pairs, method=method, **kwargs)


def matched_plan(teacher, student, x: np.ndarray, labels, method: str = "proposed", **kwargs) -> DistillPlan:
    """Pair layers of heterogeneous models by closest information flow."""
    kappa = match_layers(flow_vector(student, x, labels), flow_vector(teacher, x, labels))
    return DistillPlan(pairs=[(int(t), s) for s, t in enumerate(kappa)], method=method, **kwargs)


# -- loss terms ----------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -T.tsum(T.log_softmax(logits) * onehot) * (1.0 / len(labels))


def softlabel_baseline(teacher_logits, student_logits, temperature: float = 2.0) -> Tensor:
    """``T^2``-scaled KL(teacher || student) between temperature softmaxes, batch mean."""
    t, s = T.as_tensor(teacher_logits).data, T.as_tensor(student_logits)
    if t.shape != s.shape:
        raise ValueError(f"class-count mismatch: {t.shape} vs {s.shape}")
    shifted = t / temperature
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    log_pt = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = T.log_softmax(s * (1.0 / temperature))
    kl = T.tsum(pt * log_pt) - T.tsum(log_ps * pt)
    return kl * (temperature**2 / t.shape[0])


def hint_baseline(teacher, student, projection: Dense | None = None) -> Tensor:
    """Mean squared error between (projected) student and teacher representations."""
    t, s = T.as_tensor(teacher).data, T.as_tensor(student)
    if s.ndim > 2:
        s = T.flatten(s)
    t = t.reshape(len(t), -1)
    if projection is not None:
        s = projection.forward(s, train=True)
    if s.shape != t.shape:
        raise ValueError(f"hint dims differ ({s.shape} vs {t.shape}); a projection is required")
    diff = s - t
    return T.tmean(diff * diff)


def contrastive_loss(a, b, same, margin: float = 1.0) -> Tensor:
    """Pairwise contrastive loss over aligned rows of ``a`` and ``b``.

    ``d^2`` for same-class pairs, ``max(0, margin - d)^2`` otherwise, averaged
    over pairs.
    """
    a, b = T.as_tensor(a), T.as_tensor(b)
    same = np.asarray(same, dtype=bool)
    if same.size == 0:
        raise ValueError("no pairs given")
    diff = a - b
    d2 = T.tsum(diff * diff, axis=1)
    d = T.sqrt(d2)
    hinge = T.relu(margin - d)
    per_pair = d2 * same.astype(float) + hinge * hinge * (~same).astype(float)
    return T.tmean(per_pair)


def batch_contrastive_loss(y: Tensor, labels, margin: float = 1.0) -> Tensor:
    """Contrastive loss over every unordered within-batch pair ``i < j``."""
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise ValueError("contrastive loss needs at least two samples")
    iu = np.triu(np.ones((n, n), dtype=bool), k=1)
    same = (labels[:, None] == labels[None, :]) & iu
    diff_ = (labels[:, None] != labels[None, :]) & iu
    d2 = pairwise_sq_dists(T.as_tensor(y))
    hinge = T.relu(margin - T.sqrt(d2))
    total = T.tsum(d2 * same.astype(float)) + T.tsum(hinge * hinge * diff_.astype(float))
    return total * (1.0 / iu.sum())


@dataclass
class LossTerms:
    total: Tensor
    kd: dict[int, Tensor]
    supervision: Tensor | None

    def kd_values(self, n_student: int) -> list[float]:
        vals = [0.0] * n_student
        for s, term in self.kd.items():
            vals[s] = term.item()
        return vals


def distill_loss_terms(plan: DistillPlan, teacher_batches: Sequence, student_batches: Sequence[Tensor],
                       epoch: int, labels=None, student_logits: Tensor | None = None,
                       teacher_logits=None, projections: Sequence[Dense] | None = None,
                       embedding: Tensor | None = None) -> LossTerms:
    """Weighted per-pair KD terms plus the optional supervision term.

    ``teacher_batches[i]`` / ``student_batches[i]`` are the representations
    for ``plan.pairs[i]``.  KD terms are returned already weighted by the
    schedule, keyed by student transfer point.
    """
    if plan.method in KD_PAIR_METHODS and not (len(teacher_batches) == len(student_batches) == len(plan.pairs)):
        raise ValueError("teacher/student batch lists are not aligned with plan.pairs")
    kd: dict[int, Tensor] = {}
    n = len(plan.pairs)
    for i, ((tp, sp), t, s) in enumerate(zip(plan.pairs, teacher_batches, student_batches)):
        alpha = alpha_schedule(plan, i, epoch, n)
        try:
            if plan.method == "hint":
                term = hint_baseline(t, s, projections[i] if projections else None)
            elif plan.method in ("proposed", "pkt_single", "pkt_multi"):
                term = hybrid_layer_loss(t, s, plan.degree)
            else:
                continue
        except NonFiniteError as exc:
            raise NumericalFailure(f"non-finite KD loss for pair (teacher {tp}, student {sp}): {exc}") from exc
        kd[sp] = term * alpha
    if plan.method == "softlabel":
        if teacher_logits is None or student_logits is None:
            raise ValueError("soft-label distillation needs teacher and student logits")
        kd[-1] = softlabel_baseline(
            teacher_logits, student_logits, plan.temperature)

    sup = None
    if plan.supervision.kind == "contrastive":
        emb = embedding if embedding is not None else student_batches[-1]
        sup = plan.supervision.weight * batch_contrastive_loss(emb, labels, plan.supervision.margin)
    elif plan.supervision.kind == "crossentropy":
        if student_logits is None:
            raise ValueError("cross-entropy supervision needs a classification head")
        sup = plan.supervision.weight * cross_entropy(student_logits, labels)

    terms = list(kd.values()) + ([sup] if sup is not None else [])
    total = terms[0] if terms else Tensor(0.0)
    for term in terms[1:]:
        total = total + term
    return LossTerms(total, kd, sup)


def distill_loss(plan: DistillPlan, teacher_batches, student_batches, epoch: int, **kwargs) -> Tensor:
    return distill_loss_terms(plan, teacher_batches, student_batches, epoch, **kwargs).total
