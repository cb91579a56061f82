"""Training loops: supervised teacher, PKT auxiliary, and student distillation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import save_model
from .data import STREAM_SHUFFLE, AugmentSpec, Dataset, augment, stream
from .distill import DistillPlan, LossTerms, NumericalFailure, cross_entropy, distill_loss_terms, make_plan
from .kernels import hybrid_layer_loss
from .metrics import classification_accuracy, retrieval_report
from .nn import Dense, LayerGraph
from .optim import OptimizerConfig, make_optimizer
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 128
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentSpec | None = None
    seed: int = 0
    shuffle: bool = True
    top_k: int = 100
    eval_every: int = 1
    frozen_student: bool = False
    record_wallclock: bool = False
    checkpoint_every: int = 0
    out_dir: Path | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")


@dataclass
class TrainState:
    seed: int
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _batches(n: int, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    order = stream(cfg.seed, STREAM_SHUFFLE, epoch).permutation(n) if cfg.shuffle else np.arange(n)
    bs = min(cfg.batch_size, n)
    # incomplete trailing batch dropped: the raw-sum divergence scales with batch size
    return [order[i:i + bs] for i in range(0, n - bs + 1, bs)]


def _inputs(data: Dataset, idx: np.ndarray, cfg: TrainConfig, epoch: int) -> np.ndarray:
    x = data.x[idx]
    if cfg.augment is not None and data.is_image:
        x = augment(x, cfg.augment, epoch, idx)
    return x


def evaluate(model: LayerGraph, database: Dataset | None, queries: Dataset | None,
             top_k: int = 100) -> dict[str, float]:
    """Retrieval on the final representation plus accuracy when a head exists."""
    out = {"eval_mAP_e": math.nan, "eval_mAP_c": math.nan, "eval_top_k": math.nan, "eval_accuracy": math.nan}
    if database is None or queries is None or database.y is None or queries.y is None:
        return out
    db = model.representations(database.x)[-1]
    q = model.representations(queries.x)[-1]
    rep = retrieval_report(db, database.y, q, queries.y, top_k)
    k = min(top_k, len(db))
    out.update(eval_mAP_e=rep["mAP_e"], eval_mAP_c=rep["mAP_c"], eval_top_k=rep[f"top{k}_e"])
    if model.head is not None:
        out["eval_accuracy"] = classification_accuracy(model.logits(queries.x), queries.y)
    return out


class MetricsWriter:
    """Per-epoch CSV log; rows are flushed as they arrive."""

    def __init__(self, path: Path | None, columns: list[str]):
        self.path, self.columns = path, columns
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(columns)

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row.get(c, "")) for c in self.columns])


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _fit(model: LayerGraph, extra_params: dict[str, Tensor], data: Dataset, cfg: TrainConfig,
         batch_loss: Callable[[np.ndarray, np.ndarray | None, int, bool], tuple[Tensor, dict]],
         epoch_end: Callable[[int, dict], dict], writer: MetricsWriter, state: TrainState) -> TrainState:
    params = dict(model.parameters())
    params.update(extra_params)
    opt = make_optimizer(params, cfg.optimizer)
    train_mode = not cfg.frozen_student
    for k in range(cfg.epochs):
        t0 = time.perf_counter()
        sums: dict[str, float] = {}
        batches = _batches(len(data), cfg, k)
        for idx in batches:
            xb = _inputs(data, idx, cfg, k)
            yb = None if data.y is None else data.y[idx]
            opt.zero_grad()
            total, parts = batch_loss(xb, yb, k, train_mode)
            if not math.isfinite(total.item()):
                raise NumericalFailure(f"non-finite loss at epoch {k}")
            if train_mode:
                total.backward()
                opt.step()
            state.step_losses.append(total.item())
            for name, v in parts.items():
                sums[name] = sums.get(name, 0.0) + v
        row = {"epoch": k}
        row.update({name: v / len(batches) for name, v in sums.items()})
        row.update(epoch_end(k, row))
        row["wallclock_s"] = time.perf_counter() - t0 if cfg.record_wallclock else 0.0
        writer.write(row)
        state.history.append(row)
        state.epoch = k + 1
        if cfg.checkpoint_every and cfg.out_dir is not None and (k + 1) % cfg.checkpoint_every == 0:
            state.checkpoints.append(save_model(model, Path(cfg.out_dir) / f"epoch{k + 1:03d}.ckpt"))
        log.info("epoch %d: %s", k, {n: round(v, 5) for n, v in row.items() if isinstance(v, float)})
    return state


# -- supervised teacher --------------------------------------------------------

TEACHER_COLUMNS = ["epoch", "total_loss", "train_accuracy", "eval_mAP_e", "eval_mAP_c", "eval_top_k",
                   "eval_accuracy", "wallclock_s"]


def train_teacher(model: LayerGraph, data: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None,
                  metrics_path: Path | None = None) -> tuple[LayerGraph, TrainState]:
    """Cross-entropy training of a model with a classification head."""
    if model.head is None:
        raise ValueError("teacher training needs a classification head")
    if data.y is None:
        raise ValueError("teacher training needs labels")
    state = TrainState(cfg.seed)
    writer = MetricsWriter(metrics_path, TEACHER_COLUMNS)
    correct = {"hit": 0, "n": 0}

    def batch_loss(xb, yb, k, train):
        _, logits = model.run(xb, train=train)
        correct["hit"] += int((logits.data.argmax(axis=1) == yb).sum())
        correct["n"] += len(yb)
        loss = cross_entropy(logits, yb)
        return loss, {"total_loss": loss.item()}

    def epoch_end(k, row):
        acc = correct["hit"] / max(correct["n"], 1)
        correct.update(hit=0, n=0)
        out = {"train_accuracy": acc}
        if eval_data is not None and (k + 1) % cfg.eval_every == 0:
            out.update(evaluate(model, data, eval_data, cfg.top_k))
        return out

    return model, _fit(model, {}, data, cfg, batch_loss, epoch_end, writer, state)


# -- distillation ---------------------------------------------------------------

def distill_columns(n_student: int) -> list[str]:
    return (["epoch", "total_loss"] + [f"kd_loss_{i}" for i in range(n_student)]
            + ["supervision_loss", "eval_mAP_e", "eval_mAP_c", "eval_top_k", "eval_accuracy", "wallclock_s"])


def _source_outputs(source, xb: np.ndarray, want_logits: bool) -> tuple[list[np.ndarray], np.ndarray | None]:
    with no_grad():
        reps = source.representations(xb, batch_size=len(xb))
        logits = source.logits(xb, batch_size=len(xb)) if want_logits else None
    return reps, logits


def make_projections(plan: DistillPlan, source, student: LayerGraph, data: Dataset,
                     rng: np.random.Generator) -> list[Dense]:
    """Learned linear maps student dim -> teacher dim for hint transfer."""
    if plan.method != "hint":
        return []
    probe = source.representations(data.x[:2])
    return [Dense(student.representation_dim(s), probe[t].reshape(2, -1).shape[1], rng=rng)
            for t, s in plan.pairs]


def distill_student(source, student: LayerGraph, plan: DistillPlan, data: Dataset, cfg: TrainConfig,
                    eval_data: Dataset | None = None, metrics_path: Path | None = None,
                    projections: list[Dense] | None = None) -> tuple[LayerGraph, TrainState]:
    """Train ``student`` against a frozen ``source`` (teacher, auxiliary or HoG)."""
    n_s = student.n_transfer_points
    for tp, sp in plan.pairs:
        if not (0 <= tp < source.n_transfer_points and 0 <= sp < n_s):
            raise ValueError(f"pair ({tp}, {sp}) does not index the models' transfer points")
    if plan.supervision.kind != "none" and data.y is None:
        raise ValueError(f"{plan.supervision.kind} supervision needs labels")
    if projections is None:
        projections = make_projections(plan, source, student, data, stream(cfg.seed, 0, 7))
    extra = {f"projection.{i}.{n}": p for i, proj in enumerate(projections) for n, p in proj.params().items()}
    want_logits = plan.method == "softlabel"
    state = TrainState(cfg.seed)
    writer = MetricsWriter(metrics_path, distill_columns(n_s))

    def batch_loss(xb, yb, k, train):
        t_reps, t_logits = _source_outputs(source, xb, want_logits)
        try:
            s_reps, s_logits = student.run(xb, train=train)
        except NonFiniteError as exc:
            raise NumericalFailure(f"non-finite student activation at epoch {k}: {exc}") from exc
        terms: LossTerms = distill_loss_terms(
            plan, [t_reps[t] for t, _ in plan.pairs], [s_reps[s] for _, s in plan.pairs], k,
            labels=yb, student_logits=s_logits, teacher_logits=t_logits,
            projections=projections, embedding=s_reps[-1])
        parts = {"total_loss": terms.total.item(),
                 "supervision_loss": 0.0 if terms.supervision is None else terms.supervision.item()}
        for i, v in enumerate(terms.kd_values(n_s)):
            parts[f"kd_loss_{i}"] = v
        return terms.total, parts

    def epoch_end(k, row):
        if eval_data is not None and (k + 1) % cfg.eval_every == 0:
            return evaluate(student, data, eval_data, cfg.top_k)
        return {}

    return student, _fit(student, extra, data, cfg, batch_loss, epoch_end, writer, state)


def train_auxiliary(teacher, aux: LayerGraph, data: Dataset, cfg: TrainConfig, eval_data: Dataset | None = None,
                    metrics_path: Path | None = None, degree: int = 1) -> tuple[LayerGraph, TrainState]:
    """PKT: match the teacher's final representation with the auxiliary's."""
    plan = make_plan("pkt_single", teacher.n_transfer_points, aux.n_transfer_points, degree=degree)
    return distill_student(teacher, aux, plan, data, cfg, eval_data, metrics_path)


def kd_loss_value(source, student: LayerGraph, data: Dataset, batch_size: int = 128, degree: int = 1) -> float:
    """Mean last-layer hybrid loss over consecutive batches, eval mode, no training."""
    vals = []
    bs = min(batch_size, len(data))
    for start in range(0, len(data) - bs + 1, bs):
        xb = data.x[start:start + bs]
        with no_grad():
            t = source.representations(xb, batch_size=bs)[-1]
            s = student.representations(xb, batch_size=bs)[-1]
            vals.append(hybrid_layer_loss(t, s, degree).item())
    return float(np.mean(vals))


def run_with_dtype(dtype, fn, *args, **kwargs):
    prev = T.get_default_dtype()
    T.set_default_dtype(dtype)
    try:
        return fn(*args, **kwargs)
    finally:
        T.set_default_dtype(prev)
