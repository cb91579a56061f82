"""Kernel similarities, neighbour-selection probabilities and their divergence.

Conditional probabilities are column-normalized: ``P[i, j]`` is the
probability that sample ``j`` picks sample ``i`` as its neighbour, so every
column sums to one over ``i != j`` and the diagonal is zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad

PROB_FLOOR = 1e-7
NORM_FLOOR = 1e-8


@dataclass(frozen=True)
class KernelKind:
    name: str = "tstudent"
    degree: int = 1

    def __post_init__(self):
        if self.name not in ("cosine", "tstudent"):
            raise ValueError(f"unknown kernel '{self.name}'")
        if self.degree < 1:
            raise ValueError("t-student degree must be >= 1")


COSINE = KernelKind("cosine")
TSTUDENT = KernelKind("tstudent", 1)


@dataclass
class RepresentationBatch:
    values: np.ndarray | Tensor
    layer_index: int = 0
    source: str = "student"

    def __post_init__(self):
        if self.source not in ("teacher", "auxiliary", "student"):
            raise ValueError(f"unknown source '{self.source}'")
        if len(self.values) < 2:
            raise ValueError("a representation batch needs at least two samples")

    @property
    def n(self) -> int:
        return len(self.values)


@dataclass
class CondProbMatrix:
    P: np.ndarray
    kernel: KernelKind

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in self.P:
                writer.writerow([f"{v:.17g}" for v in row])


def _values(x) -> Tensor:
    if isinstance(x, RepresentationBatch):
        x = x.values
    if isinstance(x, CondProbMatrix):
        x = x.P
    x = T.as_tensor(x)
    if x.ndim != 2:
        x = T.flatten(x)
    return x


# -- scalar kernels ------------------------------------------------------------

def cosine_kernel(a, b) -> float:
    """Half-shifted cosine similarity in [0, 1]; norms are floored at 1e-8."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    na = max(np.linalg.norm(a), NORM_FLOOR)
    nb = max(np.linalg.norm(b), NORM_FLOOR)
    return 0.5 * (float(a @ b) / (na * nb) + 1.0)


def tstudent_kernel(a, b, d: int = 1) -> float:
    if d < 1:
        raise ValueError("degree must be >= 1")
    dist = np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    return 1.0 / (1.0 + dist ** d)


# -- batched, differentiable ---------------------------------------------------

def normalize_rows(y: Tensor) -> Tensor:
    norms = T.clamp_min(T.sqrt(T.tsum(y * y, axis=1, keepdims=True)), NORM_FLOOR)
    return y / norms


DIRECT_DIST_LIMIT = 2_000_000


def pairwise_sq_dists(y: Tensor) -> Tensor:
    n, d = y.shape
    if n * n * d <= DIRECT_DIST_LIMIT:
        # exact (coincident rows give exactly 0); the Gram form below cancels
        diff = T.reshape(y, (n, 1, d)) - T.reshape(y, (1, n, d))
        return T.tsum(diff * diff, axis=2)
    sq = T.tsum(y * y, axis=1, keepdims=True)
    d2 = sq + T.transpose(sq) - 2.0 * (y @ T.transpose(y))
    return T.clamp_min(d2, 0.0)


def kernel_matrix(y, kernel: KernelKind = TSTUDENT) -> Tensor:
    """Full ``N x N`` kernel matrix (diagonal included)."""
    y = _values(y)
    if kernel.name == "cosine":
        yn = normalize_rows(y)
        return 0.5 * (yn @ T.transpose(yn) + 1.0)
    dist_pow = T.power(pairwise_sq_dists(y), kernel.degree / 2.0)
    return 1.0 / (dist_pow + 1.0)


def cond_probs(y, kernel: KernelKind = TSTUDENT, floor: float = PROB_FLOOR) -> Tensor:
    """Differentiable conditional probability matrix.

    Off-diagonal entries are floored at ``floor`` and the columns
    renormalized, so downstream logs stay finite.
    """
    y = _values(y)
    n = y.shape[0]
    if n < 2:
        raise ValueError("conditional probabilities need at least two samples")
    off = 1.0 - np.eye(n, dtype=y.data.dtype)
    k = kernel_matrix(y, kernel) * off
    colsum = T.tsum(k, axis=0, keepdims=True)
    if np.any(colsum.data <= 0):
        raise ValueError("a kernel column is identically zero; probabilities are undefined")
    p = T.clamp_min(k / colsum, floor) * off
    return p / T.tsum(p, axis=0, keepdims=True)


def cond_prob_matrix(batch, kernel: KernelKind = TSTUDENT) -> CondProbMatrix:
    with no_grad():
        return CondProbMatrix(cond_probs(batch, kernel).data.copy(), kernel)


def jeffreys_divergence(pt, ps) -> Tensor:
    """Symmetric KL between two conditional probability matrices.

    Raw double sum over all off-diagonal entries, no normalization by batch size.
    """
    pt, ps = _values(pt), _values(ps)
    if pt.shape != ps.shape:
        raise ValueError(f"probability matrices differ in shape: {pt.shape} vs {ps.shape}")
    eye = np.eye(pt.shape[0], dtype=pt.data.dtype)
    # the diagonal is zero in both; shifting it to one makes its log vanish
    return T.tsum((pt - ps) * (T.log(pt + eye) - T.log(ps + eye)))


def teacher_probs(teacher, degree: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Constant (cosine, t-student) probability pair for a teacher batch."""
    with no_grad():
        t = _values(teacher).detach()
        return (cond_probs(t, COSINE).data, cond_probs(t, KernelKind("tstudent", degree)).data)


def hybrid_loss_from_probs(probs: tuple[np.ndarray, np.ndarray], student, degree: int = 1) -> Tensor:
    s = _values(student)
    pc, pt = probs
    return (jeffreys_divergence(pc, cond_probs(s, COSINE))
            + jeffreys_divergence(pt, cond_probs(s, KernelKind("tstudent", degree))))


def hybrid_layer_loss(teacher, student, degree: int = 1) -> Tensor:
    """Cosine-kernel plus t-student-kernel Jeffreys divergence; teacher is held constant."""
    t, s = _values(teacher), _values(student)
    if t.shape[0] != s.shape[0]:
        raise ValueError("teacher and student batches differ in size")
    return hybrid_loss_from_probs(teacher_probs(t, degree), s, degree)
