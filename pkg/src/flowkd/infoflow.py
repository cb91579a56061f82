"""Information-flow measurement: per-layer QMI, flow vectors, layer matching, NCC probe."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .kernels import TSTUDENT, KernelKind, kernel_matrix
from .tensor import no_grad


@dataclass
class LabelBatch:
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("class id out of range")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class FlowVector:
    omega: np.ndarray
    source: str = "model"

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        if not np.all(np.isfinite(self.omega)):
            raise ValueError("flow vector entries must be finite")

    def __len__(self) -> int:
        return len(self.omega)


class HasRepresentations(Protocol):
    transfer_points: Sequence[int]

    def representations(self, x: np.ndarray, batch_size: int = ...) -> list[np.ndarray]: ...


def _labels(labels) -> np.ndarray:
    return labels.labels if isinstance(labels, LabelBatch) else np.asarray(labels, dtype=np.int64)


def qmi_estimate(values, labels, kernel: KernelKind = TSTUDENT) -> float:
    """Quadratic mutual information between representations and class labels.

    Information-potential form ``V_in + V_all - 2 V_btw`` computed from the
    full kernel matrix (diagonal included).
    """
    y = _labels(labels)
    with no_grad():
        k = kernel_matrix(values, kernel).data
    n = k.shape[0]
    if n < 2:
        raise ValueError("QMI needs at least two samples")
    if len(y) != n:
        raise ValueError("labels and representations differ in length")
    classes = np.unique(y)
    if classes.size == 0:
        raise ValueError("no classes present")
    onehot = (y[:, None] == classes[None, :]).astype(float)  # n x C
    priors = onehot.sum(axis=0) / n
    v_in = np.einsum("ic,ij,jc->", onehot, k, onehot) / n**2
    v_all = (priors**2).sum() * k.sum() / n**2
    v_btw = (priors * (onehot.T @ k.sum(axis=1))).sum() / n**2
    return float(v_in + v_all - 2.0 * v_btw)


def flow_vector(model: HasRepresentations, data: np.ndarray, labels, kernel: KernelKind = TSTUDENT,
                batch_size: int = 128, source: str = "model") -> FlowVector:
    """QMI at every transfer point, averaged over consecutive evaluation batches."""
    y = _labels(labels)
    reps = model.representations(data)
    if not reps:
        raise ValueError("model has no transfer points")
    starts = [s for s in range(0, len(y), batch_size) if min(batch_size, len(y) - s) >= 2]
    if not starts:
        raise ValueError("not enough samples for a single evaluation batch")
    omega = [np.mean([qmi_estimate(r[s:s + batch_size], y[s:s + batch_size], kernel) for s in starts])
             for r in reps]
    return FlowVector(np.array(omega), source)


def match_layers(omega_s, omega_t) -> np.ndarray:
    """Teacher layer for each student layer: closest QMI, last layer pinned to last."""
    ws = np.asarray(getattr(omega_s, "omega", omega_s), dtype=float)
    wt = np.asarray(getattr(omega_t, "omega", omega_t), dtype=float)
    if ws.size == 0 or wt.size == 0:
        raise ValueError("flow vectors must be non-empty")
    kappa = np.argmin((ws[:, None] - wt[None, :]) ** 2, axis=1)
    kappa[-1] = wt.size - 1
    return kappa


def flow_divergence(omega_s, omega_t, kappa) -> float:
    ws = np.asarray(getattr(omega_s, "omega", omega_s), dtype=float)
    wt = np.asarray(getattr(omega_t, "omega", omega_t), dtype=float)
    kappa = np.asarray(kappa, dtype=np.int64)
    if kappa.shape != ws.shape:
        raise IndexError("kappa must have one entry per student layer")
    if kappa.size and (kappa.min() < 0 or kappa.max() >= wt.size):
        raise IndexError("kappa refers to a teacher layer that does not exist")
    return float(((ws - wt[kappa]) ** 2).sum())


def ncc_probe(train_x: np.ndarray, train_y, test_x: np.ndarray, test_y) -> float:
    """Nearest-centroid accuracy; ties go to the lowest class id."""
    train_x = np.asarray(train_x, dtype=float).reshape(len(train_x), -1)
    test_x = np.asarray(test_x, dtype=float).reshape(len(test_x), -1)
    ytr, yte = _labels(train_y), _labels(test_y)
    classes = np.unique(ytr)
    missing = np.setdiff1d(np.unique(yte), classes)
    if missing.size:
        raise ValueError(f"test classes {missing.tolist()} are absent from the training split")
    centroids = np.stack([train_x[ytr == c].mean(axis=0) for c in classes])
    d2 = ((test_x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = classes[np.argmin(d2, axis=1)]
    return float(np.mean(pred == yte))
