"""Retrieval (mAP, top-k precision) and classification metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import NORM_FLOOR


@dataclass
class RetrievalIndex:
    database: np.ndarray
    labels: np.ndarray
    metric: str = "euclidean"

    def __post_init__(self):
        self.database = np.asarray(self.database, dtype=float).reshape(len(self.database), -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.metric not in ("euclidean", "cosine"):
            raise ValueError(f"unknown metric '{self.metric}'")
        if len(self.database) == 0:
            raise ValueError("empty retrieval database")
        if len(self.labels) != len(self.database):
            raise ValueError("database and labels differ in length")

    def similarity(self, queries: np.ndarray) -> np.ndarray:
        q = np.asarray(queries, dtype=float).reshape(len(queries), -1)
        db = self.database
        if q.shape[1] != db.shape[1]:
            raise ValueError("query and database dimensionality differ")
        if self.metric == "cosine":
            qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), NORM_FLOOR)
            dn = db / np.maximum(np.linalg.norm(db, axis=1, keepdims=True), NORM_FLOOR)
            return qn @ dn.T
        d2 = (q * q).sum(1)[:, None] + (db * db).sum(1)[None, :] - 2.0 * q @ db.T
        return -np.maximum(d2, 0.0)

    def rank(self, queries: np.ndarray) -> np.ndarray:
        """Database indices per query, most similar first; ties by database index."""
        sim = self.similarity(queries)
        return np.argsort(-sim, axis=1, kind="stable")


def _relevance(index: RetrievalIndex, queries, query_labels) -> np.ndarray:
    ql = np.asarray(query_labels, dtype=np.int64)
    missing = np.setdiff1d(np.unique(ql), index.labels)
    if missing.size:
        raise ValueError(f"query labels {missing.tolist()} are absent from the database")
    order = index.rank(queries)
    return index.labels[order] == ql[:, None]


def average_precisions(index: RetrievalIndex, queries, query_labels) -> np.ndarray:
    rel = _relevance(index, queries, query_labels).astype(float)
    hits = np.cumsum(rel, axis=1)
    precision_at = hits / np.arange(1, rel.shape[1] + 1)
    return (precision_at * rel).sum(axis=1) / rel.sum(axis=1)


def map_score(index: RetrievalIndex, queries, query_labels) -> float:
    """Mean over queries of full-list average precision (relevance = same label)."""
    return float(np.mean(average_precisions(index, queries, query_labels)))


def topk_precision(index: RetrievalIndex, queries, query_labels, k: int) -> float:
    if not 1 <= k <= len(index.database):
        raise ValueError(f"k={k} outside [1, {len(index.database)}]")
    rel = _relevance(index, queries, query_labels)
    return float(np.mean(rel[:, :k].mean(axis=1)))


def classification_accuracy(logits: np.ndarray, labels) -> float:
    """Fraction of argmax hits; ``np.argmax`` resolves ties to the lowest class."""
    logits = np.asarray(logits, dtype=float)
    if logits.ndim != 2:
        raise ValueError("logits must be N x C")
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def model_accuracy(model, x: np.ndarray, labels) -> float:
    if getattr(model, "head", None) is None:
        raise ValueError("model has no classification head")
    return classification_accuracy(model.logits(x), labels)


def retrieval_report(db_x, db_y, q_x, q_y, top_k: int = 100) -> dict[str, float]:
    k = min(top_k, len(db_x))
    out = {}
    for tag, metric in (("e", "euclidean"), ("c", "cosine")):
        index = RetrievalIndex(db_x, db_y, metric)
        out[f"mAP_{tag}"] = map_score(index, q_x, q_y)
        out[f"top{k}_{tag}"] = topk_precision(index, q_x, q_y, k)
    return out
