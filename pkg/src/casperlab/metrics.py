"""Continual-learning scores and latent-space diagnostics."""

from __future__ import annotations

import logging

import numpy as np

from .errors import InvalidInputError
from .graph import EmbeddingBatch, LatentGraph
from .learner import knn_classify

log = logging.getLogger(__name__)

FORGETTING_EPS = 1e-9


class AccuracyMatrix:
    """Lower-triangular table of percentages: ``acc[i, j]`` is task i after training task j."""

    def __init__(self, n_tasks: int):
        self.values = np.full((n_tasks, n_tasks), np.nan)

    @classmethod
    def from_array(cls, arr) -> "AccuracyMatrix":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise InvalidInputError("accuracy matrix must be square")
        m = cls(arr.shape[0])
        for j in range(arr.shape[0]):
            m.set_row(j, arr[: j + 1, j])
        return m

    @property
    def n_tasks(self) -> int:
        return self.values.shape[0]

    def set_row(self, checkpoint: int, accuracies) -> None:
        """Store the evaluation made after training task ``checkpoint`` on tasks 0..checkpoint."""
        acc = np.asarray(accuracies, dtype=np.float64)
        if acc.shape != (checkpoint + 1,):
            raise InvalidInputError(f"checkpoint {checkpoint} needs {checkpoint + 1} accuracies")
        if np.any(acc < 0) or np.any(acc > 100):
            raise InvalidInputError("accuracies must be percentages in [0, 100]")
        self.values[: checkpoint + 1, checkpoint] = acc

    def __getitem__(self, idx):
        return self.values[idx]


def final_average_accuracy(m: AccuracyMatrix) -> float:
    final = m.values[:, -1]
    if np.any(np.isnan(final)):
        raise InvalidInputError("final column of the accuracy matrix is incomplete")
    return float(final.mean())


def adjusted_forgetting(m: AccuracyMatrix) -> float | None:
    """Mean relative drop from each task's peak accuracy, in [0, 100]; None for one task."""
    t = m.n_tasks
    if t < 2:
        return None
    a = m.values
    total = 0.0
    for i in range(t - 1):
        peak = np.max(a[i, i:t - 1])
        drop = max(0.0, peak - a[i, t - 1])
        total += drop / max(peak, FORGETTING_EPS)
    return float(np.clip(100.0 * total / (t - 1), 0.0, 100.0))


def label_signal_variation(g: LatentGraph) -> float:
    """Total adjacency weight between differently labelled nodes, over ordered pairs."""
    cross = g.labels[:, None] != g.labels[None, :]
    return float(g.adjacency[cross].sum())


def intra_class_variance(batch: EmbeddingBatch) -> float:
    per_class = []
    for c in np.unique(batch.labels):
        f = batch.features[batch.labels == c]
        if len(f) < 2:
            log.warning("class %d has a single sample; excluded from variance", c)
            continue
        per_class.append(f.var(axis=0).mean())
    if not per_class:
        raise InvalidInputError("no class has two or more samples")
    return float(np.mean(per_class))


def knn_accuracy(support: EmbeddingBatch, queries: EmbeddingBatch, k: int) -> float:
    pred = knn_classify(support.features, support.labels, queries.features, k)
    return float(100.0 * np.mean(pred == queries.labels))
