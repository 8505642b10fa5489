"""Latent geometry graph (LGG) construction and its normalized Laplacian.

The LGG is a k-NN graph over latent feature vectors. Edges are selected by
cosine similarity and weighted by it, clamped below at ``EPS_WEIGHT`` so
every selected edge keeps a strictly positive weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, InvalidParameterError

EPS_WEIGHT = 1e-6
EPS_NORM = 1e-12
DEFAULT_K = 5


@dataclass(frozen=True)
class EmbeddingBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise InvalidInputError(f"features must be a non-empty n x d matrix, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise InvalidInputError("features contain NaN or Inf")
        if labels.shape != (feats.shape[0],):
            raise InvalidInputError("labels must have one entry per feature row")
        if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0):
            raise InvalidInputError("labels must be non-negative integers")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    def __len__(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class LatentGraph:
    adjacency: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InvalidInputError("adjacency must be square")
        if not np.array_equal(a, a.T):
            raise InvalidInputError("adjacency must be exactly symmetric")
        if np.any(np.diag(a) != 0):
            raise InvalidInputError("adjacency must have a zero diagonal")
        if np.any(a < 0) or np.any(a > 1):
            raise InvalidInputError("adjacency weights must lie in [0, 1]")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (a.shape[0],):
            raise InvalidInputError("one label per node required")
        object.__setattr__(self, "adjacency", a)
        object.__setattr__(self, "labels", labels)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]


@dataclass(frozen=True)
class Laplacian:
    matrix: np.ndarray
    degrees: np.ndarray = field(repr=False)


def cosine_similarity(features: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity with each norm floored at ``EPS_NORM``."""
    norms = np.maximum(np.linalg.norm(features, axis=1), EPS_NORM)
    unit = features / norms[:, None]
    sim = unit @ unit.T
    return np.clip(sim, -1.0, 1.0)


def knn_mask(sim: np.ndarray, k: int) -> np.ndarray:
    """Directed k-NN selection: ``mask[i, j]`` is True when j is among i's k nearest.

    Self is excluded and ties go to the lower node index.
    """
    n = sim.shape[0]
    scores = sim.copy()
    np.fill_diagonal(scores, -np.inf)
    # stable sort on the negated score keeps lower indices first among ties
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    mask = np.zeros((n, n), dtype=bool)
    mask[np.arange(n)[:, None], order] = True
    return mask


def edge_topology(features: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(undirected edge mask, cosine matrix)`` for the k-NN graph."""
    n = features.shape[0]
    if k < 1:
        raise InvalidParameterError(f"k must be positive, got {k}")
    if k >= n:
        raise InvalidParameterError(f"k={k} must be smaller than the node count {n}")
    sim = cosine_similarity(features)
    directed = knn_mask(sim, k)
    return directed | directed.T, sim


def build_knn_graph(batch: EmbeddingBatch, k: int = DEFAULT_K) -> LatentGraph:
    edges, sim = edge_topology(batch.features, k)
    # union symmetrization; the weight is symmetric so max(W, W^T) is the masked weight
    adjacency = np.where(edges, np.maximum(EPS_WEIGHT, sim), 0.0)
    return LatentGraph(adjacency, batch.labels)


def inverse_sqrt_degrees(degrees: np.ndarray) -> np.ndarray:
    out = np.zeros_like(degrees)
    pos = degrees > 0
    out[pos] = 1.0 / np.sqrt(degrees[pos])
    return out


def normalized_laplacian(g: LatentGraph) -> Laplacian:
    """L = I - D^-1/2 A D^-1/2, with isolated nodes mapped to identity rows."""
    a = g.adjacency
    degrees = a.sum(axis=1)
    dis = inverse_sqrt_degrees(degrees)
    lap = np.eye(a.shape[0]) - dis[:, None] * a * dis[None, :]
    lap = 0.5 * (lap + lap.T)
    return Laplacian(lap, degrees)


def connected_components(g: LatentGraph, threshold: float = 0.0) -> int:
    """Count components of the graph restricted to edges heavier than ``threshold``."""
    if threshold < 0:
        raise InvalidParameterError("threshold must be non-negative")
    n = g.n_nodes
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    count = n
    rows, cols = np.nonzero(np.triu(g.adjacency > threshold, k=1))
    for i, j in zip(rows.tolist(), cols.tolist()):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
            count -= 1
    return count
