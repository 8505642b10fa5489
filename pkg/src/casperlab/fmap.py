"""Functional maps between two LGGs built over the same points."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .graph import DEFAULT_K, EmbeddingBatch, build_knn_graph, normalized_laplacian
from .spectral import SpectralDecomposition, eigh

DEFAULT_RANK = 25
DEFAULT_THRESHOLD = 0.15
DEGENERATE_GAP = 1e-8


@dataclass(frozen=True)
class FunctionalMap:
    matrix: np.ndarray


@dataclass
class FmapReport:
    c_abs: np.ndarray
    display: np.ndarray
    od_e: float
    rank: int
    threshold: float
    # positions i where eigenvalue i and i+1 of either graph nearly coincide
    degenerate_a: list[int] = field(default_factory=list)
    degenerate_b: list[int] = field(default_factory=list)

    def meta(self) -> dict:
        return {
            "od_e": self.od_e,
            "r": self.rank,
            "threshold": self.threshold,
            "degenerate_a": self.degenerate_a,
            "degenerate_b": self.degenerate_b,
        }


def functional_map(dec_a: SpectralDecomposition, dec_b: SpectralDecomposition,
                   correspondence=None, r: int = DEFAULT_RANK) -> FunctionalMap:
    """``C[i, j] = <phi_i^a, phi_j^b o T>`` over the first ``r`` eigenvectors.

    ``correspondence[i]`` is the node of graph b matched to node i of graph a;
    None means the identity.
    """
    phi_a, phi_b = dec_a.eigenvectors, dec_b.eigenvectors
    n = phi_a.shape[0]
    if phi_b.shape[0] != n:
        raise InvalidInputError(f"graphs differ in size ({n} vs {phi_b.shape[0]})")
    if r < 1 or r > n:
        raise InvalidInputError(f"r={r} must lie in [1, {n}]")
    perm = np.arange(n) if correspondence is None else np.asarray(correspondence, dtype=np.int64)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise InvalidInputError("correspondence is not a permutation of the nodes")
    return FunctionalMap(phi_a[:, :r].T @ phi_b[perm, :r])


def off_diagonal_energy(c) -> float:
    mat = np.abs(c.matrix if isinstance(c, FunctionalMap) else np.asarray(c, dtype=np.float64))
    norm = np.linalg.norm(mat)
    if norm == 0:
        raise InvalidInputError("functional map is all zeros")
    return float((mat.sum() - np.trace(mat)) / norm)


def near_degenerate(eigenvalues, r: int, gap: float = DEGENERATE_GAP) -> list[int]:
    lam = np.asarray(eigenvalues)[:r]
    return np.flatnonzero(np.diff(lam) < gap).tolist()


def fmap_report(snapshot_a: EmbeddingBatch, snapshot_b: EmbeddingBatch, k: int = DEFAULT_K,
                r: int = DEFAULT_RANK, magnitude_threshold: float = DEFAULT_THRESHOLD) -> FmapReport:
    """Compare the LGGs of two feature snapshots of the same ordered points."""
    if not np.array_equal(snapshot_a.labels, snapshot_b.labels):
        raise InvalidInputError("snapshots do not describe the same ordered points")
    dec_a = eigh(normalized_laplacian(build_knn_graph(snapshot_a, k)))
    dec_b = eigh(normalized_laplacian(build_knn_graph(snapshot_b, k)))
    c_abs = np.abs(functional_map(dec_a, dec_b, None, r).matrix)
    display = np.where(c_abs > magnitude_threshold, c_abs, 0.0)
    return FmapReport(
        c_abs=c_abs,
        display=display,
        od_e=off_diagonal_energy(c_abs),
        rank=r,
        threshold=magnitude_threshold,
        degenerate_a=near_degenerate(dec_a.eigenvalues, r),
        degenerate_b=near_degenerate(dec_b.eigenvalues, r),
    )
