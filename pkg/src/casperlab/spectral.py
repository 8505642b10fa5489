"""Laplacian eigendecomposition, the eigengap loss and its analytic gradient.

The loss on ascending eigenvalues is ``-lam[g] + sum(lam[:g])`` (0-indexed),
which opens the gap after the g-th eigenvalue while pulling the first g
towards zero. Gradients flow back to the latent features through the
normalized Laplacian, the degree matrix and the cosine edge weights; the
k-NN edge selection itself is held fixed.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientClassesError, InvalidInputError, InvalidParameterError
from .graph import (
    EPS_NORM,
    EPS_WEIGHT,
    Laplacian,
    edge_topology,
    inverse_sqrt_degrees,
)

DEGENERACY_TOL = 1e-10


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


@dataclass(frozen=True)
class CasperConfig:
    rho: float = 0.5
    p: int = 4
    t: int = 8
    mc_samples: int = 2
    k: int = 5
    # Per-row norm cap on the feature gradient used for training (None = off).
    # Rows with near-zero degree make D^-1/2 huge, so a single step can blow up.
    grad_clip: float | None = 1.0

    def __post_init__(self):
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise InvalidParameterError("grad_clip must be positive or None")
        if self.rho < 0:
            raise InvalidParameterError("rho must be non-negative")
        if self.p < 2 or self.t < 2:
            raise InvalidParameterError("p and t must both be at least 2")
        if self.mc_samples < 1:
            raise InvalidParameterError("mc_samples must be positive")
        if self.p * self.t < self.k + 1:
            raise InvalidParameterError(f"p*t={self.p * self.t} nodes cannot support k={self.k}")


@dataclass(frozen=True)
class CasperGrad:
    loss: float
    grad: np.ndarray
    eigenvalues: np.ndarray
    degenerate: bool = False


@dataclass
class BatchCasperResult:
    loss: float
    # (class id, row within that class) -> accumulated gradient
    grads: dict
    degenerate: bool = False


def eigh(lap) -> SpectralDecomposition:
    """Full ascending eigendecomposition with a fixed eigenvector sign.

    Each eigenvector is flipped so that its largest-magnitude entry is
    positive (the first such entry on ties).
    """
    mat = lap.matrix if isinstance(lap, Laplacian) else np.asarray(lap, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or mat.shape[0] < 1:
        raise InvalidInputError(f"expected a non-empty square matrix, got shape {mat.shape}")
    scale = max(1.0, float(np.max(np.abs(mat))))
    if np.max(np.abs(mat - mat.T)) > 1e-10 * scale:
        raise InvalidInputError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    pivot = np.argmax(np.abs(vecs), axis=0)
    signs = np.where(vecs[pivot, np.arange(vecs.shape[1])] < 0, -1.0, 1.0)
    return SpectralDecomposition(vals, vecs * signs)


def casper_loss(eigenvalues, g: int) -> float:
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if g < 1 or g + 1 > lam.size:
        raise InvalidParameterError(f"g={g} needs at least g+1 eigenvalues, got {lam.size}")
    return float(-lam[g] + lam[:g].sum())


def _is_degenerate(lam: np.ndarray, g: int) -> bool:
    # the first-g sum is smooth inside a cluster; only the boundaries around lam[g] matter
    if lam[g] - lam[g - 1] < DEGENERACY_TOL:
        return True
    return g + 1 < lam.size and lam[g + 1] - lam[g] < DEGENERACY_TOL


def casper_loss_and_grad(features, labels, k: int, g: int) -> CasperGrad:
    """Eigengap loss of the k-NN LGG over ``features`` and its gradient w.r.t. them.

    ``labels`` only travel along for validation; the loss is unsupervised
    given ``g``.
    """
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or not np.all(np.isfinite(z)):
        raise InvalidInputError("features must be a finite n x d matrix")
    if labels is not None and len(labels) != z.shape[0]:
        raise InvalidInputError("labels must have one entry per feature row")
    n = z.shape[0]
    if g < 1 or g + 1 > n:
        raise InvalidParameterError(f"g={g} needs at least g+1 nodes, got {n}")

    edges, cos = edge_topology(z, k)
    adjacency = np.where(edges, np.maximum(EPS_WEIGHT, cos), 0.0)
    degrees = adjacency.sum(axis=1)
    dis = inverse_sqrt_degrees(degrees)
    s_norm = dis[:, None] * adjacency * dis[None, :]
    lap = np.eye(n) - s_norm
    dec = eigh(0.5 * (lap + lap.T))
    lam = dec.eigenvalues
    loss = casper_loss(lam, g)

    # dloss/dL from first-order perturbation of each selected eigenvalue
    signs = np.zeros(n)
    signs[:g] = 1.0
    signs[g] = -1.0
    u = dec.eigenvectors
    d_lap = (u * signs) @ u.T
    d_snorm = -d_lap

    # through S = D^-1/2 A D^-1/2, with D a function of A's row sums
    with np.errstate(divide="ignore", invalid="ignore"):
        d_deg = np.where(degrees > 0, -(d_snorm * s_norm).sum(axis=1) / degrees, 0.0)
    d_adj = d_snorm * dis[:, None] * dis[None, :] + d_deg[:, None]

    # a_ij and a_ji share one weight; clamped edges pass no gradient
    active = edges & (cos > EPS_WEIGHT)
    d_w = np.where(active, d_adj + d_adj.T, 0.0)

    norms = np.linalg.norm(z, axis=1)
    floored = np.maximum(norms, EPS_NORM)
    unit = z / floored[:, None]
    radial = np.where(norms > EPS_NORM, (d_w * cos).sum(axis=1), 0.0)
    grad = (d_w @ unit - radial[:, None] * unit) / floored[:, None]

    return CasperGrad(loss, grad, lam, _is_degenerate(lam, g))


def casper_batch_loss(
    buffer_features_by_class: Mapping[int, np.ndarray],
    cfg: CasperConfig,
    rng: np.random.Generator,
) -> BatchCasperResult:
    """Monte Carlo estimate of the eigengap loss over random class sub-graphs.

    Each of ``cfg.mc_samples`` draws picks ``cfg.p`` distinct classes and
    ``cfg.t`` exemplars of each, and evaluates the loss with the gap
    enforced at ``p``. Losses and gradients are both weighted by
    ``1 / mc_samples`` and reduced in sample order.
    """
    eligible = sorted(c for c, f in buffer_features_by_class.items() if len(f) >= cfg.t)
    if len(eligible) < cfg.p:
        raise InsufficientClassesError(
            f"need {cfg.p} classes with >= {cfg.t} exemplars, have {len(eligible)}"
        )
    weight = 1.0 / cfg.mc_samples
    total = 0.0
    grads: dict = {}
    degenerate = False
    for _ in range(cfg.mc_samples):
        classes = rng.choice(eligible, size=cfg.p, replace=False)
        keys, rows, labels = [], [], []
        for c in classes.tolist():
            feats = np.asarray(buffer_features_by_class[c], dtype=np.float64)
            picked = rng.choice(len(feats), size=cfg.t, replace=False)
            for i in picked.tolist():
                keys.append((c, i))
                rows.append(feats[i])
                labels.append(c)
        res = casper_loss_and_grad(np.stack(rows), np.asarray(labels), cfg.k, cfg.p)
        total += weight * res.loss
        degenerate = degenerate or res.degenerate
        for key, row in zip(keys, res.grad):
            if key in grads:
                grads[key] = grads[key] + weight * row
            else:
                grads[key] = weight * row
    return BatchCasperResult(total, grads, degenerate)
