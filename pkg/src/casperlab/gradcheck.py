"""Finite-difference verification of the analytic eigengap gradients.

The reference loss is rebuilt from scratch with the k-NN edge set held fixed
(neighbour selection is piecewise constant, so that is the function whose
gradient the analytic path computes). Instances whose spectrum is degenerate
at the gap are skipped and redrawn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import EPS_NORM, EPS_WEIGHT, edge_topology
from .learner import LossGrads, ModelConfig, backward, cross_entropy, cross_entropy_grad, forward, init_params
from .spectral import casper_loss_and_grad


@dataclass
class GradcheckResult:
    feature_errors: list[float]
    model_errors: list[float]
    skipped: int

    @property
    def max_error(self) -> float:
        return max(self.feature_errors + self.model_errors)


def fixed_topology_loss(z: np.ndarray, mask: np.ndarray, g: int) -> float:
    norms = np.maximum(np.linalg.norm(z, axis=1), EPS_NORM)
    cos = (z @ z.T) / np.outer(norms, norms)
    a = np.where(mask, np.maximum(EPS_WEIGHT, cos), 0.0)
    deg = a.sum(axis=1)
    lap = np.eye(len(z)) - a / np.sqrt(np.outer(deg, deg))
    lam = np.linalg.eigvalsh(lap)
    return float(lam[:g].sum() - lam[g])


def central_difference(f, x: np.ndarray, h: float) -> np.ndarray:
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        out[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def check_features(rng, n_instances: int = 20, h: float = 1e-5) -> tuple[list[float], int]:
    errors, skipped = [], 0
    while len(errors) < n_instances:
        n, d = int(rng.integers(8, 25)), int(rng.integers(4, 17))
        k, g = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        z = rng.normal(size=(n, d))
        res = casper_loss_and_grad(z, None, k, g)
        if res.degenerate:
            skipped += 1
            continue
        mask, _ = edge_topology(z, k)
        fd = central_difference(lambda x: fixed_topology_loss(x, mask, g), z.copy(), h)
        errors.append(relative_error(res.grad, fd))
    return errors, skipped


def check_model(rng, n_instances: int = 3, rho: float = 0.7, h: float = 1e-6) -> tuple[list[float], int]:
    """Cross-entropy plus rho times the eigengap loss, differentiated through the whole MLP."""
    errors, skipped = [], 0
    while len(errors) < n_instances:
        cfg = ModelConfig(input_dim=5, n_classes=4, hidden=(7, 6))
        params = init_params(cfg, rng)
        x = rng.normal(size=(12, 5))
        y = rng.integers(0, 4, size=12)
        k, g = 3, 2
        trace = forward(params, x)
        cg = casper_loss_and_grad(trace.features, None, k, g)
        if cg.degenerate:
            skipped += 1
            continue
        mask, _ = edge_topology(trace.features, k)
        _, dl = cross_entropy_grad(trace.logits, y)
        grads = backward(params, trace, LossGrads(dl, rho * cg.grad))
        analytic = np.concatenate([a.ravel() for pair in zip(grads.weights, grads.biases) for a in pair])

        shapes = [a.shape for pair in zip(params.weights, params.biases) for a in pair]

        def total(flat):
            p = params.copy()
            pos = 0
            for i, shape in enumerate(shapes):
                size = int(np.prod(shape))
                target = p.weights[i // 2] if i % 2 == 0 else p.biases[i // 2]
                target[...] = flat[pos:pos + size].reshape(shape)
                pos += size
            t = forward(p, x)
            return cross_entropy(t.logits, y) + rho * fixed_topology_loss(t.features, mask, g)

        fd = central_difference(total, params.flat().copy(), h)
        errors.append(relative_error(analytic, fd))
    return errors, skipped


def run_gradcheck(seed: int = 0, n_instances: int = 20, n_models: int = 3) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    fe, s1 = check_features(rng, n_instances)
    me, s2 = check_model(rng, n_models)
    return GradcheckResult(fe, me, s1 + s2)
