"""A small MLP classifier with hand-written reverse-mode gradients and SGD."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, TrainingDivergenceError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    n_classes: int
    hidden: tuple[int, ...] = (64, 32)

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.n_classes]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class ModelParams:
    """Extractor layers followed by the linear head (always the last entry)."""

    config: ModelConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    features: np.ndarray
    logits: np.ndarray


@dataclass
class LossGrads:
    dlogits: np.ndarray | None = None
    dfeatures: np.ndarray | None = None


@dataclass
class ParamGrads:
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    weights, biases = [], []
    for fan_in, fan_out in config.layer_dims:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(config, weights, biases)


def forward(params: ModelParams, inputs) -> ForwardTrace:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.config.input_dim:
        raise InvalidInputError(
            f"expected inputs of width {params.config.input_dim}, got shape {x.shape}"
        )
    pre, acts = [], []
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        a = h @ w + b
        h = np.maximum(a, 0.0)
        pre.append(a)
        acts.append(h)
    logits = h @ params.weights[-1] + params.biases[-1]
    return ForwardTrace(x, pre, acts, h, logits)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_labels(logits, labels):
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise InvalidInputError("one label per logit row required")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InvalidInputError(f"labels must lie in [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def cross_entropy(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def cross_entropy_grad(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(logits, labels)
    n = len(labels)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def backward(params: ModelParams, trace: ForwardTrace, loss_grads: LossGrads) -> ParamGrads:
    """Reverse pass. ``dfeatures`` is added to the head's feature gradient before the extractor."""
    dlogits = loss_grads.dlogits
    if dlogits is None:
        dlogits = np.zeros_like(trace.logits)
    dw = [np.zeros_like(w) for w in params.weights]
    db = [np.zeros_like(b) for b in params.biases]
    dw[-1] = trace.features.T @ dlogits
    db[-1] = dlogits.sum(axis=0)
    dh = dlogits @ params.weights[-1].T
    if loss_grads.dfeatures is not None:
        if loss_grads.dfeatures.shape != trace.features.shape:
            raise InvalidInputError("feature gradient shape does not match the trace")
        dh = dh + loss_grads.dfeatures
    for layer in range(len(params.weights) - 2, -1, -1):
        da = dh * (trace.pre_activations[layer] > 0)
        below = trace.activations[layer - 1] if layer > 0 else trace.inputs
        dw[layer] = below.T @ da
        db[layer] = da.sum(axis=0)
        if layer > 0:
            dh = da @ params.weights[layer].T
    return ParamGrads(dw, db)


def sgd_step(params: ModelParams, grads: ParamGrads, lr: float) -> ModelParams:
    for g in (*grads.weights, *grads.biases):
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient encountered; aborting update")
    if lr == 0:
        return params.copy()
    return ModelParams(
        params.config,
        [w - lr * g for w, g in zip(params.weights, grads.weights)],
        [b - lr * g for b, g in zip(params.biases, grads.biases)],
    )


def backward_and_step(params: ModelParams, trace: ForwardTrace, loss_grads: LossGrads, lr: float) -> ModelParams:
    return sgd_step(params, backward(params, trace, loss_grads), lr)


def knn_classify(support_features, support_labels, query_features, k: int) -> np.ndarray:
    """Majority vote over the k Euclidean-nearest supports.

    Vote ties go to the smaller summed distance, then to the lower class id.
    Distance ties at the k-th neighbour are resolved by class id, so the
    result does not depend on the order of the support rows.
    """
    s = np.asarray(support_features, dtype=np.float64)
    s_lab = np.asarray(support_labels, dtype=np.int64)
    q = np.asarray(query_features, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] == 0:
        raise InvalidInputError("support set is empty")
    if k < 1 or k > s.shape[0]:
        raise InvalidInputError(f"k={k} must lie in [1, {s.shape[0]}]")
    if q.ndim != 2 or q.shape[1] != s.shape[1]:
        raise InvalidInputError("query and support widths differ")
    dist = np.sqrt(((q[:, None, :] - s[None, :, :]) ** 2).sum(axis=2))
    classes = np.unique(s_lab)
    preds = np.empty(q.shape[0], dtype=np.int64)
    for row in range(q.shape[0]):
        order = np.lexsort((s_lab, dist[row]))[:k]
        near_lab, near_dist = s_lab[order], dist[row, order]
        counts = np.array([(near_lab == c).sum() for c in classes])
        sums = np.array([near_dist[near_lab == c].sum() for c in classes])
        cand = np.flatnonzero(counts == counts.max())
        winner = cand[np.lexsort((classes[cand], sums[cand]))[0]]
        preds[row] = classes[winner]
    return preds


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    cfg = params.config
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": {"input_dim": cfg.input_dim, "n_classes": cfg.n_classes, "hidden": list(cfg.hidden)},
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
    }
    if extra:
        payload["extra"] = extra
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> ModelParams:
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {payload.get('version')!r}")
    c = payload["config"]
    cfg = ModelConfig(c["input_dim"], c["n_classes"], tuple(c["hidden"]))
    weights = [np.asarray(w, dtype=np.float64).reshape(shape) for w, shape in zip(payload["weights"], cfg.layer_dims)]
    biases = [np.asarray(b, dtype=np.float64) for b in payload["biases"]]
    return ModelParams(cfg, weights, biases)
