"""Class-incremental training harness: reservoir buffer, replay and the eigengap term.

Randomness is split per purpose so that switching one component off never
shifts the draws of another. Every generator is seeded from
``SeedSequence(run_seed, spawn_key=(purpose, task_index))``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import metrics as M
from .data import Task, TaskStream
from .errors import InsufficientClassesError, TrainingDivergenceError
from .graph import EmbeddingBatch, build_knn_graph
from .learner import (
    LossGrads,
    ModelConfig,
    ModelParams,
    backward_and_step,
    cross_entropy_grad,
    forward,
    init_params,
    save_checkpoint,
)
from .spectral import CasperConfig, casper_batch_loss

log = logging.getLogger(__name__)

# spawn-key purposes
INIT, SHUFFLE, REPLAY, RESERVOIR, CASPER = 1, 2, 3, 4, 5


def purpose_rng(seed: int, purpose: int, task: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose, task)))


class Method(str, Enum):
    ER = "ER"
    ER_CASPER = "ER+CaSpeR"
    FINETUNE = "Finetune"
    JOINT = "Joint"

    @property
    def slug(self) -> str:
        return {"ER": "er", "ER+CaSpeR": "er_casper", "Finetune": "finetune", "Joint": "joint"}[self.value]

    @property
    def replays(self) -> bool:
        return self in (Method.ER, Method.ER_CASPER)


@dataclass(frozen=True)
class TrainConfig:
    method: Method = Method.ER_CASPER
    lr: float = 0.05
    batch_size: int = 32
    epochs: int = 30
    buffer_size: int = 100
    hidden: tuple[int, ...] = (64, 32)
    casper: CasperConfig = field(default_factory=CasperConfig)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1 or self.buffer_size < 1:
            raise ValueError("lr must be >= 0 and batch_size, epochs, buffer_size positive")

    @property
    def casper_active(self) -> bool:
        return self.method is Method.ER_CASPER and self.casper.rho > 0


@dataclass(frozen=True)
class AnalysisConfig:
    knn_ks: tuple[int, ...] = (5, 11)
    snapshot_per_class: int = 20
    fmap_rank: int = 25
    fmap_threshold: float = 0.15


class ReplayBuffer:
    """Fixed-capacity reservoir of (input, label) pairs."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("buffer capacity must be positive")
        self.capacity = capacity
        self.inputs: np.ndarray | None = None
        self.labels = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.seen_count = 0

    def __len__(self):
        return self.size

    def stored(self) -> tuple[np.ndarray, np.ndarray]:
        if self.inputs is None:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return self.inputs[: self.size], self.labels[: self.size]

    def _put(self, slot, x, y):
        if self.inputs is None:
            self.inputs = np.zeros((self.capacity, len(x)))
        self.inputs[slot] = x
        self.labels[slot] = y


def reservoir_update(buffer: ReplayBuffer, item, rng: np.random.Generator) -> ReplayBuffer:
    x, y = item
    if buffer.size < buffer.capacity:
        buffer._put(buffer.size, x, y)
        buffer.size += 1
    else:
        # keep with probability m / (seen + 1), into a uniform slot
        j = int(rng.integers(0, buffer.seen_count + 1))
        if j < buffer.capacity:
            buffer._put(j, x, y)
    buffer.seen_count += 1
    return buffer


@dataclass
class StepLog:
    task: int
    epoch: int
    step: int
    stream: float
    buffer: float
    casper: float
    total: float


def _casper_grads(feats, labels, cfg: CasperConfig, rng):
    """Eigengap loss on buffer features plus the per-row feature gradient."""
    rows_by_class = {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}
    by_class = {c: feats[idx] for c, idx in rows_by_class.items()}
    res = casper_batch_loss(by_class, cfg, rng)
    dfeat = np.zeros_like(feats)
    for (c, i), g in res.grads.items():
        dfeat[rows_by_class[c][i]] += g
    if cfg.grad_clip is not None:
        norms = np.linalg.norm(dfeat, axis=1, keepdims=True)
        over = norms[:, 0] > cfg.grad_clip
        dfeat[over] *= cfg.grad_clip / norms[over]
    return res.loss, dfeat


def train_task(params: ModelParams, task: Task, buffer: ReplayBuffer, cfg: TrainConfig,
               task_index: int = 0) -> tuple[ModelParams, ReplayBuffer, list[StepLog]]:
    """Optimize stream CE + replay CE + rho * eigengap loss over one task.

    Every stream item is offered to the reservoir exactly once, during the
    first epoch, right after the step that used it.
    """
    shuffle_rng = purpose_rng(cfg.seed, SHUFFLE, task_index)
    replay_rng = purpose_rng(cfg.seed, REPLAY, task_index)
    reservoir_rng = purpose_rng(cfg.seed, RESERVOIR, task_index)
    casper_rng = purpose_rng(cfg.seed, CASPER, task_index)
    logs: list[StepLog] = []
    step = 0
    n = len(task)
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = task.inputs[idx], task.labels[idx]
            buf_x, buf_y = buffer.stored()
            use_replay = cfg.method.replays and buffer.size > 0
            use_casper = cfg.casper_active and buffer.size > 0

            parts = [xb]
            if use_replay:
                ridx = replay_rng.integers(0, buffer.size, size=len(idx))
                parts.append(buf_x[ridx])
            if use_casper:
                parts.append(buf_x)
            trace = forward(params, np.concatenate(parts) if len(parts) > 1 else xb)

            nb = len(idx)
            dlogits = np.zeros_like(trace.logits)
            l_stream, dlogits[:nb] = cross_entropy_grad(trace.logits[:nb], yb)
            l_buf = 0.0
            if use_replay:
                l_buf, dlogits[nb:2 * nb] = cross_entropy_grad(trace.logits[nb:2 * nb], buf_y[ridx])
            l_casper = 0.0
            dfeat = None
            if use_casper:
                off = trace.features.shape[0] - buffer.size
                try:
                    l_casper, g = _casper_grads(trace.features[off:], buf_y, cfg.casper, casper_rng)
                    dfeat = np.zeros_like(trace.features)
                    dfeat[off:] = cfg.casper.rho * g
                except InsufficientClassesError:
                    l_casper = 0.0
            total = l_stream + l_buf + cfg.casper.rho * l_casper
            if not np.isfinite(total):
                raise TrainingDivergenceError(f"non-finite loss at task {task_index}, step {step}")
            params = backward_and_step(params, trace, LossGrads(dlogits, dfeat), cfg.lr)
            logs.append(StepLog(task_index, epoch, step, l_stream, l_buf, l_casper, total))
            step += 1
            if epoch == 0:
                for x, y in zip(xb, yb):
                    reservoir_update(buffer, (x, int(y)), reservoir_rng)
    return params, buffer, logs


def predict(params: ModelParams, inputs) -> np.ndarray:
    return forward(params, inputs).logits.argmax(axis=1)


def evaluate(params: ModelParams, stream: TaskStream, upto: int) -> list[float]:
    """Class-IL accuracy (argmax over every class logit) on tasks 0..upto, in percent."""
    return [
        float(100.0 * np.mean(predict(params, stream[i].inputs) == stream[i].labels))
        for i in range(upto + 1)
    ]


@dataclass
class ExperimentReport:
    config: dict
    accuracy: M.AccuracyMatrix
    metrics: dict
    buffer_snapshots: list[EmbeddingBatch]
    test_snapshots: list[tuple[EmbeddingBatch, np.ndarray]]
    loss_log: list[StepLog]
    params: ModelParams | None = None


def _snapshot_indices(test: TaskStream, per_class: int):
    """First ``per_class`` test points of every class, with their task ids."""
    xs, ys, ts = [], [], []
    for ti, task in enumerate(test):
        for c in task.classes:
            pick = np.flatnonzero(task.labels == c)[:per_class]
            xs.append(task.inputs[pick])
            ys.append(task.labels[pick])
            ts.append(np.full(len(pick), ti))
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ts)


def config_dict(cfg: TrainConfig, analysis: AnalysisConfig) -> dict:
    d = asdict(cfg)
    d["method"] = cfg.method.value
    d["hidden"] = list(cfg.hidden)
    a = asdict(analysis)
    a["knn_ks"] = list(analysis.knn_ks)
    return {"train": d, "analysis": a}


def run_experiment(train: TaskStream, test: TaskStream, cfg: TrainConfig,
                   analysis: AnalysisConfig = AnalysisConfig(), out_dir=None,
                   extra_config: dict | None = None) -> ExperimentReport:
    """Train over the whole stream, evaluating after every task.

    Joint collapses the stream into a single task. A reservoir buffer is
    kept for every method so buffer diagnostics exist for all of them; only
    the replay methods train on it.
    """
    n_classes = max(train.classes) + 1
    train_eff = train.merged() if cfg.method is Method.JOINT else train
    test_eff = test.merged() if cfg.method is Method.JOINT else test
    n_tasks = len(train_eff)
    model_cfg = ModelConfig(train[0].inputs.shape[1], n_classes, tuple(cfg.hidden))
    params = init_params(model_cfg, purpose_rng(cfg.seed, INIT))
    buffer = ReplayBuffer(cfg.buffer_size)
    snap_x, snap_y, snap_t = _snapshot_indices(test, analysis.snapshot_per_class)
    all_test_x = np.concatenate([t.inputs for t in test])
    all_test_y = np.concatenate([t.labels for t in test])

    conf = config_dict(cfg, analysis)
    if extra_config:
        conf.update(extra_config)
    report = ExperimentReport(conf, M.AccuracyMatrix(n_tasks), {}, [], [], [])
    try:
        for ti in range(n_tasks):
            params, buffer, logs = train_task(params, train_eff[ti], buffer, cfg, ti)
            report.loss_log.extend(logs)
            report.accuracy.set_row(ti, evaluate(params, test_eff, ti))
            bx, by = buffer.stored()
            report.buffer_snapshots.append(EmbeddingBatch(forward(params, bx).features, by.copy()))
            report.test_snapshots.append((EmbeddingBatch(forward(params, snap_x).features, snap_y), snap_t))
    except TrainingDivergenceError:
        report.params = params
        if out_dir is not None:
            write_report(report, out_dir)
        raise
    report.params = params

    k = cfg.casper.k
    sigmas = [
        M.label_signal_variation(build_knn_graph(b, k)) if len(b) > k else None
        for b in report.buffer_snapshots
    ]
    final_buf = report.buffer_snapshots[-1]
    queries = EmbeddingBatch(forward(params, all_test_x).features, all_test_y)
    report.metrics = {
        "final_average_accuracy": M.final_average_accuracy(report.accuracy),
        "adjusted_forgetting": M.adjusted_forgetting(report.accuracy),
        "sigma_per_task": sigmas,
        "intra_class_variance": M.intra_class_variance(queries),
        "knn_accuracy": {
            str(kk): (M.knn_accuracy(final_buf, queries, kk) if len(final_buf) >= kk else None)
            for kk in analysis.knn_ks
        },
    }
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def _write_batch(path: Path, batch: EmbeddingBatch, tasks=None):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        head = ["label"] + (["task"] if tasks is not None else [])
        w.writerow(head + [f"f{i}" for i in range(batch.features.shape[1])])
        for r in range(len(batch)):
            lead = [int(batch.labels[r])] + ([int(tasks[r])] if tasks is not None else [])
            w.writerow(lead + [repr(float(v)) for v in batch.features[r]])


def write_report(report: ExperimentReport, out_dir) -> Path:
    out = Path(out_dir)
    (out / "buffer_snapshots").mkdir(parents=True, exist_ok=True)
    (out / "test_snapshots").mkdir(exist_ok=True)
    (out / "config.json").write_text(json.dumps(report.config, indent=2, sort_keys=True))
    with (out / "accuracy_matrix.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        t = report.accuracy.n_tasks
        w.writerow(["task"] + [f"after_{j}" for j in range(t)])
        for i in range(t):
            w.writerow([i] + ["" if np.isnan(v) else repr(float(v)) for v in report.accuracy[i]])
    if report.metrics:
        (out / "metrics.json").write_text(json.dumps(report.metrics, indent=2, sort_keys=True))
    for i, b in enumerate(report.buffer_snapshots):
        _write_batch(out / "buffer_snapshots" / f"task_{i}.csv", b)
    for i, (b, tasks) in enumerate(report.test_snapshots):
        _write_batch(out / "test_snapshots" / f"task_{i}.csv", b, tasks)
    with (out / "loss_log.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "epoch", "step", "stream", "buffer", "casper", "total"])
        for s in report.loss_log:
            w.writerow([s.task, s.epoch, s.step, repr(s.stream), repr(s.buffer), repr(s.casper), repr(s.total)])
    if report.params is not None:
        save_checkpoint(out / "checkpoint.json", report.params)
    return out
