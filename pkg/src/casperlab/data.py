"""Synthetic and CSV-backed class-incremental datasets."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GenerationError, InvalidInputError, InvalidPartitionError, LoadError

GENERATORS = ("gaussian_blobs", "concentric_rings", "csv")
MAX_MEAN_ATTEMPTS = 10_000


@dataclass(frozen=True)
class Task:
    inputs: np.ndarray
    labels: np.ndarray

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(np.unique(self.labels).tolist())

    def __len__(self):
        return len(self.labels)


class TaskStream:
    """Ordered tasks with pairwise disjoint label sets."""

    def __init__(self, tasks):
        self.tasks = list(tasks)
        seen: set[int] = set()
        for i, task in enumerate(self.tasks):
            if len(task) == 0:
                raise InvalidPartitionError(f"task {i} is empty")
            overlap = seen.intersection(task.classes)
            if overlap:
                raise InvalidPartitionError(f"task {i} repeats classes {sorted(overlap)}")
            seen.update(task.classes)

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i) -> Task:
        return self.tasks[i]

    def __iter__(self):
        return iter(self.tasks)

    @property
    def classes(self) -> list[int]:
        return sorted(c for t in self.tasks for c in t.classes)

    def merged(self) -> "TaskStream":
        """All tasks collapsed into one (the joint-training view)."""
        return TaskStream([Task(
            np.concatenate([t.inputs for t in self.tasks]),
            np.concatenate([t.labels for t in self.tasks]),
        )])


@dataclass(frozen=True)
class DatasetConfig:
    generator: str = "gaussian_blobs"
    n_classes: int = 10
    input_dim: int = 16
    train_per_class: int = 100
    test_per_class: int = 100
    separation: float = 4.0
    noise: float = 1.0
    n_tasks: int = 5
    classes_per_task: int = 2
    seed: int | None = None
    csv_path: str | None = None
    label_column: str = "label"
    test_ratio: float = 0.5

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise InvalidInputError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.generator != "csv":
            if self.n_classes != self.n_tasks * self.classes_per_task:
                raise InvalidInputError("n_classes must equal n_tasks * classes_per_task")
            if self.separation <= 0:
                raise InvalidInputError("separation must be positive")
            if self.noise < 0:
                raise InvalidInputError("noise must be non-negative")
        elif not self.csv_path:
            raise InvalidInputError("csv generator needs csv_path")


def _split_tasks(x, y, classes_per_task):
    classes = np.unique(y)
    tasks = []
    for start in range(0, len(classes), classes_per_task):
        chunk = classes[start:start + classes_per_task]
        keep = np.isin(y, chunk)
        tasks.append(Task(x[keep], y[keep]))
    return TaskStream(tasks)


def _blob_means(cfg: DatasetConfig, rng: np.random.Generator) -> np.ndarray:
    means: list[np.ndarray] = []
    for c in range(cfg.n_classes):
        for _ in range(MAX_MEAN_ATTEMPTS):
            v = rng.normal(size=cfg.input_dim)
            v *= cfg.separation / np.linalg.norm(v)
            if all(np.linalg.norm(v - m) >= cfg.separation for m in means):
                means.append(v)
                break
        else:
            raise GenerationError(
                f"could not place class {c} at pairwise distance >= {cfg.separation} "
                f"after {MAX_MEAN_ATTEMPTS} attempts"
            )
    return np.stack(means)


def _sample_blobs(cfg, rng, means, per_class):
    x = np.repeat(means, per_class, axis=0) + cfg.noise * rng.normal(size=(cfg.n_classes * per_class, cfg.input_dim))
    y = np.repeat(np.arange(cfg.n_classes), per_class)
    return x, y


def _sample_rings(cfg, rng, per_class):
    if cfg.input_dim < 2:
        raise GenerationError("concentric rings need input_dim >= 2")
    n = cfg.n_classes * per_class
    y = np.repeat(np.arange(cfg.n_classes), per_class)
    radius = (y + 1) * cfg.separation
    angle = rng.uniform(0, 2 * np.pi, size=n) + cfg.noise * rng.normal(size=n) / (y + 1)
    x = cfg.noise * rng.normal(size=(n, cfg.input_dim))
    x[:, 0] += radius * np.cos(angle)
    x[:, 1] += radius * np.sin(angle)
    return x, y


def generate(cfg: DatasetConfig, seed: int | None = None) -> tuple[TaskStream, TaskStream]:
    """Build (train, test) streams; classes are assigned to tasks in ascending id order.

    ``seed`` is used only when the config does not pin its own.
    """
    if cfg.generator == "csv":
        return load_csv(cfg.csv_path, cfg.label_column, cfg.classes_per_task, cfg.test_ratio,
                        cfg.seed if cfg.seed is not None else (seed or 0))
    root = cfg.seed if cfg.seed is not None else seed
    if root is None:
        raise InvalidInputError("a data seed is required")
    rng = np.random.default_rng(np.random.SeedSequence(root, spawn_key=(0xDA7A,)))
    if cfg.generator == "gaussian_blobs":
        means = _blob_means(cfg, rng)
        train = _sample_blobs(cfg, rng, means, cfg.train_per_class)
        test = _sample_blobs(cfg, rng, means, cfg.test_per_class)
    else:
        train = _sample_rings(cfg, rng, cfg.train_per_class)
        test = _sample_rings(cfg, rng, cfg.test_per_class)
    return (_split_tasks(*train, cfg.classes_per_task), _split_tasks(*test, cfg.classes_per_task))


def _parse_partition(partition, classes):
    if partition is None:
        partition = 2
    if isinstance(partition, int):
        return [list(classes[i:i + partition]) for i in range(0, len(classes), partition)]
    groups = [list(map(int, g)) for g in partition]
    flat = [c for g in groups for c in g]
    if len(flat) != len(set(flat)):
        raise InvalidPartitionError("task label sets in the partition overlap")
    missing = set(flat) - set(classes)
    if missing:
        raise InvalidPartitionError(f"partition names unknown classes {sorted(missing)}")
    return groups


def load_csv(path, label_column: str = "label", partition=None, test_ratio: float = 0.5,
             seed: int = 0) -> tuple[TaskStream, TaskStream]:
    """Load a labelled CSV into standardized, stratified train/test task streams.

    ``partition`` is either a list of class-id lists (one per task) or an
    integer number of classes per task taken in ascending id order.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = list(reader)
    except (OSError, StopIteration) as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if label_column not in header:
        raise LoadError(f"label column {label_column!r} not found in {path}")
    li = header.index(label_column)
    feat_cols = [i for i in range(len(header)) if i != li]
    raw_labels, feats = [], []
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise LoadError(f"row {r} has {len(row)} fields, expected {len(header)}")
        try:
            vals = [float(row[i]) for i in feat_cols]
        except ValueError as exc:
            raise LoadError(f"row {r}: non-numeric value ({exc})") from exc
        if row[li].strip() == "" or not np.all(np.isfinite(vals)):
            raise LoadError(f"row {r}: missing or NaN value")
        raw_labels.append(row[li].strip())
        feats.append(vals)
    x = np.asarray(feats, dtype=np.float64).reshape(len(rows), len(feat_cols))
    try:
        y = np.asarray([int(float(v)) for v in raw_labels], dtype=np.int64)
    except ValueError:
        _, y = np.unique(np.asarray(raw_labels), return_inverse=True)
    if y.size and y.min() < 0:
        raise LoadError("labels must be non-negative")

    rng = np.random.default_rng(seed)
    test_mask = np.zeros(len(y), dtype=bool)
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        n_test = int(round(len(idx) * test_ratio))
        if len(idx) >= 2:
            n_test = min(max(n_test, 1), len(idx) - 1)
        test_mask[idx[:n_test]] = True
    mean = x[~test_mask].mean(axis=0)
    std = x[~test_mask].std(axis=0)
    std[std == 0] = 1.0
    x = (x - mean) / std

    groups = _parse_partition(partition, np.unique(y).tolist())

    def stream(mask):
        return TaskStream([Task(x[mask & np.isin(y, g)], y[mask & np.isin(y, g)]) for g in groups])

    return stream(~test_mask), stream(test_mask)


def write_csv(path, inputs, labels) -> None:
    """Write features and labels using the ``label, f0..f{d-1}`` schema."""
    inputs = np.asarray(inputs)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", *[f"f{i}" for i in range(inputs.shape[1])]])
        for lab, row in zip(np.asarray(labels).tolist(), inputs.tolist()):
            w.writerow([lab, *[repr(v) for v in row]])
