"""Post-hoc analyses over saved report directories.

Everything here reads what ``run_experiment`` wrote; nothing is retrained.
Outputs are long-format CSV so they can be plotted directly.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .fmap import fmap_report
from .graph import EmbeddingBatch, build_knn_graph
from .metrics import label_signal_variation


class AnalysisError(ConfigError):
    pass


@dataclass
class RunRecord:
    path: Path
    method: str
    seed: int
    n_tasks: int
    k: int
    metrics: dict
    analysis: dict


def find_runs(paths) -> list[RunRecord]:
    """Every report directory (one holding ``config.json``) at or below the given paths."""
    dirs = []
    for p in map(Path, paths):
        if not p.exists():
            raise AnalysisError(f"{p} does not exist")
        dirs += [c.parent for c in sorted(p.rglob("config.json"))]
    if not dirs:
        raise AnalysisError("no report directories found under " + ", ".join(map(str, paths)))
    runs = []
    for d in dirs:
        conf = json.loads((d / "config.json").read_text())
        with (d / "accuracy_matrix.csv").open() as fh:
            n_tasks = sum(1 for _ in fh) - 1
        mpath = d / "metrics.json"
        runs.append(RunRecord(
            d, conf["train"]["method"], int(conf["train"]["seed"]), n_tasks,
            int(conf["train"]["casper"]["k"]),
            json.loads(mpath.read_text()) if mpath.exists() else {},
            conf.get("analysis", {}),
        ))
    runs.sort(key=lambda r: (r.method, r.seed, str(r.path)))
    check_snapshots(runs)
    return runs


def check_snapshots(runs: list[RunRecord]):
    missing = [
        str(r.path / kind / f"task_{i}.csv")
        for r in runs
        for kind in ("buffer_snapshots", "test_snapshots")
        for i in range(r.n_tasks)
        if not (r.path / kind / f"task_{i}.csv").exists()
    ]
    if missing:
        raise AnalysisError("missing snapshots:\n  " + "\n  ".join(missing))


def read_snapshot(path: Path) -> tuple[EmbeddingBatch, np.ndarray | None]:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    head, body = rows[0], rows[1:]
    n_lead = 2 if head[1] == "task" else 1
    arr = np.array(body, dtype=np.float64).reshape(len(body), len(head))
    labels = arr[:, 0].astype(np.int64)
    tasks = arr[:, 1].astype(np.int64) if n_lead == 2 else None
    return EmbeddingBatch(arr[:, n_lead:], labels), tasks


def _stats(vals) -> tuple[float, float]:
    v = np.asarray(vals, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def _write(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def sigma_curves(runs) -> list[tuple]:
    """Buffer LGG sigma after each task, mean and std across seeds per method."""
    per = defaultdict(lambda: defaultdict(list))
    for r in runs:
        for t in range(r.n_tasks):
            batch, _ = read_snapshot(r.path / "buffer_snapshots" / f"task_{t}.csv")
            if len(batch) > r.k:
                per[r.method][t].append(label_signal_variation(build_knn_graph(batch, r.k)))
    return [
        (m, t, *_stats(v), len(v))
        for m in sorted(per) for t in sorted(per[m]) for v in [per[m][t]]
    ]


def knn_table(runs) -> list[tuple]:
    per = defaultdict(lambda: defaultdict(list))
    for r in runs:
        for k, acc in r.metrics.get("knn_accuracy", {}).items():
            if acc is not None:
                per[r.method][int(k)].append(acc)
    return [(m, k, *_stats(v), len(v)) for m in sorted(per) for k in sorted(per[m]) for v in [per[m][k]]]


def mid_checkpoint(n_tasks: int) -> int:
    """0-based index of the mid-stream checkpoint: after task ceil(T/2)."""
    return (n_tasks + 1) // 2 - 1


def fmap_analysis(runs, rank: int = 25, threshold: float = 0.15):
    """Mid-stream vs final functional maps on test points of tasks seen by mid-stream."""
    multi = [r for r in runs if r.n_tasks >= 2]
    skipped = sorted({r.method for r in runs if r.n_tasks < 2})
    if not multi:
        raise AnalysisError(
            "functional-map comparison needs at least two tasks; every run given is single-task, "
            "so there is no mid-stream checkpoint to compare against"
        )
    per_seed, mats, meta = [], defaultdict(list), {"rank": rank, "threshold": threshold,
                                                   "skipped_single_task": skipped, "methods": {}}
    for r in multi:
        mid = mid_checkpoint(r.n_tasks)
        a, tasks = read_snapshot(r.path / "test_snapshots" / f"task_{mid}.csv")
        b, _ = read_snapshot(r.path / "test_snapshots" / f"task_{r.n_tasks - 1}.csv")
        keep = tasks <= mid
        sa = EmbeddingBatch(a.features[keep], a.labels[keep])
        sb = EmbeddingBatch(b.features[keep], b.labels[keep])
        rr = min(rank, len(sa))
        rep = fmap_report(sa, sb, k=r.k, r=rr, magnitude_threshold=threshold)
        per_seed.append((r.method, r.seed, mid, r.n_tasks - 1, len(sa), rep.od_e,
                         len(rep.degenerate_a) + len(rep.degenerate_b)))
        mats[r.method].append(rep.c_abs)
        m = meta["methods"].setdefault(r.method, {"mid_checkpoint": mid, "points": len(sa), "rank": rr,
                                                  "degenerate": {}})
        if rep.degenerate_a or rep.degenerate_b:
            m["degenerate"][str(r.seed)] = {"mid": rep.degenerate_a, "final": rep.degenerate_b}
    summary, display = [], []
    for method in sorted(mats):
        ods = [row[5] for row in per_seed if row[0] == method]
        summary.append((method, *_stats(ods), len(ods)))
        shapes = {c.shape for c in mats[method]}
        if len(shapes) == 1:
            mean = np.mean(mats[method], axis=0)
            for (i, j), v in np.ndenumerate(mean):
                display.append((method, i, j, float(v), float(v) if v > threshold else 0.0))
    return per_seed, summary, display, meta


def analyze(paths, out_dir, rank: int | None = None, threshold: float | None = None) -> Path:
    """Write sigma, k-NN and functional-map tables for the given report directories.

    The sigma and k-NN tables are written before the functional-map step so a
    refused comparison still leaves them behind. Rank and threshold default to
    the values recorded in the first run's config.
    """
    runs = find_runs(paths)
    recorded = runs[0].analysis
    rank = rank if rank is not None else int(recorded.get("fmap_rank", 25))
    threshold = threshold if threshold is not None else float(recorded.get("fmap_threshold", 0.15))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "sigma_curve.csv", ["method", "task", "sigma_mean", "sigma_std", "n"], sigma_curves(runs))
    _write(out / "knn_table.csv", ["method", "k", "accuracy_mean", "accuracy_std", "n"], knn_table(runs))
    per_seed, summary, display, meta = fmap_analysis(runs, rank, threshold)
    _write(out / "fmap.csv",
           ["method", "seed", "mid_checkpoint", "final_checkpoint", "points", "od_e", "degenerate_pairs"],
           per_seed)
    _write(out / "fmap_od_e.csv", ["method", "od_e_mean", "od_e_std", "n"], summary)
    _write(out / "fmap_display.csv", ["method", "row", "col", "c_abs_mean", "display"], display)
    (out / "fmap_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out
