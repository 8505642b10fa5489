"""Run a (method, seed) grid and aggregate the per-run reports into ``summary.csv``."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import RunManifest, analysis_config, dataset_config, train_config
from .data import generate
from .replay import Method, run_experiment

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    "method", "seed", "final_average_accuracy", "adjusted_forgetting",
    "final_sigma", "knn_5", "knn_11", "intra_class_variance",
]


def run_dir(root, method: Method, seed: int) -> Path:
    return Path(root) / method.slug / f"seed_{seed}"


def run_one(conf: dict, method: str, seed: int, root) -> Path:
    """One experiment; the data stream depends only on the seed, never on the method."""
    method = Method(method)
    train, test = generate(dataset_config(conf), seed=seed)
    out = run_dir(root, method, seed)
    log.info("running %s seed %d -> %s", method.value, seed, out)
    extra = {"data": conf["data"], "seed": seed}
    run_experiment(train, test, train_config(conf, method, seed), analysis_config(conf),
                   out_dir=out, extra_config=extra)
    return out


def run_grid(conf: dict, root, workers: int | None = None) -> Path:
    """Every configured method for every seed, then ``summary.csv`` and ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.begin(conf)
    jobs = [(m, s) for m in conf["train"]["methods"] for s in conf["seeds"]]
    workers = workers or conf.get("workers", 1)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(run_one, conf, m, s, root) for m, s in jobs]
            dirs = [f.result() for f in futures]
    else:
        dirs = [run_one(conf, m, s, root) for m, s in jobs]
    write_summary(dirs, root / "summary.csv")
    manifest.finish()
    manifest.write(root)
    return root


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def summary_row(run: Path) -> dict:
    """Summary fields for one report directory, read back from its files."""
    conf = json.loads((run / "config.json").read_text())
    met = json.loads((run / "metrics.json").read_text())
    knn = met.get("knn_accuracy", {})
    return {
        "method": conf["train"]["method"],
        "seed": conf["train"]["seed"],
        "final_average_accuracy": _fmt(met["final_average_accuracy"]),
        "adjusted_forgetting": _fmt(met["adjusted_forgetting"]),
        "final_sigma": _fmt(met["sigma_per_task"][-1]),
        "knn_5": _fmt(knn.get("5")),
        "knn_11": _fmt(knn.get("11")),
        "intra_class_variance": _fmt(met["intra_class_variance"]),
    }


def write_summary(run_dirs, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for run in run_dirs:
            w.writerow(summary_row(Path(run)))
    return path


def read_summary(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        for col in SUMMARY_COLUMNS[2:]:
            r[col] = float(r[col]) if r[col] != "" else None
    return rows
