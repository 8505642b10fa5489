"""Experiment configuration: TOML files, dotted-path overrides and run manifests.

A config is a nested table with four sections::

    [data]      generator, n_classes, input_dim, ... (DatasetConfig fields)
    [train]     methods, lr, batch_size, epochs, buffer_size, hidden
    [casper]    rho, p, t, mc_samples, k, grad_clip
    [analysis]  knn_ks, snapshot_per_class, fmap_rank, fmap_threshold

plus a ``seeds`` list at top level. Anything not given falls back to the
frozen benchmark defaults in ``DEFAULTS``.
"""

from __future__ import annotations

import copy
import json
import subprocess
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .data import DatasetConfig
from .errors import ConfigError
from .replay import AnalysisConfig, Method, TrainConfig
from .spectral import CasperConfig

# The default benchmark, calibrated once and then frozen (mirrors configs/bench.toml).
DEFAULTS: dict[str, Any] = {
    "seeds": [0],
    "workers": 1,
    "data": {
        "generator": "gaussian_blobs",
        "n_classes": 10,
        "input_dim": 16,
        "train_per_class": 100,
        "test_per_class": 100,
        "separation": 3.5,
        "noise": 1.0,
        "n_tasks": 5,
        "classes_per_task": 2,
    },
    "train": {
        "methods": ["ER", "ER+CaSpeR", "Finetune", "Joint"],
        "lr": 0.05,
        "batch_size": 16,
        "epochs": 30,
        "buffer_size": 100,
        "hidden": [64, 32],
    },
    "casper": {"rho": 1.5, "p": 2, "t": 4, "mc_samples": 16, "k": 5, "grad_clip": 1.0},
    "analysis": {"knn_ks": [5, 11], "snapshot_per_class": 20, "fmap_rank": 25, "fmap_threshold": 0.15},
}

_DATA_FIELDS = {f.name for f in fields(DatasetConfig)}
_CASPER_FIELDS = {f.name for f in fields(CasperConfig)}
_ANALYSIS_FIELDS = {f.name for f in fields(AnalysisConfig)}
_TRAIN_FIELDS = {"methods", "lr", "batch_size", "epochs", "buffer_size", "hidden"}
ALLOWED = {
    "data": _DATA_FIELDS,
    "train": _TRAIN_FIELDS,
    "casper": _CASPER_FIELDS,
    "analysis": _ANALYSIS_FIELDS,
}
TOP_LEVEL = {"seeds", "workers"}


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        path = f"{prefix}{key}"
        if isinstance(val, dict):
            if key not in ALLOWED:
                raise ConfigError(f"unknown section '{path}'")
            out[key] = _merge(out.get(key, {}), val, path + ".")
        else:
            _check_key(path)
            out[key] = val
    return out


def _check_key(path: str):
    parts = path.split(".")
    if len(parts) == 1 and parts[0] in TOP_LEVEL:
        return
    if len(parts) == 2 and parts[0] in ALLOWED and parts[1] in ALLOWED[parts[0]]:
        return
    raise ConfigError(f"unknown config key '{path}'")


def parse_value(text: str):
    """Interpret an override value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(conf: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not of the form key=value")
    path, text = (s.strip() for s in assignment.split("=", 1))
    _check_key(path)
    out = copy.deepcopy(conf)
    node = out
    *parents, leaf = path.split(".")
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = parse_value(text)
    return out


def load_config(path=None, overrides=()) -> dict:
    """Read a TOML file (or a run manifest), layer it over the defaults, then apply overrides."""
    conf = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if path.suffix == ".json":
            try:
                raw = json.loads(text)["config"]
            except (json.JSONDecodeError, KeyError) as e:
                raise ConfigError(f"{path}: not a run manifest ({e})") from e
        else:
            try:
                raw = tomllib.loads(text)
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"{path}: {e}") from e
        conf = _merge(conf, raw)
    for ov in overrides:
        conf = apply_override(conf, ov)
    validate(conf)
    return conf


def validate(conf: dict):
    """Build every typed config once so bad values fail before any training."""
    try:
        dataset_config(conf)
        for m in conf["train"]["methods"]:
            train_config(conf, Method(m), 0)
        analysis_config(conf)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"invalid config value: {e}") from e
    seeds = conf["seeds"]
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    if not isinstance(conf["workers"], int) or conf["workers"] < 1:
        raise ConfigError("workers must be a positive integer")


def dataset_config(conf: dict) -> DatasetConfig:
    return DatasetConfig(**conf["data"])


def train_config(conf: dict, method: Method, seed: int) -> TrainConfig:
    t = conf["train"]
    return TrainConfig(
        method=method,
        lr=float(t["lr"]),
        batch_size=int(t["batch_size"]),
        epochs=int(t["epochs"]),
        buffer_size=int(t["buffer_size"]),
        hidden=tuple(int(h) for h in t["hidden"]),
        casper=CasperConfig(**conf["casper"]),
        seed=seed,
    )


def analysis_config(conf: dict) -> AnalysisConfig:
    a = dict(conf["analysis"])
    a["knn_ks"] = tuple(a["knn_ks"])
    return AnalysisConfig(**a)


def parse_seeds(text: str) -> list[int]:
    """``"1..5"`` -> [1, 2, 3, 4, 5]; ``"0,3,7"`` -> [0, 3, 7]."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise ConfigError(f"bad seed list '{text}'") from e
    if not seeds or min(seeds) < 0:
        raise ConfigError(f"bad seed list '{text}'")
    return seeds


def version_string() -> str:
    """``git describe`` when run from a checkout, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    config: dict
    seeds: list[int]
    version: str
    started: str
    finished: str | None
    layout: dict

    @classmethod
    def begin(cls, conf: dict) -> "RunManifest":
        layout = {
            "runs": "<method>/seed_<seed>/",
            "summary": "summary.csv",
            "manifest": "manifest.json",
        }
        return cls(conf, list(conf["seeds"]), version_string(), _now(), None, layout)

    def finish(self):
        self.finished = _now()

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True))
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")
