"""Experiment runner for the data-availability settings, with role tracking,
metrics and seed-bootstrapped confidence intervals."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np
from scipy.stats import rankdata

from . import __version__
from .learners import Loss, TrainConfig
from .taskgen import TASK_BUILDERS, build_task
from .twostage import (
    BASELINE_SETTINGS,
    Setting,
    fit_baseline,
    fit_two_stage,
    predict,
)
from .world import PIKind, SampleSet, load_json

RESULT_FORMAT = "dalupi-results/1"
METRICS = ("accuracy", "auc")
SPLITS = ("source", "target")

ROLE_NAMES = (
    "source_labeled",
    "source_pi",
    "target_pi",
    "target_unlabeled",
    "test_source",
    "test_target",
    "target_labeled",
)

# data each setting may read while training
PERMITTED_ROLES: dict[Setting, frozenset[str]] = {
    Setting.SL_S: frozenset({"source_labeled.x", "source_labeled.y"}),
    Setting.SL_T: frozenset({"target_labeled.x", "target_labeled.y"}),
    Setting.LUPI: frozenset({"source_labeled.x", "source_labeled.w", "source_labeled.y"}),
    Setting.DALUPI_T: frozenset({"source_labeled.w", "source_labeled.y", "target_pi.x", "target_pi.w"}),
    Setting.DALUPI_ST: frozenset({
        "source_labeled.x", "source_labeled.w", "source_labeled.y",
        "target_pi.x", "target_pi.w", "source_pi.x", "source_pi.w",
    }),
}


class ConfigError(ValueError):
    """One or more problems found before any training started."""

    def __init__(self, problems: list[str]):
        super().__init__("experiment configuration is invalid:\n  - " + "\n  - ".join(problems))
        self.problems = problems


class AccessViolation(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Role tracking
# ---------------------------------------------------------------------------


class _RoleProxy:
    """Wraps one data role and records which of its fields are read."""

    def __init__(self, obj, name: str, log: set[str]):
        self._obj, self._name, self._log = obj, name, log

    def __getattr__(self, attr: str):
        value = getattr(self._obj, attr)
        if attr in ("x", "w", "y"):
            self._log.add(f"{self._name}.{attr}")
        return value

    def __len__(self) -> int:
        return len(self._obj)


class TrackedSampleSet:
    """Read-only view of a :class:`SampleSet` that logs every role field read.

    Sizes (``len``) and non-data attributes such as ``metadata`` are not
    logged.  A bare array role such as ``target_unlabeled`` is logged on
    access.
    """

    def __init__(self, data: SampleSet):
        self._data = data
        self.accessed: set[str] = set()

    def __getattr__(self, name: str):
        value = getattr(self._data, name)
        if name not in ROLE_NAMES or value is None:
            return value
        if isinstance(value, np.ndarray):
            self.accessed.add(name)
            return value
        return _RoleProxy(value, name, self.accessed)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def compute_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic; ties count 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def macro_auc(probs: np.ndarray, y: np.ndarray) -> float:
    """One-vs-rest AUC averaged over classes present with both outcomes."""
    y = np.asarray(y)
    if probs.shape[1] == 2:
        return compute_auc(probs[:, 1], (y == 1).astype(int))
    vals = []
    for c in range(probs.shape[1]):
        pos = (y == c).astype(int)
        if 0 < pos.sum() < len(pos):
            vals.append(compute_auc(probs[:, c], pos))
    if not vals:
        raise ValueError("AUC needs at least two classes in the evaluation labels")
    return float(np.mean(vals))


def bootstrap_ci(values, resamples: int = 1000, level: float = 0.95, seed: int = 0) -> tuple[float, float, float]:
    """Percentile bootstrap interval for the mean: ``(lower, mean, upper)``."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("need at least one value")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    mean = float(v.mean())
    if v.size == 1 or np.all(v == v[0]):
        return mean, mean, mean
    rng = np.random.Generator(np.random.Philox(seed))
    means = v[rng.integers(0, v.size, size=(resamples, v.size))].mean(axis=1)
    tail = 100 * (1 - level) / 2
    lower, upper = np.percentile(means, [tail, 100 - tail])
    return float(min(lower, mean)), mean, float(max(upper, mean))


# ---------------------------------------------------------------------------
# Experiment spec
# ---------------------------------------------------------------------------


def _default_f_config() -> dict[str, Any]:
    return TrainConfig(loss=Loss.SQUARED_ERROR, learning_rate=0.05, epochs=300,
                       validation_fraction=0.2).to_dict()


def _default_g_config() -> dict[str, Any]:
    return TrainConfig(loss=Loss.CROSS_ENTROPY, learning_rate=0.05, epochs=100,
                       validation_fraction=0.2).to_dict()


@dataclass
class ExperimentSpec:
    """Declarative description of a (setting x sweep value x seed) grid.

    ``task`` is either ``{"kind": ..., "params": {...}}`` for a generated
    task (the cell seed overrides ``params["seed"]``) or
    ``{"samples_path": ...}`` for a stored sample set.  Training seeds of
    every stage are set to the cell seed.  ``workers`` only controls
    parallelism and never changes results.
    """

    task: dict[str, Any]
    settings: list[str]
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    sweep: dict[str, Any] | None = None
    f_config: dict[str, Any] = field(default_factory=_default_f_config)
    g_config: dict[str, Any] = field(default_factory=_default_g_config)
    baseline_config: dict[str, Any] = field(default_factory=_default_g_config)
    f_hidden: int | None = 64
    g_hidden: int | None = None
    baseline_hidden: int | None = 64
    metrics: list[str] = field(default_factory=lambda: list(METRICS))
    bootstrap_resamples: int = 1000
    ci_level: float = 0.95
    bootstrap_seed: int = 0
    source_weight: float = 1.0
    threshold: float = 0.5
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown field {k!r}" for k in unknown])
        return cls(**d)

    def to_dict(self, include_runtime: bool = True) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        if not include_runtime:
            d.pop("workers")
        return json.loads(json.dumps(d))

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(include_runtime=False), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def sweep_values(self) -> list[Any]:
        return [None] if not self.sweep else list(self.sweep["values"])


def _setting_problems(setting: Setting, data: SampleSet) -> list[str]:
    def empty(obj) -> bool:
        return obj is None or len(obj) == 0

    out = []
    name = setting.value
    has_pi = data.pi_kind is not PIKind.NONE
    if setting in (Setting.SL_S, Setting.LUPI, Setting.DALUPI_T, Setting.DALUPI_ST):
        if empty(data.source_labeled) or data.source_labeled.y is None:
            out.append(f"{name} needs labeled source data (source_labeled)")
    if setting is Setting.SL_T and empty(data.target_labeled):
        out.append(f"{name} needs labeled target training data (target_labeled)")
    if setting in (Setting.LUPI, Setting.DALUPI_T, Setting.DALUPI_ST) and not has_pi:
        out.append(f"{name} needs privileged information but the task has none")
    if setting in (Setting.DALUPI_T, Setting.DALUPI_ST) and empty(data.target_pi):
        out.append(f"{name} needs target PI pairs (target_pi)")
    return out


def _load_cell_data(spec: ExperimentSpec, sweep_value, seed: int) -> SampleSet:
    task = spec.task
    if "samples_path" in task:
        data = load_json(task["samples_path"])
        if not isinstance(data, SampleSet):
            raise ValueError(f"{task['samples_path']} does not hold a sample set")
        return data
    params = dict(task.get("params", {}))
    params["seed"] = int(seed)
    if spec.sweep:
        params[spec.sweep["parameter"]] = sweep_value
    return build_task(task["kind"], params)


def preflight(spec: ExperimentSpec) -> None:
    """Collect every configuration problem and raise them together."""
    problems: list[str] = []
    settings = []
    for s in spec.settings:
        try:
            settings.append(Setting(s))
        except ValueError:
            problems.append(f"unknown setting {s!r}; expected one of {[x.value for x in Setting]}")
    if not spec.settings:
        problems.append("no settings requested")
    if not spec.seeds:
        problems.append("seeds must be nonempty")
    if len(set(spec.seeds)) != len(spec.seeds):
        problems.append("seeds must be distinct")
    if not 0 < spec.ci_level < 1:
        problems.append(f"ci_level must lie in (0, 1), got {spec.ci_level}")
    if spec.bootstrap_resamples < 1:
        problems.append("bootstrap_resamples must be at least 1")
    for m in spec.metrics:
        if m not in METRICS:
            problems.append(f"unknown metric {m!r}; expected a subset of {list(METRICS)}")
    for name in ("f_config", "g_config", "baseline_config"):
        try:
            TrainConfig(**getattr(spec, name))
        except (TypeError, ValueError) as e:
            problems.append(f"{name}: {e}")

    task = spec.task
    task_ok = True
    if "samples_path" in task:
        if spec.sweep:
            problems.append("a sweep needs a generated task, not a stored sample set")
            task_ok = False
    elif task.get("kind") not in TASK_BUILDERS:
        problems.append(f"unknown task kind {task.get('kind')!r}; expected one of {sorted(TASK_BUILDERS)}")
        task_ok = False
    else:
        spec_cls = TASK_BUILDERS[task["kind"]][0]
        names = {f.name for f in fields(spec_cls)}
        bad = sorted(set(task.get("params", {})) - names)
        if bad:
            problems.append(f"unknown {task['kind']} task parameters {bad}")
            task_ok = False
        if spec.sweep:
            param = spec.sweep.get("parameter")
            if param not in names:
                problems.append(f"sweep parameter {param!r} is not a {task['kind']} task parameter")
                task_ok = False
            if not spec.sweep.get("values"):
                problems.append("sweep values must be nonempty")
                task_ok = False

    if task_ok and "kind" in task:
        spec_cls = TASK_BUILDERS[task["kind"]][0]
        for value in spec.sweep_values:
            params = dict(task.get("params", {}))
            if spec.sweep:
                params[spec.sweep["parameter"]] = value
            try:
                spec_cls(**params)
            except (TypeError, ValueError) as e:
                problems.append(f"invalid task at sweep value {value!r}: {e}")
                task_ok = False
    if task_ok and spec.seeds:
        # role availability does not depend on the sweep value or seed
        try:
            data = _load_cell_data(spec, spec.sweep_values[0], spec.seeds[0])
        except Exception as e:  # noqa: BLE001
            problems.append(f"task could not be built: {e}")
        else:
            for s in settings:
                problems.extend(_setting_problems(s, data))
    if problems:
        raise ConfigError(problems)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def fit_setting(spec: ExperimentSpec, data, setting: Setting, seed: int):
    """Train the model of one setting on (possibly tracked) data."""
    if setting in BASELINE_SETTINGS:
        cfg = TrainConfig(**{**spec.baseline_config, "seed": seed})
        return fit_baseline(data, setting, cfg, hidden=spec.baseline_hidden)
    f_cfg = TrainConfig(**{**spec.f_config, "seed": seed})
    g_cfg = TrainConfig(**{**spec.g_config, "seed": seed})
    return fit_two_stage(data, setting, f_cfg, g_cfg, f_hidden=spec.f_hidden, g_hidden=spec.g_hidden,
                         source_weight=spec.source_weight, threshold=spec.threshold)


def evaluate_model(model, data: SampleSet, metrics: list[str] = METRICS) -> dict[str, dict[str, float]]:
    out = {}
    for split, test in (("source", data.test_source), ("target", data.test_target)):
        if len(test) == 0:
            continue
        probs = predict(model, test.x)
        res = {}
        if "accuracy" in metrics:
            res["accuracy"] = float(np.mean(np.argmax(probs, axis=1) == test.y))
        if "auc" in metrics:
            res["auc"] = macro_auc(probs, test.y)
        out[split] = res
    return out


def run_cell(spec: ExperimentSpec, data: SampleSet, setting: Setting, sweep_value, seed: int) -> dict[str, Any]:
    """Fit one setting under access tracking and evaluate it on both test sets."""
    cell: dict[str, Any] = {
        "setting": setting.value,
        "sweep_value": sweep_value,
        "seed": int(seed),
        "oracle": setting is Setting.SL_T,
    }
    tracked = TrackedSampleSet(data)
    try:
        model = fit_setting(spec, tracked, setting, seed)
        read = sorted(tracked.accessed)
        cell["roles_read"] = read
        extra = sorted(set(read) - PERMITTED_ROLES[setting])
        if extra:
            raise AccessViolation(f"{setting.value} read roles outside its permitted set: {extra}")
        cell["metrics"] = evaluate_model(model, data, spec.metrics)
        cell["status"] = "ok"
    except Exception as e:  # noqa: BLE001
        cell.setdefault("roles_read", sorted(tracked.accessed))
        cell["status"] = "failed"
        cell["error"] = f"{type(e).__name__}: {e}"
    return cell


def _run_group(args) -> list[dict[str, Any]]:
    spec, sweep_value, seed = args
    try:
        data = _load_cell_data(spec, sweep_value, seed)
    except Exception as e:  # noqa: BLE001
        return [{"setting": Setting(s).value, "sweep_value": sweep_value, "seed": int(seed),
                 "oracle": Setting(s) is Setting.SL_T, "roles_read": [], "status": "failed",
                 "error": f"{type(e).__name__}: {e}"} for s in spec.settings]
    return [run_cell(spec, data, Setting(s), sweep_value, seed) for s in spec.settings]


@dataclass
class ExperimentResult:
    spec: dict[str, Any]
    spec_hash: str
    version: str
    cells: list[dict[str, Any]]
    aggregates: list[dict[str, Any]]

    @property
    def all_ok(self) -> bool:
        return all(c["status"] == "ok" for c in self.cells)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": RESULT_FORMAT,
            "provenance": {"spec_hash": self.spec_hash, "version": self.version},
            "spec": self.spec,
            "cells": self.cells,
            "aggregates": self.aggregates,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def csv_rows(self) -> list[tuple]:
        rows = []
        for c in self.cells:
            for split, res in sorted(c.get("metrics", {}).items()):
                for metric, value in sorted(res.items()):
                    rows.append((c["setting"], c["sweep_value"], c["seed"], split, metric, value))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", "sweep_value", "seed", "split", "metric", "value"])
        for setting, sweep_value, seed, split, metric, value in self.csv_rows():
            w.writerow([setting, "" if sweep_value is None else sweep_value, seed, split, metric, repr(value)])
        return buf.getvalue()

    def aggregate(self, setting: str, split: str, metric: str, sweep_value=None) -> dict[str, Any]:
        for a in self.aggregates:
            if (a["setting"], a["split"], a["metric"], a["sweep_value"]) == (setting, split, metric, sweep_value):
                return a
        raise KeyError((setting, split, metric, sweep_value))


def _aggregate(spec: ExperimentSpec, cells: list[dict[str, Any]]) -> list[dict[str, Any]]:
    out = []
    index = 0
    for s in spec.settings:
        for value in spec.sweep_values:
            group = [c for c in cells if c["setting"] == Setting(s).value and c["sweep_value"] == value
                     and c["status"] == "ok"]
            for split in SPLITS:
                for metric in spec.metrics:
                    vals = [c["metrics"][split][metric] for c in group if split in c["metrics"]]
                    index += 1
                    if not vals:
                        continue
                    seed = int(np.random.SeedSequence([spec.bootstrap_seed, index]).generate_state(1)[0])
                    lo, mean, hi = bootstrap_ci(vals, spec.bootstrap_resamples, spec.ci_level, seed)
                    out.append({"setting": Setting(s).value, "sweep_value": value, "split": split,
                                "metric": metric, "n": len(vals), "lower": lo, "mean": mean, "upper": hi})
    return out


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Run every (sweep value, seed) group, each training all requested settings.

    Configuration problems are reported together before any training.  A
    cell that fails at run time is kept in the result with its diagnostic.
    """
    preflight(spec)
    groups = [(spec, value, seed) for value in spec.sweep_values for seed in spec.seeds]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            batches = list(pool.map(_run_group, groups))
    else:
        batches = [_run_group(g) for g in groups]
    cells = [c for batch in batches for c in batch]
    order = {Setting(s).value: i for i, s in enumerate(spec.settings)}
    value_order = {json.dumps(v): i for i, v in enumerate(spec.sweep_values)}
    cells.sort(key=lambda c: (order[c["setting"]], value_order[json.dumps(c["sweep_value"])], c["seed"]))
    return ExperimentResult(
        spec=spec.to_dict(include_runtime=False),
        spec_hash=spec.spec_hash(),
        version=__version__,
        cells=cells,
        aggregates=_aggregate(spec, cells),
    )
