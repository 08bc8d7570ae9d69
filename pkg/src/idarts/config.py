"""Experiment configuration and the config-driven runner.

A config is a YAML mapping with the sections below; any omitted field takes
its default and the fully resolved config is written to ``config.yaml`` in
the run directory. Precedence: command-line flag > file > default.

.. code-block:: yaml

    name: rf-idarts
    seed: 0
    dtype: float64              # float32 | float64
    device: cpu
    data:
      generator: {mod_set: [BPSK, ...], n_per_class: 500, L: 256, snr_db: 10,
                  test_fraction: 0.2}
      # or  manifest: path/to/manifest.json
    schedule: {grouping: contiguous, n_tasks: 4, explicit: null}   # n_tasks implied unless contiguous
    strategy: {preset: idarts_star, use_kd: true, ..., coreset_budget: 1000}
    search: {epochs_search: 50, epochs_retrain: 125, lr_w: 0.05, ...}
    loss: {mu: 0.5, lambda: 0.001, kd_temperature: 1.0}
    cell: {n_nodes: 4, n_cells: 8, channels: 16, ...}
    options: {include_zero: false, top_k_edges: null, inherit_weights: true,
              search_teacher: child, fixed_op: sep_conv_3}
"""

import copy
import json
import os
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .continual import STRATEGIES, IncrementalLearner, StrategyConfig
from .data import (MODULATIONS, generate_rf_dataset, load_image_dataset, read_dataset, split_tasks,
                   stratified_splits, write_dataset)
from .errors import ConfigurationError
from .evaluate import (ALPHA_COLUMNS, METRIC_COLUMNS, alpha_histogram, device_descriptor, metric_rows,
                       record_timing, write_csv)
from .genotypes import CellSpec
from .objectives import LossWeights
from .search import SearchConfig
from .utils import sub_seed

OUTPUT_ROOT_ENV = "IDARTS_OUTPUT_ROOT"

DEFAULT_CORESET = {"signal1d": 1000, "image2d": 2000}

DEFAULTS = {
    "name": "idarts",
    "seed": 0,
    "dtype": "float64",
    "device": "cpu",
    "data": {"generator": {"mod_set": list(MODULATIONS), "n_per_class": 500, "L": 1024,
                           "snr_db": 10.0, "test_fraction": 0.2, "seed": None}},
    "schedule": {"grouping": "contiguous", "n_tasks": None, "explicit": None},
    "strategy": {"preset": "idarts_star"},
    "search": asdict(SearchConfig()),
    "loss": {"mu": 0.5, "lambda": 1e-3, "kd_temperature": 1.0},
    "cell": {"n_nodes": 4, "n_cells": 8, "channels": 16, "reduction_positions": None,
             "stem_multiplier": 3, "stem_stride": 1},
    "options": {"include_zero": False, "top_k_edges": None, "inherit_weights": True,
                "search_teacher": "child", "fixed_op": "sep_conv_3"},
}

# config key -> LossWeights field ("lambda" is a Python keyword)
LOSS_KEYS = {"mu": "mu", "lambda": "lam", "kd_temperature": "temperature"}

_SECTIONS = {"name", "seed", "dtype", "device", "data", "schedule", "strategy", "search", "loss",
             "cell", "options", "out_dir"}


def _field_names(cls):
    return {f.name for f in fields(cls)}


def _check_keys(section, given, allowed):
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigurationError(f"{section}: unknown field(s) {unknown}")


def _parse_scalar(text):
    return yaml.safe_load(text)


def parse_overrides(text):
    """``"use_kd=false,replay_mode=random"`` -> dict with YAML-typed values."""
    out = {}
    if not text:
        return out
    for item in text.split(","):
        if not item.strip():
            continue
        if "=" not in item:
            raise ConfigurationError(f"strategy override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = _parse_scalar(v.strip())
    return out


def resolve(raw=None, seed=None, out_dir=None, device=None, strategy_overrides=None):
    """Merge a raw config mapping with defaults and flags; validate every section."""
    raw = copy.deepcopy(raw or {})
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a mapping")
    _check_keys("config", raw, _SECTIONS)
    cfg = copy.deepcopy(DEFAULTS)
    for key in ("name", "seed", "dtype", "device", "out_dir"):
        if key in raw:
            cfg[key] = raw[key]

    data = raw.get("data")
    if data is not None:
        _check_keys("data", data, {"generator", "manifest"})
        if "manifest" in data:
            cfg["data"] = {"manifest": str(data["manifest"])}
        else:
            gen = dict(DEFAULTS["data"]["generator"])
            _check_keys("data.generator", data.get("generator", {}), gen)
            gen.update(data.get("generator", {}))
            cfg["data"] = {"generator": gen}
    for section, allowed in (("schedule", DEFAULTS["schedule"]), ("search", _field_names(SearchConfig)),
                             ("loss", LOSS_KEYS), ("cell", DEFAULTS["cell"]),
                             ("options", DEFAULTS["options"])):
        given = raw.get(section) or {}
        _check_keys(section, given, allowed)
        cfg[section].update(given)

    strat = dict(raw.get("strategy") or {})
    strat.update(strategy_overrides or {})
    _check_keys("strategy", strat, _field_names(StrategyConfig) | {"preset"})
    cfg["strategy"] = strat
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    if device is not None:
        cfg["device"] = device

    if cfg["dtype"] not in ("float32", "float64"):
        raise ConfigurationError(f"dtype: must be float32 or float64, got {cfg['dtype']!r}")
    if cfg["device"] != "cpu":
        raise ConfigurationError(f"device: only 'cpu' is supported, got {cfg['device']!r}")
    if not isinstance(cfg["seed"], int):
        raise ConfigurationError(f"seed: must be an integer, got {cfg['seed']!r}")

    modality = "signal1d"
    if "generator" in cfg["data"]:
        gen = cfg["data"]["generator"]
        if int(gen["n_per_class"]) < 1:
            raise ConfigurationError(f"data.generator.n_per_class: must be >= 1, got {gen['n_per_class']}")
        bad = [m for m in gen["mod_set"] if m not in MODULATIONS]
        if bad:
            raise ConfigurationError(f"data.generator.mod_set: unsupported modulation(s) {bad}")
        if not 0 < float(gen["test_fraction"]) < 1:
            raise ConfigurationError("data.generator.test_fraction: must be in (0, 1)")
    else:
        manifest = json.loads(Path(cfg["data"]["manifest"]).read_text(encoding="utf-8"))
        modality = manifest.get("modality", "signal1d")

    # strategy: preset first, explicit fields on top
    preset = strat.pop("preset", None) or ("idarts_star" if not strat else None)
    if preset and preset not in STRATEGIES:
        raise ConfigurationError(f"strategy.preset: unknown preset {preset!r}; known: {sorted(STRATEGIES)}")
    base = asdict(STRATEGIES[preset]) if preset else asdict(StrategyConfig())
    base["coreset_budget"] = DEFAULT_CORESET[modality]
    base.update(strat)
    try:
        StrategyConfig(**base)
    except (ConfigurationError, TypeError) as exc:
        raise ConfigurationError(f"strategy: {exc}") from exc
    cfg["strategy"] = {"preset": preset, **base}

    try:
        SearchConfig(**cfg["search"])
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"search: {exc}") from exc
    try:
        loss_weights(cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"loss: {exc}") from exc
    if isinstance(cfg["search"].get("lr_milestones"), tuple):
        cfg["search"]["lr_milestones"] = list(cfg["search"]["lr_milestones"])

    sched = cfg["schedule"]
    if sched["grouping"] not in ("contiguous", "family", "explicit"):
        raise ConfigurationError(f"schedule.grouping: unknown grouping {sched['grouping']!r}")
    if sched["grouping"] == "contiguous" and sched["n_tasks"] is None:
        sched["n_tasks"] = 4
    try:
        sched["n_tasks"] = build_schedule(cfg).n_tasks
    except ConfigurationError as exc:
        raise ConfigurationError(f"schedule.grouping: {exc}") from exc
    cfg["version"] = __version__
    return cfg


def load_config(path, **flags):
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML: {exc}") from exc
    raw.pop("version", None)
    return resolve(raw, **flags)


def _class_names(cfg):
    if "generator" in cfg["data"]:
        return list(cfg["data"]["generator"]["mod_set"])
    return list(json.loads(Path(cfg["data"]["manifest"]).read_text(encoding="utf-8"))["classes"])


def build_schedule(cfg):
    names = _class_names(cfg)
    s = cfg["schedule"]
    return split_tasks(range(len(names)), s.get("n_tasks"), s["grouping"], s.get("explicit"), names)


def load_data(cfg):
    """Return (train, test, modality, class_names); train/test are (x, y) numpy pairs."""
    if "generator" in cfg["data"]:
        g = cfg["data"]["generator"]
        seed = g["seed"] if g.get("seed") is not None else sub_seed(cfg["seed"], "data") % (2 ** 32)
        ds = generate_rf_dataset(g["mod_set"], int(g["n_per_class"]), int(g["L"]), float(g["snr_db"]), seed)
        tf = float(g["test_fraction"])
        idx = stratified_splits(ds.y, {"train": 1 - tf, "test": tf}, seed=seed)
        return (ds.x[idx["train"]], ds.y[idx["train"]]), (ds.x[idx["test"]], ds.y[idx["test"]]), \
            "signal1d", ds.classes
    path = cfg["data"]["manifest"]
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    if manifest["modality"] == "image2d":
        manifest, splits = load_image_dataset(path)
    else:
        manifest, splits = read_dataset(path)
    for need in ("train", "test"):
        if need not in splits:
            raise ConfigurationError(f"data.manifest: split {need!r} missing")
    return splits["train"], splits["test"], manifest.modality, manifest.classes


def loss_weights(cfg):
    return LossWeights(**{LOSS_KEYS[k]: float(v) for k, v in cfg["loss"].items()})


def cell_spec(cfg, modality, sample_shape):
    c = dict(cfg["cell"])
    return CellSpec(dim=1 if modality == "signal1d" else 2, in_channels=int(sample_shape[0]), **c)


def build_learner(cfg, checkpoint_dir=None):
    train, test, modality, _ = load_data(cfg)
    schedule = build_schedule(cfg)
    strat = {k: v for k, v in cfg["strategy"].items() if k != "preset"}
    search = dict(cfg["search"])
    o = cfg["options"]
    return IncrementalLearner(
        schedule, train, test, cell_spec(cfg, modality, train[0].shape[1:]), StrategyConfig(**strat),
        SearchConfig(**search), loss_weights(cfg), seed=cfg["seed"],
        dtype=torch.float64 if cfg["dtype"] == "float64" else torch.float32,
        fixed_op=o["fixed_op"], include_zero=o["include_zero"], top_k_edges=o["top_k_edges"],
        inherit_weights=o["inherit_weights"], search_teacher=o["search_teacher"],
        checkpoint_dir=checkpoint_dir)


def default_run_dir(cfg):
    if cfg.get("out_dir"):
        return Path(cfg["out_dir"])
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{cfg['name']}-seed{cfg['seed']}"


class RunLock:
    """Exclusive ownership of a run directory via ``.lock``."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise ConfigurationError(f"run directory {self.path.parent} is locked by another run") from exc
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def save_config(cfg, run_dir):
    (Path(run_dir) / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")


def write_outputs(learner, run_dir):
    """Write metrics.csv, alpha_hist.csv, records.csv, timing.csv, genotypes/ and summary.json."""
    run_dir = Path(run_dir)
    sizes = [learner.test[n][0].shape[0] for n in range(1, learner.schedule.n_tasks + 1)]
    child_params = {k + 1: None for k in range(len(learner.genotypes))}
    child_params[learner.completed] = learner.final_params
    rows = metric_rows(learner.accuracy, sizes, learner.max_params, learner.final_params,
                       {k: v for k, v in child_params.items() if v is not None})
    write_csv(run_dir / "metrics.csv", METRIC_COLUMNS, rows)
    if learner.alpha_snapshots:
        hist, stats = alpha_histogram(learner.alpha_snapshots)
        write_csv(run_dir / "alpha_hist.csv", ALPHA_COLUMNS, hist)
        write_csv(run_dir / "alpha_stats.csv", ("task", "mean", "mean_abs", "n"), stats)
    cols = sorted({k for r in learner.records for k in r} - {"task", "stage", "epoch"})
    write_csv(run_dir / "records.csv", ("task", "stage", "epoch", *cols),
              [{c: r.get(c, "") for c in ("task", "stage", "epoch", *cols)} for r in learner.records])
    write_csv(run_dir / "timing.csv", ("task", "stage", "seconds"), learner.timings)
    gdir = run_dir / "genotypes"
    gdir.mkdir(exist_ok=True)
    for k, g in enumerate(learner.genotypes, start=1):
        g.save(gdir / f"task_{k:02d}.json")
    summary = {
        "tasks_completed": learner.completed,
        "n_tasks": learner.schedule.n_tasks,
        "final_accuracy": next((r["value"] for r in rows if r["metric"] == "final_accuracy"), None),
        "max_params": learner.max_params,
        "final_params": learner.final_params,
        "wall_time_days": record_timing(learner.timings),
        "device": device_descriptor(),
        "version": __version__,
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return summary


def run_experiment(cfg, run_dir=None, stop_after=None, resume=False):
    """Execute (or continue) all tasks of a resolved config; returns the learner."""
    run_dir = Path(run_dir) if run_dir is not None else default_run_dir(cfg)
    ckpt = run_dir / "checkpoints"
    with RunLock(run_dir):
        done = IncrementalLearner.completed_tasks(ckpt)
        if done and not resume:
            raise ConfigurationError(f"{run_dir} already holds a run; use resume")
        if not resume:
            save_config(cfg, run_dir)
        learner = build_learner(cfg, checkpoint_dir=ckpt)
        if resume:
            learner.restore(ckpt)
            if learner.completed >= learner.schedule.n_tasks:
                return learner
        try:
            learner.run(stop_after=stop_after)
        finally:
            # completed task checkpoints are already on disk; outputs reflect them
            if learner.completed:
                write_outputs(learner, run_dir)
    return learner


def is_complete(run_dir, cfg=None):
    """True when every task of the run under ``run_dir`` has a COMPLETE checkpoint."""
    run_dir = Path(run_dir)
    cfg = cfg or load_config(run_dir / "config.yaml")
    done = IncrementalLearner.completed_tasks(run_dir / "checkpoints")
    return len(done) >= build_schedule(cfg).n_tasks


def gen_data(cfg, out_dir):
    """Generate the configured RF dataset and write it as a manifest + binaries."""
    if "generator" not in cfg["data"]:
        raise ConfigurationError("data.generator: gen-data needs a generator block")
    g = cfg["data"]["generator"]
    train, test, modality, classes = load_data(cfg)
    seed = g["seed"] if g.get("seed") is not None else sub_seed(cfg["seed"], "data") % (2 ** 32)
    path = write_dataset(out_dir, cfg["name"], modality, classes, {"train": train, "test": test}, seed,
                         dtype=str(train[0].dtype), generator={**g, "seed": seed})
    counts = np.bincount(np.concatenate([train[1], test[1]]), minlength=len(classes)).tolist()
    return path, dict(zip(classes, counts))
