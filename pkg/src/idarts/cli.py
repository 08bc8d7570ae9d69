"""Command-line entry point: ``idarts {run,gen-data,resume,report,alpha-hist}``.

Precedence for every setting is flag > config file > built-in default. The
default output root is ``$IDARTS_OUTPUT_ROOT`` (else ``./runs``); a run
lands in ``<root>/<name>-seed<seed>`` unless ``--out`` or ``out_dir`` says
otherwise.
"""

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import (OUTPUT_ROOT_ENV, default_run_dir, gen_data, is_complete, load_config,
                     parse_overrides, resolve, run_experiment)
from .continual import IncrementalLearner
from .errors import ConfigurationError, IngestionError, StageError, StateError
from .evaluate import ALPHA_COLUMNS, alpha_histogram, read_csv, write_csv
from .genotypes import Genotype

log = logging.getLogger("idarts")

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _config(args):
    flags = dict(seed=args.seed, out_dir=getattr(args, "out", None), device=args.device,
                 strategy_overrides=parse_overrides(args.strategy_overrides))
    if args.config is None:
        return resolve({}, **flags)
    return load_config(args.config, **flags)


def cmd_run(args):
    cfg = _config(args)
    run_dir = default_run_dir(cfg)
    if (run_dir / "config.yaml").exists() and is_complete(run_dir):
        print(f"{run_dir}: run already complete, nothing to do")
        return 0
    learner = run_experiment(cfg, run_dir, stop_after=args.stop_after)
    print(f"run directory: {run_dir}")
    print(f"tasks completed: {learner.completed}/{learner.schedule.n_tasks}")
    return 0


def cmd_gen_data(args):
    cfg = _config(args)
    out = Path(args.out) if args.out else default_run_dir(cfg) / "data"
    path, counts = gen_data(cfg, out)
    print(f"manifest: {path}")
    for name, c in counts.items():
        print(f"  {name:8s} {c}")
    print(f"  total    {sum(counts.values())}")
    return 0


def cmd_resume(args):
    run_dir = Path(args.run_dir)
    cfg_path = run_dir / "config.yaml"
    if not cfg_path.exists():
        raise FileNotFoundError(f"not a run directory (no config.yaml): {run_dir}")
    cfg = load_config(cfg_path)
    if is_complete(run_dir, cfg):
        print(f"{run_dir}: run already complete, nothing to do")
        return 0
    if not IncrementalLearner.completed_tasks(run_dir / "checkpoints"):
        raise StateError(f"no completed task checkpoint under {run_dir / 'checkpoints'}")
    learner = run_experiment(cfg, run_dir, stop_after=args.stop_after, resume=True)
    print(f"tasks completed: {learner.completed}/{learner.schedule.n_tasks}")
    return 0


def read_report(run_dir):
    """Fields of one run as stored: metric strings from metrics.csv, genotypes, summary.json."""
    run_dir = Path(run_dir)
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        raise FileNotFoundError(f"no metrics.csv in {run_dir}")
    rows = read_csv(metrics)
    summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
    fields = {r["metric"]: r["value"] for r in rows if r["stage"] == "summary"}
    accuracy = {(int(r["task_k"]), int(r["task_n"])): r["value"] for r in rows if r["metric"] == "accuracy"}
    genotypes = [Genotype.load(p) for p in sorted((run_dir / "genotypes").glob("task_*.json"))]
    return {"dir": str(run_dir), "fields": fields, "accuracy": accuracy, "genotypes": genotypes,
            "wall_time_days": summary["wall_time_days"], "device": summary.get("device", ""),
            "complete": summary["tasks_completed"] >= summary["n_tasks"],
            "tasks_completed": summary["tasks_completed"], "n_tasks": summary["n_tasks"]}


def format_report(rep):
    f = rep["fields"]
    lines = [f"run: {rep['dir']}"]
    if not rep["complete"]:
        lines.append(f"WARNING: partial run, {rep['tasks_completed']}/{rep['n_tasks']} tasks complete")
    lines.append(f"final_accuracy: {f.get('final_accuracy', 'n/a')}")
    lines.append(f"mean_task_accuracy: {f.get('mean_task_accuracy', 'n/a')}")
    lines.append(f"max_params: {f['max_params']}")
    lines.append(f"final_params: {f['final_params']}")
    lines.append(f"wall_time_days: {rep['wall_time_days']!r}  ({rep['device']})")
    for k, g in enumerate(rep["genotypes"], start=1):
        lines.append(f"genotype task {k}: {g.summary()}")
    return "\n".join(lines)


def aggregate(reports, metrics=("final_accuracy", "mean_task_accuracy", "max_params", "final_params")):
    """Mean and half-range of each metric over runs."""
    out = {}
    for m in metrics:
        vals = [float(r["fields"][m]) for r in reports if m in r["fields"]]
        if vals:
            out[m] = (float(np.mean(vals)), (max(vals) - min(vals)) / 2.0)
    days = [r["wall_time_days"] for r in reports]
    out["wall_time_days"] = (float(np.mean(days)), (max(days) - min(days)) / 2.0)
    return out


def cmd_report(args):
    reports = []
    for d in args.run_dirs:
        rep = read_report(d)
        if not rep["complete"]:
            warnings.warn(f"{d}: run incomplete, reporting partial results")
        reports.append(rep)
        print(format_report(rep))
        print()
    if len(reports) > 1:
        print(f"aggregate over {len(reports)} runs (mean +- half-range):")
        for m, (mean, half) in aggregate(reports).items():
            print(f"  {m}: {mean:.6g} +- {half:.6g}")
    return 0


def cmd_alpha_hist(args):
    run_dir = Path(args.run_dir)
    ckpt = run_dir / "checkpoints"
    done = IncrementalLearner.completed_tasks(ckpt)
    snaps = {}
    for n in done:
        p = ckpt / f"task_{n:02d}" / "alpha.npy"
        if p.exists():
            snaps[n] = np.load(p)
    if not snaps:
        raise FileNotFoundError(f"no alpha snapshots under {ckpt}")
    rows, stats = alpha_histogram(snaps, bins=args.bins)
    out = Path(args.output) if args.output else run_dir / "alpha_hist.csv"
    write_csv(out, ALPHA_COLUMNS, rows)
    print(f"histogram: {out}")
    for s in stats:
        print(f"  task {s['task']}: mean {s['mean']:.6g}  mean|alpha| {s['mean_abs']:.6g}  n={s['n']}")
    return 0


def _common(p, out_help="output directory"):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help=out_help)
    p.add_argument("--device", help="compute device (cpu)")
    p.add_argument("--strategy-overrides", default=None,
                   help="comma-separated key=value pairs applied on top of the strategy block")


def build_parser():
    p = argparse.ArgumentParser(prog="idarts", description=__doc__.split("\n")[0],
                                epilog=f"default output root: ${OUTPUT_ROOT_ENV} or ./runs")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run all tasks of an experiment")
    _common(r, "run directory")
    r.add_argument("--stop-after", type=int, default=None, help="stop after this many tasks")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gen-data", help="write the configured synthetic dataset to disk")
    _common(g, "dataset directory")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("resume", help="continue a run from its last completed task")
    s.add_argument("run_dir")
    s.add_argument("--stop-after", type=int, default=None)
    s.set_defaults(func=cmd_resume)

    rep = sub.add_parser("report", help="summarize one or more run directories")
    rep.add_argument("run_dirs", nargs="+")
    rep.set_defaults(func=cmd_report)

    a = sub.add_parser("alpha-hist", help="histogram raw alpha snapshots per task")
    a.add_argument("run_dir")
    a.add_argument("--bins", type=int, default=20)
    a.add_argument("--output", default=None, help="CSV path (default: <run_dir>/alpha_hist.csv)")
    a.set_defaults(func=cmd_alpha_hist)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, IngestionError, ValueError, FileNotFoundError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
