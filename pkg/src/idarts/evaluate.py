"""Accuracy matrix, summary metrics, timing and alpha-distribution tables.

Metrics file (``metrics.csv``): header ``stage,task_k,task_n,metric,value``,
one row per scalar. Alpha histogram file (``alpha_hist.csv``): header
``task,bin_lo,bin_hi,count``.
"""

import csv
import platform
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import StateError
from .genotypes import AlphaTable

SECONDS_PER_DAY = 86400.0


class AccuracyMatrix:
    """A[k][n]: accuracy after task k on the test data of task n (n <= k)."""

    def __init__(self):
        self._a = {}

    def set(self, k, n, value):
        if n > k or n < 1:
            raise IndexError(f"A[{k}][{n}] undefined: need 1 <= n <= k")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self._a[(int(k), int(n))] = float(value)

    def get(self, k, n):
        return self._a[(k, n)]

    def __contains__(self, key):
        return tuple(key) in self._a

    def __eq__(self, other):
        return isinstance(other, AccuracyMatrix) and self._a == other._a

    @property
    def n_rows(self):
        return max((k for k, _ in self._a), default=0)

    def row(self, k):
        if any((k, n) not in self._a for n in range(1, k + 1)):
            raise StateError(f"accuracy row {k} is incomplete")
        return [self._a[(k, n)] for n in range(1, k + 1)]

    def to_rows(self):
        return [[k, n, v] for (k, n), v in sorted(self._a.items())]

    @classmethod
    def from_rows(cls, rows):
        m = cls()
        for k, n, v in rows:
            m.set(int(k), int(n), float(v))
        return m

    def as_array(self):
        K = self.n_rows
        out = np.full((K, K), np.nan)
        for (k, n), v in self._a.items():
            out[k - 1, n - 1] = v
        return out


@torch.no_grad()
def predict(model, x, upto_task, batch_size=512):
    model.eval()
    ref = next(model.parameters())
    preds = [model(x[i:i + batch_size].to(ref.dtype), upto_task).argmax(dim=1)
             for i in range(0, x.shape[0], batch_size)]
    return torch.cat(preds)


def task_accuracy(model, x, y, k):
    """Fraction of (x, y) whose argmax over the logits of tasks 1..k equals y."""
    if x.shape[0] == 0:
        raise ValueError("empty test set")
    y = torch.as_tensor(y)
    return float((predict(model, torch.as_tensor(x), k) == y).double().mean())


def final_accuracy(matrix: AccuracyMatrix, test_sizes):
    """Example-weighted accuracy of the last row, i.e. pooled accuracy on all test sets."""
    N = len(test_sizes)
    row = matrix.row(N)
    sizes = np.asarray(test_sizes, dtype=np.float64)
    return float(np.dot(row, sizes) / sizes.sum())


def mean_task_accuracy(matrix: AccuracyMatrix, n_tasks):
    return float(np.mean(matrix.row(n_tasks)))


def alpha_histogram(snapshots, bins=20):
    """Histogram raw alpha entries per task on shared bin edges.

    ``snapshots`` maps task -> AlphaTable (or array). Returns
    ``(rows, stats)``: rows of ``{task, bin_lo, bin_hi, count}`` and per-task
    ``{task, mean, mean_abs, n}``.
    """
    if int(bins) < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    if not snapshots:
        raise ValueError("no alpha snapshots")
    values = {t: np.asarray(s.values if isinstance(s, AlphaTable) else s, dtype=np.float64).ravel()
              for t, s in sorted(snapshots.items())}
    allv = np.concatenate(list(values.values()))
    lo, hi = float(allv.min()), float(allv.max())
    edges = np.histogram_bin_edges(allv, bins=int(bins), range=(lo, hi))
    rows, stats = [], []
    for t, v in values.items():
        counts, _ = np.histogram(v, bins=edges)
        for i, c in enumerate(counts):
            rows.append({"task": t, "bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]), "count": int(c)})
        stats.append({"task": t, "mean": float(v.mean()), "mean_abs": float(np.abs(v).mean()), "n": int(v.size)})
    return rows, stats


def alpha_drift(snapshots):
    """Mean |alpha| per task, from snapshots alone."""
    return {t: float(np.abs(np.asarray(s.values if isinstance(s, AlphaTable) else s)).mean())
            for t, s in sorted(snapshots.items())}


class Timer:
    """Monotonic wall-clock accounting per named stage."""

    def __init__(self):
        self.stages = {}
        self._start = None
        self._stop = None

    def start(self):
        self._start = time.perf_counter()
        return self

    def stop(self):
        self._stop = time.perf_counter()
        return self

    def add(self, stage, seconds):
        self.stages[stage] = self.stages.get(stage, 0.0) + float(seconds)

    @property
    def total_seconds(self):
        if self._start is None:
            return sum(self.stages.values())
        end = self._stop if self._stop is not None else time.perf_counter()
        return end - self._start


def seconds_to_days(seconds):
    return float(seconds) / SECONDS_PER_DAY


def record_timing(run):
    """Wall time of a run in days.

    ``run`` is a :class:`Timer`, a number of seconds, or a list of timing
    rows with ``stage`` and ``seconds`` (``task_total`` rows are summed when
    present, otherwise all rows).
    """
    if isinstance(run, Timer):
        return seconds_to_days(run.total_seconds)
    if isinstance(run, (int, float)):
        return seconds_to_days(run)
    rows = list(run)
    totals = [r["seconds"] for r in rows if r["stage"] == "task_total"]
    return seconds_to_days(sum(totals) if totals else sum(r["seconds"] for r in rows))


def device_descriptor():
    return f"{platform.machine()} {platform.processor() or 'cpu'} torch-{torch.__version__} threads={torch.get_num_threads()}"


@dataclass
class RunMetrics:
    final_accuracy: float
    max_params: int
    final_params: int
    wall_time_days: float
    mean_task_accuracy: float = float("nan")
    device: str = field(default_factory=device_descriptor)


METRIC_COLUMNS = ("stage", "task_k", "task_n", "metric", "value")
ALPHA_COLUMNS = ("task", "bin_lo", "bin_hi", "count")


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def metric_rows(matrix: AccuracyMatrix, test_sizes, max_params, final_params, genotype_params=None):
    """Rows for metrics.csv. Deterministic given the run (no wall-clock values)."""
    rows = [{"stage": "eval", "task_k": k, "task_n": n, "metric": "accuracy", "value": v}
            for k, n, v in matrix.to_rows()]
    N = len(test_sizes)
    if matrix.n_rows >= N:
        rows.append({"stage": "summary", "task_k": N, "task_n": 0, "metric": "final_accuracy",
                     "value": final_accuracy(matrix, test_sizes)})
        rows.append({"stage": "summary", "task_k": N, "task_n": 0, "metric": "mean_task_accuracy",
                     "value": mean_task_accuracy(matrix, N)})
    rows.append({"stage": "summary", "task_k": matrix.n_rows, "task_n": 0, "metric": "max_params",
                 "value": int(max_params)})
    rows.append({"stage": "summary", "task_k": matrix.n_rows, "task_n": 0, "metric": "final_params",
                 "value": int(final_params)})
    for k, p in sorted((genotype_params or {}).items()):
        rows.append({"stage": "params", "task_k": k, "task_n": 0, "metric": "child_params", "value": int(p)})
    return rows
