"""A small seeded experiment that fits on one CPU core in a few minutes.

Eight synthetic RF classes in four contiguous tasks of two, a two-cell
supernet with two nodes per cell, 5 search and 15 retrain epochs per task.
Used by the acceptance suite and the demo scripts.
"""

import torch

from .continual import IncrementalLearner, TaskSchedule, strategy
from .data import generate_rf_dataset, stratified_splits
from .evaluate import alpha_drift, final_accuracy
from .genotypes import CellSpec
from .objectives import LossWeights
from .search import SearchConfig

DESK_SPEC = CellSpec(n_nodes=2, n_cells=2, channels=8, dim=1, in_channels=2, stem_stride=4, stem_multiplier=2)
DESK_SEARCH = SearchConfig(epochs_search=5, epochs_retrain=15)
DESK_BUDGET = 160
DESK_SCHEDULE = TaskSchedule(((0, 1), (2, 3), (4, 5), (6, 7)))

# all four run the supernet search; they differ only in what guards old classes
DESK_STRATEGIES = {
    "naive": dict(preset="naive", use_nas=True),
    "replay": dict(preset="darts", replay_mode="herding"),
    "idarts": dict(preset="idarts"),
    "idarts_star": dict(preset="idarts_star"),
}


def desk_data(seed, n_per_class=500, L=256, snr_db=10.0):
    ds = generate_rf_dataset(n_per_class=n_per_class, L=L, snr_db=snr_db, seed=seed)
    s = stratified_splits(ds.y, {"train": 0.8, "test": 0.2}, seed=seed)
    return (ds.x[s["train"]], ds.y[s["train"]]), (ds.x[s["test"]], ds.y[s["test"]])


def desk_learner(name, seed, data=None, dtype=torch.float32, **kw):
    d = dict(DESK_STRATEGIES[name])
    st = strategy(d.pop("preset"), coreset_budget=DESK_BUDGET, **d)
    train, test = data if data is not None else desk_data(seed)
    return IncrementalLearner(DESK_SCHEDULE, train, test, DESK_SPEC, st, DESK_SEARCH, LossWeights(),
                              seed=seed, dtype=dtype, **kw)


def summarize(learner):
    sizes = [learner.test[n][0].shape[0] for n in range(1, learner.schedule.n_tasks + 1)]
    return {"final_accuracy": final_accuracy(learner.accuracy, sizes),
            "alpha_drift": alpha_drift(learner.alpha_snapshots),
            "max_params": learner.max_params, "final_params": learner.final_params}


def run_desk(seeds=(0, 1), names=tuple(DESK_STRATEGIES), dtype=torch.float32, log=None):
    """Run every strategy on every seed; returns ``{(name, seed): learner}``."""
    out = {}
    for seed in seeds:
        data = desk_data(seed)
        for name in names:
            out[name, seed] = desk_learner(name, seed, data, dtype).run()
            if log:
                s = summarize(out[name, seed])
                log(f"seed {seed} {name:12s} final_accuracy {s['final_accuracy']:.4f}")
    return out
