"""Class-incremental task cycle: search, derive, retrain, balance, update memory, distill.

Labels inside the learner are head positions: classes are numbered in the
order their tasks appear in the schedule, so the logits of tasks 1..k are
exactly positions ``0 .. sum(|T_1..T_k|) - 1``.
"""

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigurationError, StageError, StateError
from .evaluate import AccuracyMatrix, task_accuracy
from .genotypes import CellSpec, Genotype, AlphaTable, infer_genotype
from .memory import Coreset, update_coreset
from .objectives import LossWeights
from .search import (SearchConfig, class_balanced_finetune, concat_pool, retrain_phase,
                     search_phase)
from .supernet import ChildNet, SuperNet, derive_child, expand_head, param_count
from .utils import seeded, sub_seed

log = logging.getLogger(__name__)

REPLAY_MODES = ("none", "random", "herding")


@dataclass(frozen=True)
class TaskSchedule:
    tasks: tuple

    def __post_init__(self):
        tasks = tuple(tuple(int(c) for c in t) for t in self.tasks)
        if not tasks:
            raise ConfigurationError("a schedule needs at least one task")
        seen = set()
        for i, t in enumerate(tasks):
            if not t:
                raise ConfigurationError(f"task {i + 1} has no classes")
            overlap = seen.intersection(t)
            if overlap or len(set(t)) != len(t):
                raise ConfigurationError(f"task {i + 1} repeats classes {sorted(overlap) or list(t)}")
            seen.update(t)
        object.__setattr__(self, "tasks", tasks)

    @property
    def n_tasks(self):
        return len(self.tasks)

    @property
    def classes(self):
        return [c for t in self.tasks for c in t]

    @property
    def sizes(self):
        return [len(t) for t in self.tasks]

    def position(self, class_id):
        return self.classes.index(int(class_id))

    def to_positions(self, labels):
        lut = {c: i for i, c in enumerate(self.classes)}
        return np.array([lut[int(c)] for c in np.asarray(labels).ravel()], dtype=np.int64)

    def task_of(self, class_id):
        for i, t in enumerate(self.tasks):
            if int(class_id) in t:
                return i + 1
        raise KeyError(class_id)

    def positions_of_task(self, n):
        start = sum(self.sizes[:n - 1])
        return list(range(start, start + self.sizes[n - 1]))

    def positions_upto(self, n):
        return list(range(sum(self.sizes[:n])))

    def to_dict(self):
        return {"tasks": [list(t) for t in self.tasks]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(tuple(t) for t in d["tasks"]))


@dataclass(frozen=True)
class StrategyConfig:
    use_nas: bool = True
    use_kd: bool = True
    use_alpha_reg: bool = False
    use_balancing: bool = True
    replay_mode: str = "herding"
    coreset_budget: int = 1000

    def __post_init__(self):
        if self.replay_mode not in REPLAY_MODES:
            raise ConfigurationError(f"replay_mode must be one of {REPLAY_MODES}, got {self.replay_mode!r}")
        if self.coreset_budget < 0:
            raise ConfigurationError("coreset_budget must be >= 0")
        if self.replay_mode != "none" and self.coreset_budget == 0:
            raise ConfigurationError("replay needs a positive coreset_budget")

    def effective_weights(self, weights: LossWeights):
        return LossWeights(mu=weights.mu if self.use_kd else 0.0,
                           lam=weights.lam if (self.use_alpha_reg and self.use_nas) else 0.0,
                           temperature=weights.temperature)


# Method / baseline matrix. Baselines train a fixed architecture (use_nas=False).
STRATEGIES = {
    "naive": StrategyConfig(use_nas=False, use_kd=False, use_balancing=False, replay_mode="none"),
    "replay": StrategyConfig(use_nas=False, use_kd=False, use_balancing=False, replay_mode="random"),
    "lwf": StrategyConfig(use_nas=False, use_kd=True, use_balancing=False, replay_mode="none"),
    "e2e": StrategyConfig(use_nas=False, use_kd=True, use_balancing=True, replay_mode="herding"),
    "darts": StrategyConfig(use_nas=True, use_kd=False, use_balancing=False, replay_mode="random"),
    "idarts": StrategyConfig(use_nas=True, use_kd=True, use_balancing=True, replay_mode="herding"),
    "idarts_star": StrategyConfig(use_nas=True, use_kd=True, use_alpha_reg=True, use_balancing=True,
                                  replay_mode="herding"),
    "idarts_star_no_balancing": StrategyConfig(use_nas=True, use_kd=True, use_alpha_reg=True,
                                               use_balancing=False, replay_mode="herding"),
    "idarts_star_no_kd": StrategyConfig(use_nas=True, use_kd=False, use_alpha_reg=True,
                                        use_balancing=True, replay_mode="herding"),
}


def strategy(name, **overrides):
    if name not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {name!r}; known: {sorted(STRATEGIES)}")
    d = asdict(STRATEGIES[name])
    d.update(overrides)
    return StrategyConfig(**d)


@dataclass
class ModelTimeline:
    teacher: Optional[torch.nn.Module] = None      # frozen deployed model of the previous task
    current: Optional[torch.nn.Module] = None      # deployed model of the latest finished task
    genotypes: list = field(default_factory=list)  # one per finished task


def freeze(model):
    model = copy.deepcopy(model)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def replay_pool(task_data, coreset, mode):
    """X_n alone for mode 'none', otherwise X_n followed by the coreset."""
    if mode == "none" or coreset is None or coreset[0].shape[0] == 0:
        return task_data
    return concat_pool(task_data, coreset)


def replay_batch(task_data, coreset, batch_size, mode="herding", generator=None):
    """Draw ``batch_size`` examples uniformly (with replacement) from the replay pool."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if mode not in REPLAY_MODES:
        raise ValueError(f"unknown replay mode {mode!r}")
    x, y = replay_pool(task_data, coreset, mode)
    if x.shape[0] == 0:
        raise ValueError("replay pool is empty")
    idx = torch.randint(x.shape[0], (batch_size,), generator=generator)
    return x[idx], y[idx]


class IncrementalLearner:
    """Runs the per-task cycle over a :class:`TaskSchedule`.

    ``train`` and ``test`` are ``(x, y)`` numpy pairs with raw class ids.
    Every stochastic component draws from ``sub_seed(seed, name)`` with a
    task-qualified name, so a run restored from a task checkpoint continues
    exactly as the uninterrupted one would.
    """

    def __init__(self, schedule: TaskSchedule, train, test, cell_spec: CellSpec,
                 strategy: StrategyConfig, search_cfg: SearchConfig, weights: LossWeights,
                 seed=0, dtype=torch.float64, fixed_op="sep_conv_3", include_zero=False,
                 top_k_edges=None, inherit_weights=True, search_teacher="child", checkpoint_dir=None):
        if search_teacher not in ("child", "supernet"):
            raise ConfigurationError("search_teacher must be 'child' or 'supernet'")
        self.schedule = schedule
        self.spec = cell_spec
        self.strategy = strategy
        self.cfg = search_cfg
        self.weights = weights
        self.seed = int(seed)
        self.dtype = dtype
        self.fixed_op = fixed_op
        self.include_zero = include_zero
        self.top_k_edges = top_k_edges
        self.inherit_weights = inherit_weights
        self.search_teacher = search_teacher
        self.checkpoint_dir = None if checkpoint_dir is None else Path(checkpoint_dir)

        self.train = self._split_by_task(*train)
        self.test = self._split_by_task(*test)
        self.sample_shape = tuple(next(iter(self.train.values()))[0].shape[1:])

        self.completed = 0
        self.timeline = ModelTimeline()
        self.supernet = None
        self.prev_supernet = None
        self.fixed_model = None
        self.coreset = Coreset(strategy.coreset_budget)
        self.accuracy = AccuracyMatrix()
        self.alpha_snapshots = {}
        self.records = []
        self.audit = []
        self.timings = []
        self.max_params = 0
        self.final_params = 0
        self._build_models()

    # -- setup -----------------------------------------------------------

    def _split_by_task(self, x, y):
        x = np.asarray(x)
        y = np.asarray(y)
        pos = self.schedule.to_positions(y)
        out = {}
        for n in range(1, self.schedule.n_tasks + 1):
            mask = np.isin(pos, self.schedule.positions_of_task(n))
            out[n] = (torch.as_tensor(x[mask], dtype=self.dtype), torch.as_tensor(pos[mask]))
        return out

    def _build_models(self):
        if self.strategy.use_nas:
            with seeded(sub_seed(self.seed, "init/supernet")):
                self.supernet = SuperNet(self.spec).to(self.dtype)
        else:
            genotype = Genotype.uniform(self.spec, self.fixed_op)
            with seeded(sub_seed(self.seed, "init/fixed")):
                self.fixed_model = ChildNet(genotype, head_sizes=()).to(self.dtype)

    @property
    def teacher(self):
        return self.timeline.teacher

    @property
    def deployed(self):
        return self.timeline.current

    @property
    def genotypes(self):
        return self.timeline.genotypes

    # -- bookkeeping -----------------------------------------------------

    def _access(self, n, stage, labels, split="train"):
        tasks = sorted({self.schedule.task_of(self.schedule.classes[int(p)]) for p in labels.tolist()})
        self.audit.append({"task": n, "stage": stage, "split": split, "source_tasks": tasks})

    def _coreset_tensors(self):
        if self.strategy.replay_mode == "none":
            return None
        return self.coreset.tensors(self.dtype, self.sample_shape)

    def _record(self, n, rows):
        for r in rows:
            self.records.append({"task": n, **r})

    # -- the task cycle --------------------------------------------------

    def run_task(self, n):
        """Execute the full cycle for task ``n`` (1-based) and return self."""
        if n != self.completed + 1:
            raise StateError(f"task {n} requested but {self.completed} task(s) are complete")
        if n > self.schedule.n_tasks:
            raise StateError(f"schedule has only {self.schedule.n_tasks} tasks")
        st = self.strategy
        weights = st.effective_weights(self.weights)
        task_data = self.train[n]
        n_new = self.schedule.sizes[n - 1]
        seen = self.schedule.positions_upto(n)
        teacher = self.teacher if n > 1 else None
        core = self._coreset_tensors()
        pool_labels = replay_pool(task_data, core, st.replay_mode)[1]
        task_start = time.perf_counter()

        def stage(name, fn):
            t0 = time.perf_counter()
            try:
                out = fn()
            except Exception as exc:
                raise StageError(name, n, exc) from exc
            self.timings.append({"task": n, "stage": name, "seconds": time.perf_counter() - t0})
            return out

        model = self.supernet if st.use_nas else self.fixed_model
        stage("expand_head", lambda: expand_head(model, n_new, seed=sub_seed(self.seed, f"head/{n}")))

        if st.use_nas:
            search_teacher = teacher
            if self.search_teacher == "supernet" and n > 1:
                search_teacher = self.prev_supernet
            self._access(n, "search", pool_labels)
            res = stage("search", lambda: search_phase(
                self.supernet, task_data, core if st.replay_mode != "none" else None, search_teacher,
                weights, self.cfg, upto_task=n, seed=sub_seed(self.seed, f"search/{n}")))
            self._record(n, res.records)
            self.alpha_snapshots[n] = res.alpha_snapshot
            self.max_params = max(self.max_params, param_count(self.supernet))
            genotype = stage("infer_genotype", lambda: infer_genotype(
                self.supernet.alpha_table(), self.spec, self.supernet.head_sizes,
                include_zero=self.include_zero, top_k_edges=self.top_k_edges))
            child = stage("derive_child", lambda: derive_child(
                self.supernet, genotype, seed=sub_seed(self.seed, f"child/{n}"),
                inherit_weights=self.inherit_weights))
        else:
            child = self.fixed_model
            genotype = Genotype(child.genotype.spec, child.genotype.edges, child.head_sizes)

        self._access(n, "retrain", pool_labels)
        rows = stage("retrain", lambda: retrain_phase(
            child, task_data, core if st.replay_mode != "none" else None, teacher, weights, self.cfg,
            upto_task=n, seed=sub_seed(self.seed, f"retrain/{n}")))
        self._record(n, rows)

        new_core = None
        coreset_rng = np.random.default_rng(sub_seed(self.seed, f"coreset/{n}"))

        def build_coreset():
            return update_coreset(self.coreset, task_data, child, seen, mode=st.replay_mode, rng=coreset_rng)

        if st.use_balancing and st.replay_mode != "none" and n > 1:
            # fine-tuning leaves the backbone (hence herding features) untouched, so the
            # coreset selected here is identical to one selected after fine-tuning
            new_core = stage("select_balanced_set", build_coreset)
            bal = new_core.tensors(self.dtype, self.sample_shape)
            self._access(n, "finetune", bal[1])
            rows = stage("finetune", lambda: class_balanced_finetune(
                child, bal, self.cfg, upto_task=n, seed=sub_seed(self.seed, f"finetune/{n}"),
                teacher=teacher, weights=weights))
            self._record(n, rows)

        if st.replay_mode != "none":
            if new_core is None:
                new_core = stage("update_coreset", build_coreset)
            self._access(n, "update_coreset", task_data[1])
            self.coreset = new_core

        self.timeline.teacher = stage("snapshot_teacher", lambda: freeze(child))
        if st.use_nas and self.search_teacher == "supernet":
            self.prev_supernet = freeze(self.supernet)
        self.timeline.current = child
        self.timeline.genotypes.append(genotype)
        self.final_params = param_count(child)
        self.max_params = max(self.max_params, self.final_params)

        def evaluate():
            for m in range(1, n + 1):
                x, y = self.test[m]
                self._access(n, "evaluate", y, split="test")
                self.accuracy.set(n, m, task_accuracy(child, x, y, n))

        stage("evaluate", evaluate)
        self.timings.append({"task": n, "stage": "task_total", "seconds": time.perf_counter() - task_start})
        self.completed = n
        log.info("task %d done: A[%d] = %s", n, n, [round(self.accuracy.get(n, m), 4) for m in range(1, n + 1)])
        if self.checkpoint_dir is not None:
            self.save_checkpoint(self.checkpoint_dir)
        return self

    def run(self, stop_after=None):
        last = self.schedule.n_tasks if stop_after is None else min(int(stop_after), self.schedule.n_tasks)
        for n in range(self.completed + 1, last + 1):
            self.run_task(n)
        return self

    def evaluation_classes(self):
        """Head positions the deployed model currently scores (all classes seen so far)."""
        return list(range(sum(self.deployed.head_sizes))) if self.deployed is not None else []

    def old_data_accessed(self, n):
        """True if any training-data access during task n touched an earlier task."""
        return any(e["task"] == n and e["split"] == "train" and any(t < n for t in e["source_tasks"])
                   for e in self.audit)

    # -- checkpoints -----------------------------------------------------

    def save_checkpoint(self, root):
        """Write ``root/task_NN/`` for the latest completed task; ``COMPLETE`` is written last."""
        n = self.completed
        d = Path(root) / f"task_{n:02d}"
        d.mkdir(parents=True, exist_ok=True)
        if self.supernet is not None:
            torch.save(self.supernet.state_dict(), d / "supernet.pt")
            np.save(d / "alpha.npy", self.alpha_snapshots[n].values)
        torch.save(self.deployed.state_dict(), d / "model.pt")
        self.genotypes[-1].save(d / "genotype.json")
        self.coreset.save(d / "coreset.npz")
        state = {
            "task": n,
            "head_sizes": list(self.deployed.head_sizes),
            "accuracy": self.accuracy.to_rows(),
            "max_params": self.max_params,
            "final_params": self.final_params,
            "records": [r for r in self.records if r["task"] == n],
            "audit": [a for a in self.audit if a["task"] == n],
            "timings": [t for t in self.timings if t["task"] == n],
        }
        (d / "state.json").write_text(json.dumps(state, indent=1) + "\n", encoding="utf-8")
        (d / "COMPLETE").write_text("ok\n")

    @staticmethod
    def completed_tasks(root):
        root = Path(root)
        done = []
        for d in sorted(root.glob("task_*")):
            if (d / "COMPLETE").exists():
                done.append(int(d.name.split("_")[1]))
        return done

    def restore(self, root):
        """Load the state left by the last completed task under ``root``."""
        root = Path(root)
        done = self.completed_tasks(root)
        if not done:
            raise StateError(f"no completed task checkpoint under {root}")
        n = done[-1]
        if done != list(range(1, n + 1)):
            raise StateError(f"task checkpoints under {root} are not contiguous: {done}")
        d = root / f"task_{n:02d}"

        def need(name):
            p = d / name
            if not p.exists():
                raise FileNotFoundError(f"checkpoint file missing: {p}")
            return p

        try:
            state = json.loads(need("state.json").read_text(encoding="utf-8"))
            genotypes = [Genotype.load(root / f"task_{m:02d}" / "genotype.json") for m in range(1, n + 1)]
        except (json.JSONDecodeError, KeyError) as exc:
            raise ConfigurationError(f"corrupt checkpoint in {d}: {exc}") from exc
        coreset = Coreset.load(need("coreset.npz"))
        head_sizes = state["head_sizes"]

        def load_state(path):
            try:
                return torch.load(path, map_location="cpu", weights_only=True)
            except Exception as exc:
                raise ConfigurationError(f"corrupt checkpoint file {path}: {exc}") from exc

        if self.strategy.use_nas:
            sn = SuperNet(self.spec, head_sizes).to(self.dtype)
            sn.load_state_dict(load_state(need("supernet.pt")))
            self.supernet = sn
            for m in range(1, n + 1):
                a = np.load(need("alpha.npy") if m == n else root / f"task_{m:02d}" / "alpha.npy")
                self.alpha_snapshots[m] = AlphaTable(self.spec.edges(), a)
            if self.search_teacher == "supernet":
                self.prev_supernet = freeze(sn)
        deployed = ChildNet(genotypes[-1], head_sizes=head_sizes).to(self.dtype)
        deployed.load_state_dict(load_state(need("model.pt")))
        deployed.eval()
        if not self.strategy.use_nas:
            self.fixed_model = deployed
        self.timeline = ModelTimeline(teacher=freeze(deployed), current=deployed, genotypes=genotypes)
        self.coreset = coreset
        self.accuracy = AccuracyMatrix.from_rows(state["accuracy"])
        self.max_params = int(state["max_params"])
        self.final_params = int(state["final_params"])
        self.records, self.audit, self.timings = [], [], []
        for m in range(1, n + 1):
            s = json.loads((root / f"task_{m:02d}" / "state.json").read_text(encoding="utf-8"))
            self.records += s["records"]
            self.audit += s["audit"]
            self.timings += s["timings"]
        self.completed = n
        return self
