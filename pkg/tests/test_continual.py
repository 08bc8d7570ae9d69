import numpy as np
import pytest
import torch

from conftest import toy_signals
from idarts.continual import (STRATEGIES, IncrementalLearner, StrategyConfig, TaskSchedule, replay_batch,
                              strategy)
from idarts.errors import ConfigurationError, StageError, StateError
from idarts.objectives import LossWeights
from idarts.search import SearchConfig
from idarts.utils import checksum, torch_generator

TINY_CFG = SearchConfig(epochs_search=1, epochs_retrain=2, finetune_epochs=2, batch_size=16)


def _learner(spec, strat="idarts_star", n_tasks=3, seed=0, **kw):
    x, y = toy_signals(2 * n_tasks, 14, 32, seed=seed)
    xt, yt = toy_signals(2 * n_tasks, 6, 32, seed=seed + 100)
    schedule = TaskSchedule(tuple(tuple(range(2 * i, 2 * i + 2)) for i in range(n_tasks)))
    st = strat if isinstance(strat, StrategyConfig) else strategy(strat, coreset_budget=12)
    return IncrementalLearner(schedule, (x, y), (xt, yt), spec, st, kw.pop("cfg", TINY_CFG),
                              LossWeights(), seed=seed, **kw)


# -- schedule --------------------------------------------------------------------------

def test_schedule_positions_follow_task_order():
    s = TaskSchedule(((5, 1), (0,), (3, 2)))
    assert s.n_tasks == 3 and s.sizes == [2, 1, 2]
    assert s.classes == [5, 1, 0, 3, 2]
    assert s.to_positions(np.array([0, 5, 2])).tolist() == [2, 0, 4]
    assert s.task_of(3) == 3
    assert s.positions_upto(2) == [0, 1, 2]
    assert TaskSchedule.from_dict(s.to_dict()) == s


@pytest.mark.parametrize("tasks", [((0, 1), (1, 2)), ((0,), ()), ()])
def test_schedule_must_partition(tasks):
    with pytest.raises(ConfigurationError):
        TaskSchedule(tasks)


# -- strategies --------------------------------------------------------------------------

def test_strategy_matrix():
    s = STRATEGIES
    assert s["idarts"] == StrategyConfig(True, True, False, True, "herding")
    assert s["idarts_star"] == StrategyConfig(True, True, True, True, "herding")
    assert s["naive"] == StrategyConfig(False, False, False, False, "none")
    assert not s["idarts_star_no_balancing"].use_balancing
    assert not s["idarts_star_no_kd"].use_kd
    assert not s["darts"].use_kd and not s["darts"].use_balancing and s["darts"].use_nas
    assert s["lwf"].use_kd and s["lwf"].replay_mode == "none"
    assert s["e2e"].use_kd and s["e2e"].use_balancing and not s["e2e"].use_nas


def test_effective_weights_follow_flags():
    w = LossWeights(0.5, 1e-3)
    assert STRATEGIES["idarts"].effective_weights(w) == LossWeights(0.5, 0.0)
    assert STRATEGIES["idarts_star"].effective_weights(w) == LossWeights(0.5, 1e-3)
    assert STRATEGIES["naive"].effective_weights(w) == LossWeights(0.0, 0.0)


def test_strategy_overrides_and_errors():
    assert strategy("idarts", replay_mode="random").replay_mode == "random"
    with pytest.raises(ConfigurationError):
        strategy("nope")
    with pytest.raises(ConfigurationError):
        StrategyConfig(replay_mode="reservoir")


# -- replay ----------------------------------------------------------------------------------

def _pool():
    task = (torch.arange(6, dtype=torch.float64)[:, None], torch.tensor([0, 0, 0, 1, 1, 1]))
    core = (torch.arange(100, 104, dtype=torch.float64)[:, None], torch.tensor([5, 5, 6, 6]))
    return task, core


def test_replay_none_stays_in_task():
    task, core = _pool()
    _, y = replay_batch(task, core, 64, mode="none", generator=torch_generator(0))
    assert set(y.tolist()) <= {0, 1}


def test_replay_empty_coreset_equals_none():
    task, _ = _pool()
    empty = (torch.zeros(0, 1, dtype=torch.float64), torch.zeros(0, dtype=torch.long))
    a = replay_batch(task, empty, 32, mode="herding", generator=torch_generator(3))
    b = replay_batch(task, None, 32, mode="none", generator=torch_generator(3))
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_replay_draws_uniformly():
    task, core = _pool()
    x, _ = replay_batch(task, core, 10_000, mode="herding", generator=torch_generator(0))
    values = torch.cat([task[0], core[0]]).ravel().tolist()
    counts = np.array([(x.ravel() == v).sum().item() for v in values])
    p = 1 / len(values)
    sigma = np.sqrt(10_000 * p * (1 - p))
    assert np.all(np.abs(counts - 10_000 * p) <= 3 * sigma), counts


def test_replay_errors():
    task, core = _pool()
    with pytest.raises(ValueError):
        replay_batch(task, core, 0)
    with pytest.raises(ValueError):
        replay_batch((task[0][:0], task[1][:0]), None, 4, mode="none")


# -- the task cycle --------------------------------------------------------------------------------

def test_first_task_has_no_teacher_and_builds_coreset(tiny_spec):
    lr = _learner(tiny_spec).run_task(1)
    kd = [r["train_kd"] for r in lr.records if r["stage"] == "search"]
    kd += [r["kd"] for r in lr.records if r["stage"] == "retrain"]
    assert kd and all(v == 0.0 for v in kd)
    assert lr.coreset.class_sizes() == {0: 6, 1: 6}
    assert not any(r["stage"] == "finetune" for r in lr.records)


def test_stage_order(tiny_spec):
    lr = _learner(tiny_spec).run(stop_after=2)
    stages = [t["stage"] for t in lr.timings if t["task"] == 2]
    assert stages == ["expand_head", "search", "infer_genotype", "derive_child", "retrain",
                      "select_balanced_set", "finetune", "snapshot_teacher", "evaluate", "task_total"]


def test_baseline_skips_search(tiny_spec):
    lr = _learner(tiny_spec, "e2e").run(stop_after=2)
    stages = {t["stage"] for t in lr.timings}
    assert "search" not in stages and "infer_genotype" not in stages
    assert lr.supernet is None and not lr.alpha_snapshots
    assert lr.genotypes[0].edges == lr.genotypes[1].edges


def test_class_incremental_evaluation(tiny_spec):
    lr = _learner(tiny_spec).run(stop_after=2)
    assert lr.evaluation_classes() == [0, 1, 2, 3]
    assert lr.deployed.head_sizes == [2, 2]
    x = lr.test[1][0][:3]
    assert lr.deployed.eval()(x).shape == (3, 4)
    assert (2, 1) in lr.accuracy and (2, 2) in lr.accuracy and (2, 3) not in lr.accuracy


def test_teacher_lineage(tiny_spec):
    lr = _learner(tiny_spec)
    deployed = {}
    for n in (1, 2):
        lr.run_task(n)
        deployed[n] = checksum(lr.deployed.state_dict().values())
        assert checksum(lr.teacher.state_dict().values()) == deployed[n]
    teacher = lr.teacher
    probe = lr.test[1][0][:4]
    before = teacher(probe).clone()
    lr.run_task(3)
    assert torch.equal(teacher(probe), before)
    assert checksum(teacher.state_dict().values()) == deployed[2] != deployed[1]
    assert all(not p.requires_grad for p in lr.teacher.parameters())


def test_naive_never_touches_old_data(tiny_spec):
    lr = _learner(tiny_spec, "naive").run()
    assert not any(lr.old_data_accessed(n) for n in (1, 2, 3))
    replay = _learner(tiny_spec, strategy("darts", coreset_budget=12)).run(stop_after=2)
    assert replay.old_data_accessed(2)


def test_coreset_contracts_over_run(tiny_spec):
    lr = _learner(tiny_spec)
    for n in (1, 2, 3):
        lr.run_task(n)
        sizes = list(lr.coreset.class_sizes().values())
        assert lr.coreset.size <= 12 and max(sizes) - min(sizes) <= 1
        assert sorted(lr.coreset.classes) == list(range(2 * n))


def test_out_of_order_task(tiny_spec):
    lr = _learner(tiny_spec)
    with pytest.raises(StateError):
        lr.run_task(2)


def test_stage_failure_names_stage(tiny_spec, monkeypatch):
    import idarts.continual as continual

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(continual, "retrain_phase", boom)
    with pytest.raises(StageError, match="stage 'retrain'") as info:
        _learner(tiny_spec).run_task(1)
    assert info.value.stage == "retrain" and info.value.task == 1


def test_max_params_at_least_final(tiny_spec):
    lr = _learner(tiny_spec).run(stop_after=2)
    assert lr.max_params >= lr.final_params > 0


def test_checkpoint_resume_is_exact(tiny_spec, tmp_path):
    full = _learner(tiny_spec).run()
    part = _learner(tiny_spec, checkpoint_dir=tmp_path).run(stop_after=1)
    assert IncrementalLearner.completed_tasks(tmp_path) == [1]
    resumed = _learner(tiny_spec).restore(tmp_path).run()
    assert resumed.accuracy == full.accuracy
    assert part.completed == 1


def test_restore_missing_file_named(tiny_spec, tmp_path):
    _learner(tiny_spec, checkpoint_dir=tmp_path).run(stop_after=1)
    (tmp_path / "task_01" / "coreset.npz").unlink()
    with pytest.raises(FileNotFoundError, match="coreset.npz"):
        _learner(tiny_spec).restore(tmp_path)
