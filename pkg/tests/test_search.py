import copy
import warnings

import numpy as np
import pytest
import torch

from conftest import toy_signals
from idarts.errors import ConfigurationError
from idarts.genotypes import CellSpec, Genotype
from idarts.objectives import LossWeights
from idarts.search import (SearchConfig, alternate, bilevel_step, class_balanced_finetune, lr_at,
                           make_search_optimizers, retrain_phase, search_phase, stratified_split,
                           task_objective)
from idarts.supernet import ChildNet, SuperNet
from idarts.utils import checksum, torch_generator


def _data(n_classes=2, n_per_class=16, L=32, seed=0):
    x, y = toy_signals(n_classes, n_per_class, L, seed)
    return torch.tensor(x), torch.tensor(y)


def _net(spec, heads=(2,)):
    torch.manual_seed(0)
    return SuperNet(spec, head_sizes=heads).double()


# -- config and schedule ---------------------------------------------------------

def test_search_config_defaults():
    c = SearchConfig()
    assert (c.epochs_search, c.epochs_retrain, c.lr_w, c.lr_alpha, c.weight_decay, c.batch_size) == \
        (50, 125, 0.05, 5e-3, 2e-4, 128)
    assert tuple(c.lr_milestones) == (50, 75, 100) and c.lr_gamma == 0.1
    assert c.val_fraction == 0.5 and c.grad_clip is None and c.finetune_kd is False


@pytest.mark.parametrize("epoch,lr", [(0, 0.05), (49, 0.05), (50, 0.005), (74, 0.005),
                                      (75, 5e-4), (100, 5e-5), (124, 5e-5)])
def test_step_schedule(epoch, lr):
    assert lr_at(epoch, 0.05, (50, 75, 100), 0.1) == pytest.approx(lr, rel=1e-12)


@pytest.mark.parametrize("kw", [{"val_fraction": 0.0}, {"val_fraction": 1.0}, {"batch_size": 0},
                                {"search_optimizer": "lbfgs"}])
def test_search_config_validation(kw):
    with pytest.raises(ConfigurationError):
        SearchConfig(**kw)


# -- first-order alternation ------------------------------------------------------

def test_alternate_converges_on_quadratic_surrogate():
    # inner (train) loss (w - a)^2, outer (val) loss (a + w - 4)^2; joint fixed point a = w = 2
    a = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    w = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    a_opt = torch.optim.SGD([a], lr=0.1)
    w_opt = torch.optim.SGD([w], lr=0.1)
    for _ in range(500):
        alternate([a], [w], a_opt, w_opt, lambda: ((a + w - 4) ** 2).sum(), lambda: ((w - a) ** 2).sum())
    assert abs(a.item() - 2.0) < 1e-3 and abs(w.item() - 2.0) < 1e-3


def test_optimizers_hold_disjoint_parameter_sets(tiny_spec):
    net = _net(tiny_spec)
    w_opt, a_opt = make_search_optimizers(net, SearchConfig())
    a_ids = {id(p) for g in a_opt.param_groups for p in g["params"]}
    w_ids = {id(p) for g in w_opt.param_groups for p in g["params"]}
    assert a_ids == {id(net.alpha)}
    assert not a_ids & w_ids
    assert w_ids == {id(p) for p in net.weight_parameters()}
    assert all(g["weight_decay"] == 0 for g in a_opt.param_groups)
    assert all(g["weight_decay"] == 2e-4 for g in w_opt.param_groups)


def _one_step(spec, cfg):
    net = _net(spec)
    x, y = _data()
    w_opt, a_opt = make_search_optimizers(net, cfg)
    a0, w0 = checksum([net.alpha]), checksum(net.weight_parameters())
    bilevel_step(net, (x[:8], y[:8]), (x[8:16], y[8:16]), None, LossWeights(), w_opt, a_opt)
    return net, a0, w0


def test_zero_alpha_lr_freezes_alpha(tiny_spec):
    net, a0, w0 = _one_step(tiny_spec, SearchConfig(lr_alpha=0.0))
    assert checksum([net.alpha]) == a0
    assert checksum(net.weight_parameters()) != w0


def test_zero_weight_lr_freezes_weights(tiny_spec):
    net, a0, w0 = _one_step(tiny_spec, SearchConfig(lr_w=0.0, weight_decay=0.0))
    assert checksum(net.weight_parameters()) == w0
    assert checksum([net.alpha]) != a0


def test_step_isolation_audit(tiny_spec):
    net = _net(tiny_spec)
    x, y = _data()
    w_opt, a_opt = make_search_optimizers(net, SearchConfig())
    state = {"a": checksum([net.alpha]), "w": checksum(net.weight_parameters())}
    log = []

    def audit(kind):
        a, w = checksum([net.alpha]), checksum(net.weight_parameters())
        log.append((kind, a != state["a"], w != state["w"]))
        state["a"], state["w"] = a, w

    for _ in range(5):
        bilevel_step(net, (x[:8], y[:8]), (x[8:16], y[8:16]), None, LossWeights(), w_opt, a_opt, audit=audit)
    assert log == [("alpha", True, False), ("w", False, True)] * 5


def test_empty_batch_rejected(tiny_spec):
    net = _net(tiny_spec)
    x, y = _data()
    w_opt, a_opt = make_search_optimizers(net, SearchConfig())
    with pytest.raises(ValueError):
        bilevel_step(net, (x[:0], y[:0]), (x[:4], y[:4]), None, LossWeights(), w_opt, a_opt)


# -- split ------------------------------------------------------------------------------

def test_stratified_split_halves_each_class():
    y = torch.tensor([0] * 10 + [1] * 6 + [2] * 4)
    tr, va = stratified_split(y, 0.5, torch_generator(0))
    assert not set(tr.tolist()) & set(va.tolist())
    assert sorted(tr.tolist() + va.tolist()) == list(range(20))
    for c, n in ((0, 10), (1, 6), (2, 4)):
        assert int((y[va] == c).sum()) == n // 2


def test_search_phase_empty_val_split(tiny_spec):
    x, y = _data(n_per_class=1)
    with pytest.raises(ConfigurationError):
        search_phase(_net(tiny_spec), (x, y), None, None, LossWeights(), SearchConfig(epochs_search=1))


# -- search phase --------------------------------------------------------------------------

def _search(spec, lam, epochs=3, seed=0):
    net = _net(spec)
    x, y = _data()
    cfg = SearchConfig(epochs_search=epochs, batch_size=8)
    return net, search_phase(net, (x, y), None, None, LossWeights(mu=0.5, lam=lam), cfg, seed=seed)


def test_search_records_components_add_up(tiny_spec):
    _, res = _search(tiny_spec, 1e-3)
    assert len(res.records) == 3 and len(res.alpha_snapshots) == 3
    for r in res.records:
        for half in ("train", "val"):
            total = r[f"{half}_ce"] + 0.5 * r[f"{half}_kd"] + 1e-3 * r[f"{half}_reg"]
            assert r[f"{half}_total"] == pytest.approx(total, abs=1e-6)
            assert r[f"{half}_kd"] == 0.0
        assert r["alpha_norm"] > 0


def test_search_is_deterministic(tiny_spec):
    _, a = _search(tiny_spec, 1e-3)
    _, b = _search(tiny_spec, 1e-3)
    assert a.records == b.records
    assert np.array_equal(a.alpha_snapshot.values, b.alpha_snapshot.values)


def test_alpha_regularization_shrinks_alpha_norm(tiny_spec):
    _, free = _search(tiny_spec, 0.0, epochs=4)
    _, reg = _search(tiny_spec, 1e-3, epochs=4)
    assert reg.records[-1]["alpha_norm"] <= free.records[-1]["alpha_norm"]


def test_probe_loss_non_increasing_on_separable_toy(tiny_spec):
    net = _net(tiny_spec)
    x, y = _data(n_per_class=32)
    probe = (x[::4], y[::4])
    cfg = SearchConfig(epochs_search=1, batch_size=16, lr_w=0.01)
    w = LossWeights(mu=0.0, lam=0.0)
    losses = []
    for epoch in range(5):
        search_phase(net, (x, y), None, None, w, cfg, seed=epoch)
        net.eval()
        with torch.no_grad():
            losses.append(task_objective(net, probe, None, w).total.item())
    assert all(b <= a for a, b in zip(losses, losses[1:])), losses


# -- retrain -----------------------------------------------------------------------------------

def _blobs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    x = rng.normal(scale=0.5, size=(n, 2, 16))
    x[y == 1, 0] += 2.0
    x[y == 0, 0] -= 2.0
    return torch.tensor(x), torch.tensor(y)


def test_retrain_fits_separable_points():
    spec = CellSpec(n_nodes=1, n_cells=1, channels=4, dim=1, in_channels=2, stem_multiplier=1)
    torch.manual_seed(0)
    child = ChildNet(Genotype.uniform(spec, "sep_conv_3"), head_sizes=(2,)).double()
    x, y = _blobs()
    cfg = SearchConfig(epochs_retrain=10, batch_size=32)
    records = retrain_phase(child, (x, y), None, None, LossWeights(mu=0.0, lam=0.0), cfg)
    assert [r["lr"] for r in records] == [0.05] * 10
    with torch.no_grad():
        acc = (child.eval()(x).argmax(1) == y).double().mean().item()
    assert acc >= 0.95


def test_retrain_uses_step_schedule():
    spec = CellSpec(n_nodes=1, n_cells=1, channels=2, dim=1, in_channels=2, stem_multiplier=1)
    child = ChildNet(Genotype.uniform(spec, "identity"), head_sizes=(2,)).double()
    x, y = _blobs(8)
    cfg = SearchConfig(epochs_retrain=6, lr_milestones=(2, 4), batch_size=8)
    records = retrain_phase(child, (x, y), None, None, LossWeights(mu=0.0), cfg)
    assert [r["lr"] for r in records] == pytest.approx([0.05, 0.05, 0.005, 0.005, 5e-4, 5e-4])


def test_identical_teacher_gives_zero_kd():
    spec = CellSpec(n_nodes=1, n_cells=1, channels=4, dim=1, in_channels=2, stem_multiplier=1)
    child = ChildNet(Genotype.uniform(spec, "sep_conv_3"), head_sizes=(2, 2)).double().eval()
    teacher = copy.deepcopy(child)
    teacher.head.blocks = teacher.head.blocks[:1]
    x, _ = _blobs(16)
    out = task_objective(child, (x, torch.zeros(16, dtype=torch.long)), teacher, LossWeights())
    assert out.kd.item() < 1e-12


# -- class-balanced fine-tuning ----------------------------------------------------------------

def _trained_child(spec):
    torch.manual_seed(1)
    child = ChildNet(Genotype.uniform(spec, "sep_conv_3"), head_sizes=(2, 2)).double()
    x, y = _data(n_classes=4, n_per_class=16)
    retrain_phase(child, (x, y), None, None, LossWeights(mu=0.0), SearchConfig(epochs_retrain=3, batch_size=16))
    return child, x, y


def test_finetune_only_moves_head(tiny_spec):
    child, x, y = _trained_child(tiny_spec)
    backbone = checksum(t for k, t in child.state_dict().items() if not k.startswith("head."))
    head = checksum(child.head_parameters())
    records = class_balanced_finetune(child, (x, y), SearchConfig(finetune_epochs=2, batch_size=16))
    assert len(records) == 2
    assert checksum(t for k, t in child.state_dict().items() if not k.startswith("head.")) == backbone
    assert checksum(child.head_parameters()) != head


def test_finetune_empty_coreset_warns(tiny_spec):
    child, _, _ = _trained_child(tiny_spec)
    before = checksum(child.parameters())
    with pytest.warns(UserWarning):
        rec = class_balanced_finetune(child, (torch.zeros(0, 2, 32, dtype=torch.float64),
                                              torch.zeros(0, dtype=torch.long)), SearchConfig())
    assert rec[0]["warning"] == "empty coreset"
    assert checksum(child.parameters()) == before


def test_finetune_reduces_injected_new_class_bias(tiny_spec):
    child, x, y = _trained_child(tiny_spec)
    with torch.no_grad():
        child.head.blocks[1].bias += 2.0

    def margin():
        with torch.no_grad():
            z = child.eval()(x)
        return (z[:, 2:].mean() - z[:, :2].mean()).item()

    before = margin()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        class_balanced_finetune(child, (x, y), SearchConfig(finetune_epochs=10, batch_size=16))
    assert margin() < before
