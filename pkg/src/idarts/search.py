"""Bilevel architecture search, child retraining and class-balanced head fine-tuning.

Batches are ``(x, y)`` tensor pairs; ``y`` holds head positions (column
indices into the concatenated logits), not raw class ids.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import ConfigurationError
from .objectives import LossWeights, alpha_reg, idarts_loss
from .utils import torch_generator


@dataclass
class SearchConfig:
    epochs_search: int = 50
    epochs_retrain: int = 125
    lr_w: float = 0.05
    lr_alpha: float = 5e-3
    weight_decay: float = 2e-4
    batch_size: int = 128
    lr_milestones: tuple = (50, 75, 100)
    lr_gamma: float = 0.1
    finetune_epochs: int = 30
    finetune_lr: float = 0.01
    val_fraction: float = 0.5
    momentum: float = 0.9
    search_optimizer: str = "adam"
    retrain_optimizer: str = "sgd"
    grad_clip: Optional[float] = None
    finetune_kd: bool = False

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if not 0 < self.val_fraction < 1:
            raise ConfigurationError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        for name in ("search_optimizer", "retrain_optimizer"):
            if getattr(self, name) not in ("adam", "sgd"):
                raise ConfigurationError(f"{name} must be 'adam' or 'sgd'")


def lr_at(epoch, base_lr, milestones, gamma=0.1):
    """Step schedule: ``base_lr`` times ``gamma`` per milestone already reached."""
    return base_lr * gamma ** sum(1 for m in milestones if epoch >= m)


def _optimizer(kind, params, lr, weight_decay=0.0, momentum=0.9):
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def _total(out):
    return out.total if hasattr(out, "total") else out


def _assign_grads(loss, params, clip=None):
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = None if g is None else g.detach()
    if clip is not None:
        torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], clip)


def alternate(alpha_params, w_params, a_opt, w_opt, val_closure, train_closure, audit=None, grad_clip=None):
    """One first-order bilevel iteration: an alpha step on the validation
    objective, then a weight step on the training objective.

    Gradients are taken only with respect to the parameter set being
    stepped, so neither step can touch the other's parameters.
    """
    val = val_closure()
    _assign_grads(_total(val), alpha_params)
    a_opt.step()
    for p in alpha_params:
        p.grad = None
    if audit is not None:
        audit("alpha")

    train = train_closure()
    _assign_grads(_total(train), w_params, grad_clip)
    w_opt.step()
    for p in w_params:
        p.grad = None
    if audit is not None:
        audit("w")
    return val, train


@torch.no_grad()
def teacher_logits(teacher, x):
    if teacher is None:
        return None
    teacher.eval()
    return teacher(x)


def task_objective(model, batch, teacher, weights, upto_task=None, alpha=None):
    x, y = batch
    logits = model(x, upto_task)
    t = teacher_logits(teacher, x) if weights.mu > 0 else None
    return idarts_loss(logits, y, t, alpha, weights)


def bilevel_step(net, train_batch, val_batch, teacher, weights: LossWeights, w_opt, a_opt,
                 upto_task=None, audit=None, grad_clip=None):
    """Alpha update on ``val_batch`` followed by a weight update on ``train_batch``."""
    for name, batch in (("train", train_batch), ("val", val_batch)):
        if batch[0].shape[0] == 0:
            raise ValueError(f"empty {name} batch")
    alpha = net.arch_parameters()
    w = net.weight_parameters()
    val, train = alternate(
        alpha, w, a_opt, w_opt,
        lambda: task_objective(net, val_batch, teacher, weights, upto_task, net.alpha),
        lambda: task_objective(net, train_batch, teacher, weights, upto_task, net.alpha),
        audit=audit, grad_clip=grad_clip,
    )
    return {"val": val.as_floats(), "train": train.as_floats()}


def make_search_optimizers(net, cfg: SearchConfig):
    w_opt = _optimizer(cfg.search_optimizer, net.weight_parameters(), cfg.lr_w, cfg.weight_decay, cfg.momentum)
    # no weight decay on alpha
    a_opt = _optimizer(cfg.search_optimizer, net.arch_parameters(), cfg.lr_alpha, 0.0, cfg.momentum)
    return w_opt, a_opt


def concat_pool(task_data, coreset=None):
    x, y = task_data
    if coreset is not None and coreset[0].shape[0] > 0:
        x = torch.cat([x, coreset[0].to(x.dtype)])
        y = torch.cat([y, coreset[1]])
    return x, y


def stratified_split(labels, val_fraction, generator):
    """Per-class random split into (train_idx, val_idx) tensors."""
    labels = labels.cpu()
    train, val = [], []
    for c in torch.unique(labels).tolist():
        idx = torch.nonzero(labels == c).flatten()
        idx = idx[torch.randperm(idx.numel(), generator=generator)]
        n = idx.numel()
        n_val = int(math.floor(n * val_fraction + 0.5))
        if n > 1:
            # both halves see every class that has at least two examples
            n_val = min(max(n_val, 1), n - 1)
        val.append(idx[:n_val])
        train.append(idx[n_val:])
    train = torch.cat(train) if train else torch.empty(0, dtype=torch.long)
    val = torch.cat(val) if val else torch.empty(0, dtype=torch.long)
    if train.numel() == 0 or val.numel() == 0:
        raise ConfigurationError(
            f"train/val split of {labels.numel()} examples left an empty half "
            f"(train={train.numel()}, val={val.numel()})")
    return torch.sort(train).values, torch.sort(val).values


def minibatches(n, batch_size, generator):
    perm = torch.randperm(n, generator=generator)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _mean_records(rows):
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


@dataclass
class SearchResult:
    records: list = field(default_factory=list)
    alpha_snapshot: object = None
    alpha_snapshots: list = field(default_factory=list)


def search_phase(net, task_data, coreset, teacher, weights: LossWeights, cfg: SearchConfig,
                 upto_task=None, seed=0, audit=None):
    """Run ``cfg.epochs_search`` epochs of bilevel search on X_n plus the coreset.

    The pool is split per class into a weight-training half and an alpha
    (validation) half. Returns per-epoch loss records and alpha snapshots.
    """
    x, y = concat_pool(task_data, coreset)
    if x.shape[0] == 0:
        raise ValueError("search_phase needs task data")
    g = torch_generator(seed)
    train_idx, val_idx = stratified_split(y, cfg.val_fraction, g)
    w_opt, a_opt = make_search_optimizers(net, cfg)
    result = SearchResult()
    for epoch in range(cfg.epochs_search):
        net.train()
        t_batches = minibatches(train_idx.numel(), cfg.batch_size, g)
        v_batches = minibatches(val_idx.numel(), cfg.batch_size, g)
        rows = []
        for i, tb in enumerate(t_batches):
            vb = v_batches[i % len(v_batches)]
            ti, vi = train_idx[tb], val_idx[vb]
            out = bilevel_step(net, (x[ti], y[ti]), (x[vi], y[vi]), teacher, weights, w_opt, a_opt,
                               upto_task, audit=audit, grad_clip=cfg.grad_clip)
            rows.append({**{f"train_{k}": v for k, v in out["train"].items()},
                         **{f"val_{k}": v for k, v in out["val"].items()}})
        snap = net.alpha_table()
        rec = {"stage": "search", "epoch": epoch, **_mean_records(rows),
               "alpha_norm": float(alpha_reg(snap)),
               "alpha_mean_abs": float(np.mean(np.abs(snap.values)))}
        result.records.append(rec)
        result.alpha_snapshots.append(snap)
    result.alpha_snapshot = net.alpha_table()
    return result


def retrain_phase(child, task_data, coreset, teacher, weights: LossWeights, cfg: SearchConfig,
                  upto_task=None, seed=0):
    """Train the discrete child on X_n plus the coreset with the step schedule.

    The child has no alpha, so the objective is CE + mu * KD.
    """
    x, y = concat_pool(task_data, coreset)
    if x.shape[0] == 0:
        raise ValueError("retrain_phase needs task data")
    g = torch_generator(seed)
    opt = _optimizer(cfg.retrain_optimizer, list(child.parameters()), cfg.lr_w, cfg.weight_decay, cfg.momentum)
    params = list(child.parameters())
    records = []
    for epoch in range(cfg.epochs_retrain):
        lr = lr_at(epoch, cfg.lr_w, cfg.lr_milestones, cfg.lr_gamma)
        _set_lr(opt, lr)
        child.train()
        rows = []
        for idx in minibatches(x.shape[0], cfg.batch_size, g):
            out = task_objective(child, (x[idx], y[idx]), teacher, weights, upto_task)
            _assign_grads(out.total, params, cfg.grad_clip)
            opt.step()
            rows.append(out.as_floats())
        records.append({"stage": "retrain", "epoch": epoch, "lr": lr, **_mean_records(rows)})
    child.eval()
    return records


def class_balanced_finetune(child, coreset, cfg: SearchConfig, upto_task=None, seed=0,
                            teacher=None, weights: Optional[LossWeights] = None):
    """Fine-tune only the classifier head on the class-balanced coreset.

    Backbone features are computed once in eval mode without gradients, so
    backbone parameters and normalization statistics stay bit-identical.
    Distillation is added only when ``cfg.finetune_kd`` is set.
    """
    if coreset is None or coreset[0].shape[0] == 0:
        warnings.warn("class-balanced fine-tuning skipped: empty coreset")
        return [{"stage": "finetune", "epoch": -1, "warning": "empty coreset"}]
    x, y = coreset
    child.eval()
    with torch.no_grad():
        feats = torch.cat([child.features(x[i:i + 512]) for i in range(0, x.shape[0], 512)])
        t_logits = None
        use_kd = cfg.finetune_kd and teacher is not None and weights is not None and weights.mu > 0
        if use_kd:
            t_logits = teacher_logits(teacher, x)
    kd_weights = weights if use_kd else LossWeights(mu=0.0, lam=0.0)
    head = child.head_parameters()
    opt = torch.optim.SGD(head, lr=cfg.finetune_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    g = torch_generator(seed)
    records = []
    for epoch in range(cfg.finetune_epochs):
        rows = []
        for idx in minibatches(feats.shape[0], cfg.batch_size, g):
            logits = child.head(feats[idx], upto_task)
            out = idarts_loss(logits, y[idx], None if t_logits is None else t_logits[idx], None, kd_weights)
            _assign_grads(out.total, head)
            opt.step()
            rows.append(out.as_floats())
        records.append({"stage": "finetune", "epoch": epoch, "lr": cfg.finetune_lr, **_mean_records(rows)})
    return records
