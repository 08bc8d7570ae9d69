"""Exemplar memory: herding selection and a per-class, budgeted coreset.

Coreset checkpoint layout (``numpy.savez`` container, no pickled objects):

    version  int64 scalar, currently 1
    budget   int64 scalar, total exemplar budget K
    labels   int64 [S], class (head position) of each stored exemplar
    ranks    int64 [S], 0-based herding rank within its class
    inputs   float [S, ...], raw inputs, row-aligned with labels/ranks

Rows are written grouped by class id ascending, rank ascending.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError

CORESET_VERSION = 1


def herding_select(features, m):
    """Greedy herding order over the rows of ``features``.

    Step k picks the unused row x minimizing
    ``|| mu - (f(x) + sum of the k-1 already chosen rows) / k ||`` where mu is
    the mean row. Ties go to the lowest index. Returns ``min(m, N)`` distinct
    indices in selection order.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1:
        raise ValueError(f"features must be a non-empty [N, D] array, got shape {f.shape}")
    m = min(int(m), f.shape[0])
    if m <= 0:
        return []
    mu = f.mean(axis=0)
    running = np.zeros(f.shape[1])
    used = np.zeros(f.shape[0], dtype=bool)
    order = []
    for k in range(1, m + 1):
        dist = np.linalg.norm(mu - (running + f) / k, axis=1)
        dist[used] = np.inf
        i = int(np.argmin(dist))
        order.append(i)
        used[i] = True
        running += f[i]
    return order


@torch.no_grad()
def embed(model, x, batch_size=512):
    """L2-normalized penultimate features of ``model`` in eval mode, as float64 numpy."""
    model.eval()
    x = torch.as_tensor(x)
    ref = next(model.parameters())
    out = [F.normalize(model.features(x[i:i + batch_size].to(ref.dtype)), dim=1)
           for i in range(0, x.shape[0], batch_size)]
    return torch.cat(out).double().cpu().numpy()


def class_quotas(classes, budget):
    """Per-class exemplar counts: floor(K / n), remainder to the lowest class ids."""
    classes = sorted(int(c) for c in classes)
    if not classes:
        return {}
    base, rem = divmod(int(budget), len(classes))
    if base == 0:
        raise ConfigurationError(
            f"coreset budget {budget} is too small for {len(classes)} classes (quota 0)")
    return {c: base + (1 if i < rem else 0) for i, c in enumerate(classes)}


@dataclass
class Coreset:
    budget: int
    # class id -> inputs ordered by herding rank (rank 1 first)
    per_class: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.budget < 0:
            raise ConfigurationError("coreset budget must be >= 0")

    @property
    def size(self):
        return sum(len(v) for v in self.per_class.values())

    def __len__(self):
        return self.size

    @property
    def classes(self):
        return sorted(self.per_class)

    def class_sizes(self):
        return {c: len(self.per_class[c]) for c in self.classes}

    def arrays(self):
        """(inputs, labels) concatenated by class id, rank order within a class."""
        if not self.per_class:
            return None, np.zeros(0, dtype=np.int64)
        xs = [self.per_class[c] for c in self.classes]
        ys = [np.full(len(self.per_class[c]), c, dtype=np.int64) for c in self.classes]
        return np.concatenate(xs), np.concatenate(ys)

    def tensors(self, dtype=torch.float64, sample_shape=None):
        x, y = self.arrays()
        if x is None:
            shape = (0,) + tuple(sample_shape or ())
            return torch.zeros(shape, dtype=dtype), torch.zeros(0, dtype=torch.long)
        return torch.as_tensor(x, dtype=dtype), torch.as_tensor(y, dtype=torch.long)

    def truncated(self, quotas):
        return Coreset(self.budget, {c: v[:quotas[c]] for c, v in self.per_class.items()})

    def save(self, path):
        x, y = self.arrays()
        ranks = (np.concatenate([np.arange(len(self.per_class[c])) for c in self.classes])
                 if self.per_class else np.zeros(0, dtype=np.int64))
        if x is None:
            x = np.zeros((0,), dtype=np.float64)
        with open(path, "wb") as fh:
            np.savez(fh, version=np.int64(CORESET_VERSION), budget=np.int64(self.budget),
                     labels=y.astype(np.int64), ranks=ranks.astype(np.int64), inputs=x)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"coreset file not found: {path}")
        try:
            with np.load(path, allow_pickle=False) as z:
                version = int(z["version"])
                budget = int(z["budget"])
                labels, ranks, inputs = z["labels"], z["ranks"], z["inputs"]
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigurationError(f"corrupt coreset file {path}: {exc}") from exc
        if version != CORESET_VERSION:
            raise ConfigurationError(f"unsupported coreset version {version} in {path}")
        per_class = {}
        for c in sorted(set(labels.tolist())):
            rows = np.nonzero(labels == c)[0]
            rows = rows[np.argsort(ranks[rows], kind="stable")]
            per_class[int(c)] = inputs[rows]
        return cls(budget, per_class)


def update_coreset(core, new_task_data, model, classes_seen, mode="herding", rng=None):
    """Rebalance the coreset to ``classes_seen`` and add exemplars of the new classes.

    Old classes are cut to their quota by herding rank; every class present
    in ``new_task_data`` is filled by herding on ``model``'s normalized
    features (``mode='herding'``) or by uniform sampling without replacement
    (``mode='random'``). Returns a new Coreset.
    """
    if mode not in ("herding", "random"):
        raise ValueError(f"unknown coreset mode {mode!r}")
    quotas = class_quotas(classes_seen, core.budget)
    x_new, y_new = new_task_data
    x_np = x_new.detach().cpu().numpy() if isinstance(x_new, torch.Tensor) else np.asarray(x_new)
    y_np = y_new.detach().cpu().numpy() if isinstance(y_new, torch.Tensor) else np.asarray(y_new)
    new_classes = sorted(set(int(c) for c in y_np))
    missing = [c for c in new_classes if c not in quotas]
    if missing:
        raise ConfigurationError(f"classes {missing} of the new task are not in classes_seen")

    per_class = {c: v[:quotas[c]] for c, v in core.per_class.items() if c in quotas and c not in new_classes}
    feats = embed(model, x_new) if mode == "herding" and len(y_np) else None
    if rng is None:
        rng = np.random.default_rng(0)
    for c in new_classes:
        rows = np.nonzero(y_np == c)[0]
        if mode == "herding":
            order = herding_select(feats[rows], quotas[c])
        else:
            order = rng.choice(len(rows), size=min(quotas[c], len(rows)), replace=False).tolist()
        per_class[c] = x_np[rows[order]]
    return Coreset(core.budget, per_class)
