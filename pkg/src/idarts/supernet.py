"""Supernet with mixed edges, the derived child network and the expandable head."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .genotypes import AlphaTable, CellSpec, Genotype
from .ops import PRIMITIVES, FactorizedReduce, ReLUConvBN, make_op
from .utils import seeded

_CONV = {1: nn.Conv1d, 2: nn.Conv2d}
_BN = {1: nn.BatchNorm1d, 2: nn.BatchNorm2d}
_POOL = {1: nn.AdaptiveAvgPool1d, 2: nn.AdaptiveAvgPool2d}


def mixed_edge_forward(x, alpha_edge, ops):
    """Softmax(alpha_edge)-weighted sum of every candidate op applied to x."""
    if len(ops) != alpha_edge.shape[-1]:
        raise ConfigurationError(f"{len(ops)} ops but alpha has {alpha_edge.shape[-1]} entries")
    weights = F.softmax(alpha_edge, dim=-1)
    outs = [op(x) for op in ops]
    shape = outs[0].shape
    for kind, out in zip(PRIMITIVES, outs):
        if out.shape != shape:
            raise ConfigurationError(f"op {kind} produced shape {tuple(out.shape)}, expected {tuple(shape)}")
    return sum(w * out for w, out in zip(weights, outs))


class MixedEdge(nn.Module):
    def __init__(self, C, stride, dim):
        super().__init__()
        self.ops = nn.ModuleList(make_op(k, C, stride, dim=dim) for k in PRIMITIVES)

    def forward(self, x, alpha_edge):
        return mixed_edge_forward(x, alpha_edge, self.ops)


class DiscreteEdge(nn.Module):
    def __init__(self, kind, C, stride, dim):
        super().__init__()
        self.kind = kind
        self.op = make_op(kind, C, stride, dim=dim)

    def forward(self, x, alpha_edge=None):
        return self.op(x)


class Cell(nn.Module):
    """DAG cell; ``edge_kinds`` maps (src, dst) to an op name, or None for a mixed edge."""

    def __init__(self, spec, index, C_pp, C_p, C, reduction, reduction_prev, edge_kinds):
        super().__init__()
        dim = spec.dim
        self.n_nodes = spec.n_nodes
        self.reduction = reduction
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(C_pp, C, dim=dim, affine=False)
        else:
            self.preprocess0 = ReLUConvBN(C_pp, C, 1, 1, 0, dim=dim, affine=False)
        self.preprocess1 = ReLUConvBN(C_p, C, 1, 1, 0, dim=dim, affine=False)
        # edge order must follow CellSpec.cell_edges so alpha rows line up
        self.edge_keys = []
        self.edges = nn.ModuleDict()
        for _, src, dst in spec.cell_edges(index):
            if (src, dst) not in edge_kinds:
                continue
            stride = 2 if reduction and src < 2 else 1
            kind = edge_kinds[(src, dst)]
            key = f"{src}_{dst}"
            self.edges[key] = MixedEdge(C, stride, dim) if kind is None else DiscreteEdge(kind, C, stride, dim)
            self.edge_keys.append((src, dst, key))
        self._rows = {f"{s}_{d}": i for i, (_, s, d) in enumerate(spec.cell_edges(index))}

    def forward(self, s0, s1, alpha=None):
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        for dst in range(2, self.n_nodes + 2):
            terms = []
            for src, d, key in self.edge_keys:
                if d != dst:
                    continue
                a = None if alpha is None else alpha[self._rows[key]]
                terms.append(self.edges[key](states[src], a))
            states.append(sum(terms))
        return torch.cat(states[2:], dim=1)


class ClassifierHead(nn.Module):
    """One linear block per task; logits of tasks 1..k are the concatenation of blocks 0..k-1."""

    def __init__(self, in_features, sizes=()):
        super().__init__()
        self.in_features = in_features
        self.blocks = nn.ModuleList()
        for n in sizes:
            self.append(n)

    @property
    def sizes(self):
        return [b.out_features for b in self.blocks]

    def append(self, n_new, dtype=None):
        n_new = int(n_new)
        if n_new < 1:
            raise ValueError(f"a new head block needs at least one class, got {n_new}")
        if dtype is None:
            ref = next(self.parameters(), None)
            dtype = ref.dtype if ref is not None else None
        block = nn.Linear(self.in_features, n_new)
        if dtype is not None:
            block = block.to(dtype)
        self.blocks.append(block)

    def forward(self, features, upto_task=None):
        n = len(self.blocks) if upto_task is None else int(upto_task)
        if n < 1 or n > len(self.blocks):
            raise IndexError(f"upto_task={upto_task} but the head knows {len(self.blocks)} task(s)")
        return torch.cat([self.blocks[i](features) for i in range(n)], dim=1)


class _Network(nn.Module):
    def __init__(self, spec, head_sizes, cell_edge_kinds):
        super().__init__()
        self.spec = spec
        dim = spec.dim
        C = spec.channels
        C_stem = spec.stem_multiplier * C
        self.stem = nn.Sequential(
            _CONV[dim](spec.in_channels, C_stem, 3, stride=spec.stem_stride, padding=1, bias=False),
            _BN[dim](C_stem),
        )
        C_pp, C_p, C_curr = C_stem, C_stem, C
        reduction_prev = False
        self.cells = nn.ModuleList()
        for i in range(spec.n_cells):
            reduction = i in spec.reduction_positions
            if reduction:
                C_curr *= 2
            self.cells.append(Cell(spec, i, C_pp, C_p, C_curr, reduction, reduction_prev, cell_edge_kinds(i)))
            reduction_prev = reduction
            C_pp, C_p = C_p, spec.n_nodes * C_curr
        self.pool = _POOL[dim](1)
        self.feature_dim = C_p
        self.head = ClassifierHead(C_p, head_sizes)

    @property
    def head_sizes(self):
        return self.head.sizes

    @property
    def n_tasks(self):
        return len(self.head.blocks)

    def _cell_alpha(self, i):
        return None

    def features(self, x):
        """Penultimate (globally pooled) activations."""
        s0 = s1 = self.stem(x)
        for i, cell in enumerate(self.cells):
            s0, s1 = s1, cell(s0, s1, self._cell_alpha(i))
        return self.pool(s1).flatten(1)

    def forward(self, x, upto_task=None):
        if upto_task is not None and (int(upto_task) < 1 or int(upto_task) > self.n_tasks):
            raise IndexError(f"upto_task={upto_task} but the model knows {self.n_tasks} task(s)")
        return self.head(self.features(x), upto_task)

    def head_parameters(self):
        return list(self.head.parameters())

    def backbone_parameters(self):
        head = {id(p) for p in self.head.parameters()}
        return [p for p in self.parameters() if id(p) not in head]


class SuperNet(_Network):
    """Network whose every edge mixes all eight candidate operations."""

    def __init__(self, spec: CellSpec, head_sizes=(), alpha_init_scale=1e-3):
        super().__init__(spec, head_sizes, lambda i: {(s, d): None for _, s, d in spec.cell_edges(i)})
        self.edge_ids = spec.edges()
        self.alpha = nn.Parameter(alpha_init_scale * torch.randn(len(self.edge_ids), len(PRIMITIVES)))

    def _cell_alpha(self, i):
        k = self.spec.edges_per_cell
        return self.alpha[i * k:(i + 1) * k]

    def arch_parameters(self):
        return [self.alpha]

    def weight_parameters(self):
        return [p for p in self.parameters() if p is not self.alpha]

    def backbone_parameters(self):
        return [p for p in super().backbone_parameters() if p is not self.alpha]

    def alpha_table(self):
        return AlphaTable(self.edge_ids, self.alpha.detach().cpu().double().numpy())

    def mixture_weights(self):
        return F.softmax(self.alpha, dim=-1)


class ChildNet(_Network):
    """Discrete network built from a genotype: one operation per retained edge."""

    def __init__(self, genotype: Genotype, head_sizes=None):
        spec = genotype.spec

        def kinds(i):
            return {(e.src, e.dst): e.op for e in genotype.cell_edges(i)}

        sizes = genotype.head_sizes if head_sizes is None else head_sizes
        super().__init__(spec, sizes, kinds)
        self.genotype = genotype


def derive_child(net: SuperNet, genotype: Genotype, seed=0, inherit_weights=True):
    """Build the discrete child of ``net`` for ``genotype``.

    Parameters and buffers are copied from the supernet where the shapes
    match (stem, preprocessing, head and the selected op on every edge);
    anything else keeps its seeded fresh initialization.
    """
    if genotype.spec != net.spec:
        raise ConfigurationError("genotype cell spec does not match the supernet")
    if genotype.head_sizes and list(genotype.head_sizes) != list(net.head_sizes):
        raise ConfigurationError(
            f"genotype head sizes {list(genotype.head_sizes)} differ from supernet {net.head_sizes}")
    ref = net.alpha
    with seeded(seed):
        child = ChildNet(genotype, head_sizes=net.head_sizes).to(dtype=ref.dtype, device=ref.device)
    if not inherit_weights:
        return child

    src_state = net.state_dict()
    dst_state = child.state_dict()
    for key in dst_state:
        # cells.{c}.edges.{s_d}.op.* is sourced from cells.{c}.edges.{s_d}.ops.{index of op}.*
        src_key = key
        parts = key.split(".")
        if parts[0] == "cells" and parts[2] == "edges" and parts[4] == "op":
            c, edge = int(parts[1]), parts[3]
            kind = child.cells[c].edges[edge].kind
            src_key = ".".join(parts[:4] + ["ops", str(PRIMITIVES.index(kind))] + parts[5:])
        src = src_state.get(src_key)
        if src is not None and src.shape == dst_state[key].shape:
            dst_state[key] = src.clone()
    child.load_state_dict(dst_state)
    return child


def expand_head(model, n_new, seed=None):
    """Append a head block with ``n_new`` outputs; earlier blocks are untouched."""
    dtype = next(model.parameters()).dtype
    if seed is None:
        model.head.append(n_new, dtype)
    else:
        with seeded(seed):
            model.head.append(n_new, dtype)
    return model


def param_count(model, include_alpha=True):
    total = 0
    for name, p in model.named_parameters():
        if not include_alpha and name == "alpha":
            continue
        total += p.numel()
    return total


def param_breakdown(model):
    alpha = sum(p.numel() for n, p in model.named_parameters() if n == "alpha")
    total = param_count(model)
    return {"weights": total - alpha, "alpha": alpha, "total": total}
