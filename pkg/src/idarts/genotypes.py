"""Cell specifications, mixture-weight tables and discrete genotypes.

Node numbering inside a cell: 0 and 1 are the two cell inputs (outputs of the
two preceding cells), 2 .. n_nodes+1 are intermediate nodes. Every
intermediate node receives one edge from each lower-numbered node, so an edge
id is ``(cell, src, dst)`` with ``src < dst``.

Genotype file layout (JSON, UTF-8, two-space indent, trailing newline)::

    {
      "version": 1,
      "cell_spec": {"n_nodes": .., "n_cells": .., "channels": ..,
                    "reduction_positions": [..], "dim": .., "in_channels": ..,
                    "stem_multiplier": .., "stem_stride": ..},
      "edges": [{"cell": 0, "from": 0, "to": 2, "op": "sep_conv_3"}, ...],
      "head_sizes": [2, 2]
    }
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError
from .ops import PRIMITIVES, ZERO_INDEX

GENOTYPE_VERSION = 1


def default_reduction_positions(n_cells):
    return tuple(sorted({n_cells // 3, (2 * n_cells) // 3}))


@dataclass(frozen=True)
class CellSpec:
    n_nodes: int = 4
    n_cells: int = 8
    channels: int = 16
    reduction_positions: Optional[tuple] = None
    dim: int = 2
    in_channels: int = 3
    stem_multiplier: int = 3
    stem_stride: int = 1

    def __post_init__(self):
        for name in ("n_nodes", "n_cells", "channels", "in_channels", "stem_multiplier", "stem_stride"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"CellSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.dim not in (1, 2):
            raise ConfigurationError(f"CellSpec.dim must be 1 or 2, got {self.dim}")
        if self.reduction_positions is None:
            red = default_reduction_positions(self.n_cells)
        else:
            red = tuple(sorted({int(i) for i in self.reduction_positions}))
        if any(i < 0 or i >= self.n_cells for i in red):
            raise ConfigurationError(f"reduction positions {red} outside 0..{self.n_cells - 1}")
        object.__setattr__(self, "reduction_positions", red)

    def cell_edges(self, cell):
        return [(cell, src, dst) for dst in range(2, self.n_nodes + 2) for src in range(dst)]

    def edges(self):
        """All edge ids of all cells, in (cell, dst, src) order."""
        return [e for c in range(self.n_cells) for e in self.cell_edges(c)]

    @property
    def edges_per_cell(self):
        return sum(2 + j for j in range(self.n_nodes))

    def to_dict(self):
        d = asdict(self)
        d["reduction_positions"] = list(self.reduction_positions)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("reduction_positions") is not None:
            d["reduction_positions"] = tuple(d["reduction_positions"])
        return cls(**d)


class AlphaTable:
    """Raw (pre-softmax) mixture weights, one length-8 vector per edge."""

    def __init__(self, edges, values):
        values = np.asarray(values, dtype=np.float64)
        edges = [tuple(int(v) for v in e) for e in edges]
        if values.shape != (len(edges), len(PRIMITIVES)):
            raise ConfigurationError(
                f"alpha values have shape {values.shape}, expected {(len(edges), len(PRIMITIVES))}")
        if len(set(edges)) != len(edges):
            raise ConfigurationError("duplicate edge ids in alpha table")
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("alpha values must be finite")
        self.edges = edges
        self.values = values
        self._index = {e: i for i, e in enumerate(edges)}

    @classmethod
    def zeros(cls, spec):
        edges = spec.edges()
        return cls(edges, np.zeros((len(edges), len(PRIMITIVES))))

    @classmethod
    def random(cls, spec, rng, scale=1.0):
        edges = spec.edges()
        return cls(edges, scale * rng.standard_normal((len(edges), len(PRIMITIVES))))

    def __getitem__(self, edge):
        return self.values[self._index[tuple(edge)]]

    def __len__(self):
        return len(self.edges)

    def __iter__(self):
        return iter(self.edges)

    def flat(self):
        return self.values.ravel()

    def copy(self):
        return AlphaTable(list(self.edges), self.values.copy())

    def __repr__(self):
        return f"AlphaTable({len(self.edges)} edges)"


@dataclass(frozen=True)
class GenoEdge:
    cell: int
    src: int
    dst: int
    op: str

    def __post_init__(self):
        if self.op not in PRIMITIVES:
            raise ConfigurationError(f"unknown operation {self.op!r}")


@dataclass(frozen=True)
class Genotype:
    spec: CellSpec
    edges: tuple
    head_sizes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "head_sizes", tuple(int(h) for h in self.head_sizes))
        valid = set(self.spec.edges())
        seen = set()
        for e in self.edges:
            key = (e.cell, e.src, e.dst)
            if key not in valid:
                raise ConfigurationError(f"edge {key} does not exist in the cell spec")
            if key in seen:
                raise ConfigurationError(f"edge {key} appears twice")
            seen.add(key)
        for c in range(self.spec.n_cells):
            for dst in range(2, self.spec.n_nodes + 2):
                if not any(e.cell == c and e.dst == dst for e in self.edges):
                    raise ConfigurationError(f"node {dst} of cell {c} has no incoming edge")

    @classmethod
    def uniform(cls, spec, op="sep_conv_3", head_sizes=()):
        """Genotype with the same operation on every edge (fixed baseline architecture)."""
        return cls(spec, [GenoEdge(c, s, d, op) for c, s, d in spec.edges()], head_sizes)

    def op_at(self, cell, src, dst):
        for e in self.edges:
            if (e.cell, e.src, e.dst) == (cell, src, dst):
                return e.op
        return None

    def cell_edges(self, cell):
        return [e for e in self.edges if e.cell == cell]

    def to_dict(self):
        return {
            "version": GENOTYPE_VERSION,
            "cell_spec": self.spec.to_dict(),
            "edges": [{"cell": e.cell, "from": e.src, "to": e.dst, "op": e.op} for e in self.edges],
            "head_sizes": list(self.head_sizes),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != GENOTYPE_VERSION:
            raise ConfigurationError(f"unsupported genotype version {d.get('version')!r}")
        spec = CellSpec.from_dict(d["cell_spec"])
        edges = [GenoEdge(int(e["cell"]), int(e["from"]), int(e["to"]), e["op"]) for e in d["edges"]]
        return cls(spec, edges, d.get("head_sizes", ()))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def summary(self):
        return "; ".join(f"c{e.cell}:{e.src}->{e.dst}={e.op}" for e in self.edges)


def _softmax(v):
    z = np.exp(v - v.max())
    return z / z.sum()


def infer_genotype(alpha, spec, head_sizes=(), include_zero=False, top_k_edges=None):
    """Discretize mixture weights by per-edge argmax.

    ``zero`` is excluded from the argmax unless ``include_zero`` is set. Ties
    go to the lowest operation index. With ``top_k_edges`` only the k
    strongest incoming edges of each node are kept, strength being the
    largest non-zero softmax weight on the edge (ties to the lower source).
    """
    mask = np.zeros(len(PRIMITIVES), dtype=bool)
    if not include_zero:
        mask[ZERO_INDEX] = True
    chosen = {}
    for edge in spec.edges():
        v = np.asarray(alpha[edge], dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ConfigurationError(f"alpha for edge {edge} is not finite")
        masked = np.where(mask, -np.inf, v)
        chosen[edge] = int(np.argmax(masked))

    keep = set(chosen)
    if top_k_edges is not None:
        if top_k_edges < 1:
            raise ConfigurationError("top_k_edges must be >= 1")
        keep = set()
        for c in range(spec.n_cells):
            for dst in range(2, spec.n_nodes + 2):
                incoming = [(c, s, dst) for s in range(dst)]
                strength = {}
                for e in incoming:
                    w = _softmax(np.asarray(alpha[e], dtype=np.float64))
                    w[ZERO_INDEX] = -np.inf
                    strength[e] = w.max()
                ranked = sorted(incoming, key=lambda e: (-strength[e], e[1]))
                keep.update(ranked[:top_k_edges])

    edges = [GenoEdge(c, s, d, PRIMITIVES[chosen[(c, s, d)]]) for c, s, d in spec.edges() if (c, s, d) in keep]
    return Genotype(spec, edges, head_sizes)
