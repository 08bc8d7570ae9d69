import time

import numpy as np
import pytest
import torch

from idarts.genotypes import CellSpec


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


@pytest.fixture
def tiny_spec():
    """Two cells of two nodes on 1D signals: small enough for exhaustive checks."""
    return CellSpec(n_nodes=2, n_cells=2, channels=4, dim=1, in_channels=2, stem_multiplier=1, stem_stride=2)


@pytest.fixture
def tiny_spec_2d():
    return CellSpec(n_nodes=2, n_cells=3, channels=4, dim=2, in_channels=3, stem_multiplier=1)


def toy_signals(n_classes=4, n_per_class=12, L=32, seed=0, dtype=np.float64):
    """Linearly separable-ish 2xL signals: class c carries a sinusoid of frequency c+1."""
    rng = np.random.default_rng(seed)
    t = np.arange(L) / L
    xs, ys = [], []
    for c in range(n_classes):
        base = np.stack([np.cos(2 * np.pi * (c + 1) * t), np.sin(2 * np.pi * (c + 1) * t)])
        xs.append(base[None] + 0.3 * rng.standard_normal((n_per_class, 2, L)))
        ys.append(np.full(n_per_class, c))
    return np.concatenate(xs).astype(dtype), np.concatenate(ys)


# -- acceptance report -------------------------------------------------------------

ACCEPTANCE_LINES = []


class _Criterion:
    def __init__(self, number, title):
        self.number, self.title, self.notes = number, title, []

    def note(self, text):
        self.notes.append(str(text))

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.notes)
        if exc_type is not None and str(exc):
            detail = f"{detail}; {str(exc).splitlines()[0]}" if detail else str(exc).splitlines()[0]
        line = f"criterion {self.number:2d} {status}  {self.title} ({elapsed:.1f}s)"
        ACCEPTANCE_LINES.append(line + (f"  [{detail}]" if detail else ""))
        print(ACCEPTANCE_LINES[-1])
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
