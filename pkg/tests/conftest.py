import numpy as np
import pytest

from mlap.config import ModelConfig
from mlap.graphs import GraphInstance


def random_graph(rng, n_min=1, n_max=8, node_vocab=(), edge_vocab=(), label=0, p=0.4):
    """Random undirected graph stored bidirected, with optional categorical features."""
    n = int(rng.integers(n_min, n_max + 1))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]
    edges = [e for u, v in pairs for e in ((u, v), (v, u))]
    nf = np.column_stack([rng.integers(0, s, n) for s in node_vocab]) if node_vocab \
        else np.zeros((n, 0), np.int64)
    ef_und = [[int(rng.integers(0, s)) for s in edge_vocab] for _ in pairs]
    ef = np.array([r for r in ef_und for _ in (0, 1)], dtype=np.int64).reshape(len(edges), len(edge_vocab))
    return GraphInstance(n, np.array(edges, dtype=np.int64).reshape(-1, 2), nf, ef, label)


def random_graphs(rng, count, **kw):
    return [random_graph(rng, label=int(rng.integers(0, 3)), **kw) for _ in range(count)]


def small_config(**kw):
    base = dict(arch="mlap", aggregator="sum", layers=2, dim=6, dropout=0.0,
                num_classes=3, epochs=2, batch_size=4, seed=0)
    return ModelConfig(**{**base, **kw})


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def report(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
