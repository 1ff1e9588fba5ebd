"""Graph containers, batching, splitting, JSON-lines I/O and the synthetic
center/peripheral dataset."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import RngStream
from .exceptions import DatasetError, GeneratorError, LoadError

GENERATOR_VERSION = "1"
COMPONENT_KINDS = ("A", "B", "C")
COMPONENT_SIZE = 5
NUM_PERIPHERALS = 5
NUM_RANDOM_EDGES = 5
_EXTRA_EDGE = {"A": (0, 2), "B": (0, 3), "C": (0, 4)}
_MAX_RETRIES = 10_000


@dataclass(frozen=True, eq=False)
class GraphInstance:
    """One graph with directed edges and categorical features.

    ``node_feats`` is ``[num_nodes, F_n]`` and ``edge_feats`` is
    ``[num_edges, F_e]``; either may have zero columns.  Undirected data is
    stored with both orientations of every edge.
    """

    num_nodes: int
    edges: np.ndarray
    node_feats: np.ndarray
    edge_feats: np.ndarray
    label: int

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        nf = np.asarray(self.node_feats, dtype=np.int64)
        ef = np.asarray(self.edge_feats, dtype=np.int64)
        if nf.ndim != 2:
            nf = nf.reshape(self.num_nodes, -1) if nf.size else np.zeros((self.num_nodes, 0), np.int64)
        if ef.ndim != 2:
            ef = ef.reshape(len(edges), -1) if ef.size else np.zeros((len(edges), 0), np.int64)
        for name, arr in (("edges", edges), ("node_feats", nf), ("edge_feats", ef)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "num_nodes", int(self.num_nodes))
        object.__setattr__(self, "label", int(self.label))
        validate_graph(self)

    @property
    def num_edges(self):
        return len(self.edges)

    def __eq__(self, other):
        if not isinstance(other, GraphInstance):
            return NotImplemented
        return (self.num_nodes == other.num_nodes and self.label == other.label
                and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.node_feats, other.node_feats)
                and np.array_equal(self.edge_feats, other.edge_feats))

    __hash__ = None

    def permuted(self, perm):
        """Relabel nodes so that old node ``i`` becomes ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.argsort(perm)
        return GraphInstance(self.num_nodes, perm[self.edges], self.node_feats[inv],
                             self.edge_feats, self.label)


def validate_graph(g: GraphInstance):
    if g.num_nodes < 1:
        raise DatasetError("graph must have at least one node")
    if g.label < 0:
        raise DatasetError(f"negative label {g.label}")
    if g.edges.size and (g.edges.min() < 0 or g.edges.max() >= g.num_nodes):
        bad = g.edges[(g.edges < 0).any(1) | (g.edges >= g.num_nodes).any(1)][0]
        raise DatasetError(f"edge {bad.tolist()} out of range for {g.num_nodes} nodes")
    if g.node_feats.shape[0] != g.num_nodes:
        raise DatasetError(f"{g.node_feats.shape[0]} node feature rows for {g.num_nodes} nodes")
    if g.edge_feats.shape[0] != len(g.edges):
        raise DatasetError(f"{g.edge_feats.shape[0]} edge feature rows for {len(g.edges)} edges")
    if (g.node_feats < 0).any() or (g.edge_feats < 0).any():
        raise DatasetError("categorical feature codes must be nonnegative")


@dataclass(frozen=True)
class GraphBatch:
    """Disjoint union of graphs over a flat node index."""

    num_graphs: int
    num_nodes: int
    node_offsets: np.ndarray
    edges: np.ndarray
    segments: np.ndarray
    node_feats: np.ndarray
    edge_feats: np.ndarray
    labels: np.ndarray

    @property
    def src(self):
        return self.edges[:, 0]

    @property
    def dst(self):
        return self.edges[:, 1]


def batch(graphs: Sequence[GraphInstance]) -> GraphBatch:
    """Concatenate graphs, shifting each graph's node indices by its offset."""
    if not graphs:
        raise DatasetError("cannot batch an empty sequence of graphs")
    fn = {g.node_feats.shape[1] for g in graphs}
    fe = {g.edge_feats.shape[1] for g in graphs if g.num_edges}
    if len(fn) > 1 or len(fe) > 1:
        raise DatasetError("graphs in one batch must share feature column counts")
    counts = np.array([g.num_nodes for g in graphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    edges = np.concatenate([g.edges + off for g, off in zip(graphs, offsets)]) \
        if any(g.num_edges for g in graphs) else np.zeros((0, 2), np.int64)
    return GraphBatch(
        num_graphs=len(graphs),
        num_nodes=int(counts.sum()),
        node_offsets=offsets,
        edges=edges.reshape(-1, 2),
        segments=np.repeat(np.arange(len(graphs)), counts),
        node_feats=np.concatenate([g.node_feats for g in graphs]),
        edge_feats=np.concatenate([g.edge_feats for g in graphs if g.num_edges])
        if fe else np.zeros((len(edges), 0), np.int64),
        labels=np.array([g.label for g in graphs], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# synthetic dataset

def gen_component(kind, base_index=0):
    """Undirected edges of a 5-node component starting at ``base_index``.

    A path 0-1-2-3-4 plus one extra edge from node 0: to node 2 for ``A``
    (triangle), node 3 for ``B`` (4-cycle), node 4 for ``C`` (5-cycle).
    """
    if kind not in _EXTRA_EDGE:
        raise GeneratorError(f"unknown component kind {kind!r}")
    local = [(i, i + 1) for i in range(COMPONENT_SIZE - 1)] + [_EXTRA_EDGE[kind]]
    return [(u + base_index, v + base_index) for u, v in local]


def _base_edges(center, peripheral):
    edges = gen_component(center, 0)
    for i in range(NUM_PERIPHERALS):
        nodes = [i] + [COMPONENT_SIZE + 4 * i + k for k in range(4)]
        edges += [(nodes[u], nodes[v]) for u, v in gen_component(peripheral, 0)]
    return edges


def _num_synthetic_nodes():
    return COMPONENT_SIZE + NUM_PERIPHERALS * (COMPONENT_SIZE - 1)


def class_label(center, peripheral):
    return 3 * COMPONENT_KINDS.index(center) + COMPONENT_KINDS.index(peripheral)


def _candidate_pairs(base):
    n = _num_synthetic_nodes()
    taken = {tuple(sorted(e)) for e in base}
    return [(u, v) for u in range(n) for v in range(u + 1, n) if (u, v) not in taken]


def _assemble(center, peripheral, base, extra):
    undirected = list(base) + [tuple(e) for e in extra]
    directed = []
    for u, v in undirected:
        directed.append((u, v))
        directed.append((v, u))
    n = _num_synthetic_nodes()
    return GraphInstance(n, np.array(directed, dtype=np.int64),
                         np.zeros((n, 0), np.int64), np.zeros((len(directed), 0), np.int64),
                         class_label(center, peripheral))


def _sample_extra(candidates, rng):
    picks = rng.choice(len(candidates), size=NUM_RANDOM_EDGES, replace=False)
    return sorted(candidates[i] for i in picks)


def gen_synthetic_graph(center, peripheral, rng: RngStream) -> GraphInstance:
    """One 25-node graph: center component, five peripherals, five random edges."""
    if center not in _EXTRA_EDGE or peripheral not in _EXTRA_EDGE:
        raise GeneratorError(f"unknown component kinds {center!r}/{peripheral!r}")
    base = _base_edges(center, peripheral)
    return _assemble(center, peripheral, base, _sample_extra(_candidate_pairs(base), rng))


@dataclass(frozen=True)
class SyntheticSpec:
    per_class_count: int = 1000
    seed: int = 0
    num_random_edges: int = NUM_RANDOM_EDGES
    component_size: int = COMPONENT_SIZE
    num_peripherals: int = NUM_PERIPHERALS

    def __post_init__(self):
        if self.per_class_count < 1:
            raise GeneratorError("per_class_count must be positive")
        if (self.num_random_edges, self.component_size, self.num_peripherals) != \
                (NUM_RANDOM_EDGES, COMPONENT_SIZE, NUM_PERIPHERALS):
            raise GeneratorError("only the 5/5/5 synthetic layout is supported")


def gen_synthetic_dataset(spec: SyntheticSpec) -> list[GraphInstance]:
    """``9 * per_class_count`` graphs ordered by label, unique within each class.

    Two graphs of one class count as duplicates when their random extra-edge
    sets coincide under the fixed node labeling.
    """
    root = RngStream(spec.seed, "synthetic")
    out = []
    for center in COMPONENT_KINDS:
        for peripheral in COMPONENT_KINDS:
            base = _base_edges(center, peripheral)
            candidates = _candidate_pairs(base)
            if spec.per_class_count > math.comb(len(candidates), NUM_RANDOM_EDGES):
                raise GeneratorError(
                    f"per_class_count {spec.per_class_count} exceeds the number of distinct "
                    f"{NUM_RANDOM_EDGES}-edge subsets")
            rng = root.child("class", class_label(center, peripheral))
            seen = set()
            retries = 0
            while len(seen) < spec.per_class_count:
                extra = tuple(_sample_extra(candidates, rng))
                if extra in seen:
                    retries += 1
                    if retries > _MAX_RETRIES:
                        raise GeneratorError("too many duplicate draws while enforcing uniqueness")
                    continue
                seen.add(extra)
                out.append(_assemble(center, peripheral, base, extra))
    return out


# ---------------------------------------------------------------------------
# splitting

@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (8, 1, 1)
    stratified: bool = True
    seed: int = 0

    def __post_init__(self):
        r = tuple(float(x) for x in self.ratios)
        if len(r) != 3 or min(r) < 0 or sum(r) <= 0:
            raise DatasetError(f"split ratios must be three nonnegative numbers, got {self.ratios}")
        object.__setattr__(self, "ratios", r)


def _allocate(n, ratios):
    # largest remainder, ties to the earlier part
    total = sum(ratios)
    exact = [n * r / total for r in ratios]
    sizes = [math.floor(x + 1e-9) for x in exact]
    order = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_indices(labels, spec: SplitSpec):
    """Sorted index arrays for train, validation and test."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = RngStream(spec.seed, "split")
    parts = ([], [], [])
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels)] if spec.stratified \
        else [np.arange(len(labels))]
    for idx in groups:
        perm = idx[rng.permutation(len(idx))]
        sizes = _allocate(len(idx), spec.ratios)
        start = 0
        for part, size in zip(parts, sizes):
            part.extend(perm[start:start + size].tolist())
            start += size
    return tuple(np.array(sorted(p), dtype=np.int64) for p in parts)


def split(dataset: Sequence[GraphInstance], spec: SplitSpec = SplitSpec()):
    idx = split_indices([g.label for g in dataset], spec)
    return tuple([dataset[i] for i in part] for part in idx)


# ---------------------------------------------------------------------------
# JSON-lines I/O

def graph_to_json(g: GraphInstance) -> str:
    record = {
        "n": g.num_nodes,
        "edges": g.edges.tolist(),
        "nf": g.node_feats.tolist() if g.node_feats.shape[1] else [],
        "ef": g.edge_feats.tolist() if g.edge_feats.shape[1] else [],
        "y": g.label,
    }
    return json.dumps(record, separators=(",", ":"))


def save_jsonl(dataset: Iterable[GraphInstance], path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for g in dataset:
            fh.write(graph_to_json(g))
            fh.write("\n")


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _int_rows(value, key, lineno):
    if not isinstance(value, list) or not all(
            isinstance(r, list) and all(_is_int(x) for x in r) for r in value):
        raise LoadError(f"field {key!r} must be a list of integer lists", lineno)
    widths = {len(r) for r in value}
    if len(widths) > 1:
        raise LoadError(f"field {key!r} has ragged rows", lineno)
    return value, (widths.pop() if widths else 0)


def parse_graph(line, lineno=None) -> GraphInstance:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise LoadError(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(rec, dict):
        raise LoadError("record is not a JSON object", lineno)
    missing = {"n", "edges", "nf", "ef", "y"} - rec.keys()
    if missing:
        raise LoadError(f"missing fields {sorted(missing)}", lineno)
    n, y = rec["n"], rec["y"]
    if not _is_int(n) or n < 1:
        raise LoadError(f"'n' must be a positive integer, got {n!r}", lineno)
    if not _is_int(y) or y < 0:
        raise LoadError(f"'y' must be a nonnegative integer, got {y!r}", lineno)
    edges, width = _int_rows(rec["edges"], "edges", lineno)
    if edges and width != 2:
        raise LoadError("edges must be [src, dst] pairs", lineno)
    for e in edges:
        if not (0 <= e[0] < n and 0 <= e[1] < n):
            raise LoadError(f"edge {e} out of range for {n} nodes", lineno)
    nf, fn = _int_rows(rec["nf"], "nf", lineno)
    ef, fe = _int_rows(rec["ef"], "ef", lineno)
    nf_arr = np.array(nf, dtype=np.int64).reshape(len(nf), fn) if nf else np.zeros((n, 0), np.int64)
    ef_arr = np.array(ef, dtype=np.int64).reshape(len(ef), fe) if ef else np.zeros((len(edges), 0), np.int64)
    try:
        return GraphInstance(n, np.array(edges, dtype=np.int64).reshape(-1, 2), nf_arr, ef_arr, y)
    except DatasetError as exc:
        raise LoadError(str(exc), lineno) from None


def load_jsonl(path) -> list[GraphInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            out.append(parse_graph(line, lineno))
    return out


def label_counts(dataset: Iterable[GraphInstance]):
    counts: dict[int, int] = {}
    for g in dataset:
        counts[g.label] = counts.get(g.label, 0) + 1
    return dict(sorted(counts.items()))


def feature_vocab(dataset: Iterable[GraphInstance]):
    """Per-column vocabulary sizes ``(node_vocab, edge_vocab)``."""
    node, edge = None, None
    for g in dataset:
        nmax = g.node_feats.max(axis=0) + 1 if g.num_nodes and g.node_feats.shape[1] else None
        emax = g.edge_feats.max(axis=0) + 1 if g.num_edges and g.edge_feats.shape[1] else None
        if nmax is not None:
            node = nmax if node is None else np.maximum(node, nmax)
        if emax is not None:
            edge = emax if edge is None else np.maximum(edge, emax)
    as_tuple = lambda a: tuple(int(x) for x in a) if a is not None else ()  # noqa: E731
    return as_tuple(node), as_tuple(edge)
