"""Layer-wise representation analysis and nonparametric statistics."""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

from . import autodiff as ad
from .autodiff import AdamState, RngStream, Tensor
from .config import ModelConfig
from .exceptions import ConfigError, StatisticsError
from .metrics import compute_metric, lower_is_better
from .model import graph_representations, head_logits, head_loss, init_head

PROBE_EPOCHS = 30
PROBE_LR = 1e-3
PROBE_BATCH = 50

TASKS = {
    "full": lambda y: y,
    "center": lambda y: y // 3,
    "peripheral": lambda y: y % 3,
}


@dataclass
class EmbeddingDump:
    """Layer-wise graph representations of one dataset split."""

    layers: list
    aggregated: np.ndarray
    labels: np.ndarray
    split: str = "all"

    def __post_init__(self):
        g = len(self.labels)
        if self.aggregated.shape[0] != g or any(x.shape[0] != g for x in self.layers):
            raise ConfigError("embedding dump has inconsistent row counts")

    @property
    def num_layers(self):
        return len(self.layers)


def extract_embeddings(params, config: ModelConfig, dataset, split="all") -> EmbeddingDump:
    if config.arch != "mlap":
        raise ConfigError(f"layer-wise graph representations need an MLAP model, got {config.name}")
    aggregated, layers = graph_representations(params, config, dataset)
    labels = np.array([g.label for g in dataset], dtype=np.int64)
    return EmbeddingDump(layers, aggregated, labels, split)


# ---------------------------------------------------------------------------
# probes

def _canonical_order(x, y):
    # row-order independent starting point for the seeded shuffles
    keys = [y] + [x[:, j] for j in range(x.shape[1] - 1, -1, -1)]
    return np.lexsort(keys[::-1])


def probe_train(train_x, train_y, test_x, test_y, head_kind="multiclass", seed=0,
                num_classes=None, epochs=PROBE_EPOCHS, lr=PROBE_LR, batch_size=PROBE_BATCH):
    """Fit a fresh head on frozen embeddings and score it on both splits.

    Returns ``(train_metric, test_metric)``: error rate for a multiclass head,
    ROC-AUC for a binary one.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if len(train_x) == 0:
        raise ConfigError("probe_train needs training rows")
    if num_classes is None:
        num_classes = int(max(train_y.max(), test_y.max() if len(test_y) else 0)) + 1
    rng = RngStream(seed, "probe")
    params = {}
    init_head(params, rng, head_kind, train_x.shape[1], max(num_classes, 2), prefix="probe")
    state = AdamState()
    order0 = _canonical_order(train_x, train_y)
    train_x, train_y = train_x[order0], train_y[order0]
    for epoch in range(epochs):
        order = rng.child("shuffle", epoch).permutation(len(train_x))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            logits = head_logits(head_kind, Tensor(train_x[idx]), params, prefix="probe")
            ad.backward(head_loss(head_kind, logits, train_y[idx]))
            ad.adam_step(params, state, lr)
    metric = "error_rate" if head_kind == "multiclass" else "roc_auc"
    return (_probe_metric(params, head_kind, metric, train_x, train_y),
            _probe_metric(params, head_kind, metric, test_x, test_y))


def _probe_metric(params, head_kind, metric, x, y):
    with ad.no_grad():
        logits = head_logits(head_kind, Tensor(x), params, prefix="probe")
        scores = ad.row_softmax(logits) if head_kind == "multiclass" else ad.sigmoid(logits)
    return compute_metric(metric, scores.values, y)


def probe_suite(train_dump: EmbeddingDump, test_dump: EmbeddingDump, task="full",
                head_kind="multiclass", seed=0):
    """Probe every layer and the aggregated representation.

    Returns ``{1: (train, test), ..., L: (...), "agg": (...)}``.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown probe task {task!r}")
    if train_dump.num_layers != test_dump.num_layers:
        raise ConfigError("train and test dumps have different depths")
    ytr, yte = TASKS[task](train_dump.labels), TASKS[task](test_dump.labels)
    num_classes = int(max(ytr.max(), yte.max())) + 1
    results = {}
    columns = [(l + 1, train_dump.layers[l], test_dump.layers[l]) for l in range(train_dump.num_layers)]
    columns.append(("agg", train_dump.aggregated, test_dump.aggregated))
    for tag, xtr, xte in columns:
        results[tag] = probe_train(xtr, ytr, xte, yte, head_kind, seed=_probe_seed(seed, tag),
                                   num_classes=num_classes)
    return results


def _probe_seed(seed, tag):
    return RngStream(seed, "probe-seed", str(tag)).integers(0, 2 ** 63)


# ---------------------------------------------------------------------------
# statistics

@dataclass(frozen=True)
class StatResult:
    U: float
    z: float
    p: float
    r: float
    n1: int
    n2: int
    degenerate: bool = False


@functools.lru_cache(maxsize=None)
def _u_counts(n1, n2):
    """Counts of each U = 0..n1*n2 over all tie-free rank arrangements."""
    if n1 == 0 or n2 == 0:
        return (1,)
    out = [0] * (n1 * n2 + 1)
    # the largest pooled value is from sample 1 (beats all n2) or from sample 2
    for u, c in enumerate(_u_counts(n1 - 1, n2)):
        out[u + n2] += c
    for u, c in enumerate(_u_counts(n1, n2 - 1)):
        out[u] += c
    return tuple(out)


def exact_p_value(u, n1, n2):
    """Two-sided exact p-value for a tie-free U statistic."""
    counts = _u_counts(n1, n2)
    total = math.comb(n1 + n2, n1)
    k = int(round(u))
    lo = sum(counts[:k + 1]) / total
    hi = sum(counts[k:]) / total
    return float(min(1.0, 2.0 * min(lo, hi)))


def mann_whitney_u(a, b, method="asymptotic"):
    """Mann-Whitney U test of sample ``a`` against ``b``.

    ``U`` counts the pairs in which ``a`` beats ``b`` (ties count one half).
    The asymptotic p-value is two-sided from the tie-corrected normal
    approximation without continuity correction; ``method="exact"``
    enumerates the null distribution instead and requires tie-free data.
    The effect size is ``z / sqrt(n1 + n2)``.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    n1, n2 = len(a), len(b)
    if n1 < 1 or n2 < 1:
        raise StatisticsError("mann_whitney_u needs at least one value per sample")
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    n = n1 + n2
    _, ties = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(ties.astype(np.float64) ** 3 - ties)) / (n * (n - 1)) if n > 1 else 0.0
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return StatResult(u, 0.0, 1.0, 0.0, n1, n2, degenerate=True)
    z = (u - n1 * n2 / 2.0) / math.sqrt(var)
    if method == "asymptotic":
        p = float(min(1.0, 2.0 * norm.sf(abs(z))))
    elif method == "exact":
        if np.any(ties > 1):
            raise StatisticsError("exact p-values need tie-free samples")
        p = exact_p_value(u, n1, n2)
    else:
        raise ConfigError(f"unknown method {method!r}")
    return StatResult(u, z, p, z / math.sqrt(n), n1, n2)


def bonferroni(p_values):
    m = len(p_values)
    return [min(1.0, m * p) for p in p_values]


# ---------------------------------------------------------------------------
# model selection across runs

GROUP_KEYS = ("arch", "aggregator", "layers", "graphnorm")


def select_best(rows, metric, keys=GROUP_KEYS):
    """Best configuration per architecture family by mean validation metric.

    ``rows`` are dicts holding the ``keys``, ``val_metric`` and
    ``test_metric``.  Returns ``{arch: (group_key, [test metrics])}``.
    """
    groups: dict = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    best: dict = {}
    sign = 1.0 if lower_is_better(metric) else -1.0
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        members = groups[key]
        if len(members) < 2:
            raise StatisticsError(f"group {key} has {len(members)} run(s); at least 2 are needed")
        score = sign * float(np.mean([m["val_metric"] for m in members]))
        arch = members[0]["arch"]
        if arch not in best or score < best[arch][0]:
            tests = [m["test_metric"] for m in sorted(members, key=lambda m: m.get("seed", 0))]
            best[arch] = (score, key, tests)
    return {arch: (key, tests) for arch, (_, key, tests) in best.items()}


def compare_families(rows, metric, keys=GROUP_KEYS):
    """MLAP against naive and JK on test metrics, Bonferroni corrected.

    Returns a list of ``(name, StatResult, p_bonferroni)``.
    """
    best = select_best(rows, metric, keys)
    if "mlap" not in best:
        raise StatisticsError("no MLAP runs to compare")
    pairs = [(f"mlap vs {other}", best["mlap"][1], best[other][1])
             for other in ("naive", "jk") if other in best]
    if not pairs:
        raise StatisticsError("no baseline runs to compare against")
    results = [(name, mann_whitney_u(a, b)) for name, a, b in pairs]
    adjusted = bonferroni([r.p for _, r in results])
    return [(name, r, p) for (name, r), p in zip(results, adjusted)]


# ---------------------------------------------------------------------------
# exports

def fmt(x):
    """Shortest text that parses back to the same float."""
    return repr(float(x))


def export_embeddings(dump: EmbeddingDump, path):
    d = dump.aggregated.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "label"] + [f"f{j}" for j in range(d)])
        blocks = [(str(l + 1), x) for l, x in enumerate(dump.layers)] + [("agg", dump.aggregated)]
        for tag, x in blocks:
            for label, row in zip(dump.labels, x):
                w.writerow([tag, int(label)] + [fmt(v) for v in row])


def read_embeddings_csv(path):
    """Parse an embedding CSV into ``{layer_tag: (labels, matrix)}``."""
    out: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            labels, rows = out.setdefault(row[0], ([], []))
            labels.append(int(row[1]))
            rows.append([float(v) for v in row[2:]])
    return {k: (np.array(lab), np.array(rows)) for k, (lab, rows) in out.items()}


def export_mlap_weights(params, config: ModelConfig):
    """Per-layer aggregation weights and whether they are trainable.

    MLAP-Sum has no weights; it reports ones with ``applicable=False``.
    """
    if config.arch != "mlap":
        raise ConfigError(f"aggregation weights only exist for MLAP models, got {config.name}")
    if config.aggregator == "weighted":
        return params["readout.weights"].values.copy(), True
    return np.ones(config.layers), False


def write_weights_csv(weights, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "weight"])
        for l, v in enumerate(weights, start=1):
            w.writerow([l, fmt(v)])


STATS_HEADER = ["comparison", "U", "z", "p", "p_bonferroni", "r", "n1", "n2"]


def write_stats_csv(results, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATS_HEADER)
        for name, r, p_adj in results:
            w.writerow([name, fmt(r.U), fmt(r.z), fmt(r.p), fmt(p_adj), fmt(r.r), r.n1, r.n2])
