"""Graph readouts: attention pooling and the naive, JK and MLAP families."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .config import ModelConfig
from .exceptions import ConfigError
from .layers import init_constant, init_linear, linear


def init_gate(params, rng: RngStream, name, in_dim, hidden=None):
    """Two-layer scoring network ``in_dim -> hidden -> 1``."""
    hidden = in_dim if hidden is None else hidden
    init_linear(params, rng, f"{name}.0", in_dim, hidden)
    init_linear(params, rng, f"{name}.1", hidden, 1)


def gate_scores(params, name, x):
    return linear(params, f"{name}.1", ad.relu(linear(params, f"{name}.0", x)))


def attention_pool(h, segments, num_graphs, params, gate):
    """Softmax-attention sum of node rows per graph, scored by ``gate``."""
    w = params[f"{gate}.0.W"]
    if w.shape[0] != h.shape[1]:
        raise ConfigError(f"attention_pool: gate {gate} expects width {w.shape[0]}, got {h.shape[1]}")
    return ad.segment_softmax_weighted_sum(h, gate_scores(params, gate, h), segments, num_graphs)


def attention_weights(h, segments, num_graphs, params, gate):
    """Per-node attention weights as a plain array (for inspection)."""
    with ad.no_grad():
        scores = gate_scores(params, gate, h)
    return ad.segment_softmax_weights(scores.values, segments, num_graphs)


def mlap_aggregate(layer_reps, mode="sum", weights=None):
    """Combine layer-wise graph representations by a plain or weighted sum."""
    if not layer_reps:
        raise ConfigError("mlap_aggregate: no layer representations")
    if mode == "sum":
        out = layer_reps[0]
        for rep in layer_reps[1:]:
            out = ad.add(out, rep)
        return out
    if mode == "weighted":
        if weights is None or weights.shape != (len(layer_reps),):
            shape = None if weights is None else weights.shape
            raise ConfigError(f"mlap_aggregate: weighted mode needs {len(layer_reps)} weights, got {shape}")
        out = None
        for l, rep in enumerate(layer_reps):
            term = ad.mul(ad.element(weights, l), rep)
            out = term if out is None else ad.add(out, term)
        return out
    raise ConfigError(f"mlap_aggregate: unknown mode {mode!r}")


def jk_aggregate(node_layer_reps, mode="sum"):
    """Combine per-layer node representations into one per node."""
    if not node_layer_reps:
        raise ConfigError("jk_aggregate: no layer representations")
    if mode == "sum":
        return mlap_aggregate(node_layer_reps, "sum")
    if mode == "concat":
        return node_layer_reps[0] if len(node_layer_reps) == 1 else ad.concat_cols(node_layer_reps)
    if mode == "maxpool":
        return node_layer_reps[0] if len(node_layer_reps) == 1 else ad.rowwise_max_over_set(node_layer_reps)
    raise ConfigError(f"jk_aggregate: unknown mode {mode!r}")


def jk_readout(h_jk, segments, num_graphs, params, gate="readout.gate.0"):
    return attention_pool(h_jk, segments, num_graphs, params, gate)


def naive_readout(h_last, segments, num_graphs, params, gate="readout.gate.0"):
    return attention_pool(h_last, segments, num_graphs, params, gate)


def init_readout(params, config: ModelConfig, rng: RngStream):
    d = config.dim
    if config.arch == "mlap":
        for l in range(config.layers):
            init_gate(params, rng, f"readout.gate.{l}", d)
        if config.aggregator == "weighted":
            init_constant(params, "readout.weights", (config.layers,), 1.0)
    else:
        init_gate(params, rng, "readout.gate.0", config.readout_dim)


@dataclass
class Readout:
    graph_rep: Tensor
    layer_reps: list | None = None


def readout(params, config: ModelConfig, node_reps, segments, num_graphs) -> Readout:
    """Graph representation from ``node_reps = [h1, ..., hL]``.

    MLAP also returns its layer-wise graph representations.
    """
    if len(node_reps) != config.layers:
        raise ConfigError(f"readout: {len(node_reps)} layers given, config has {config.layers}")
    if config.arch == "naive":
        return Readout(naive_readout(node_reps[-1], segments, num_graphs, params))
    if config.arch == "jk":
        h_jk = jk_aggregate(node_reps, config.aggregator)
        return Readout(jk_readout(h_jk, segments, num_graphs, params))
    layer_reps = [attention_pool(h, segments, num_graphs, params, f"readout.gate.{l}")
                  for l, h in enumerate(node_reps)]
    weights = params.get("readout.weights")
    return Readout(mlap_aggregate(layer_reps, config.aggregator, weights), layer_reps)


def mlap_jk_equivalence_check(node_layer_reps, segments, num_graphs, params, gate="readout.gate.0"):
    """Largest gap between JK-Sum and MLAP-Sum with attention pinned to JK's.

    The JK side pools the layer sum with ``gate``.  The MLAP side reuses the
    same per-node attention for every layer and sums the layer-wise pools.
    Both are computed separately; the result should be zero up to rounding.
    """
    reps = [r if isinstance(r, Tensor) else Tensor(r) for r in node_layer_reps]
    with ad.no_grad():
        h_sum = jk_aggregate(reps, "sum")
        jk = jk_readout(h_sum, segments, num_graphs, params, gate).values
        a = ad.segment_softmax_weights(gate_scores(params, gate, h_sum).values, segments, num_graphs)
    segments = np.asarray(segments, dtype=np.int64)
    mlap = np.zeros_like(jk)
    for r in reps:
        layer = np.zeros_like(jk)
        np.add.at(layer, segments, a[:, None] * r.values)
        mlap += layer
    return float(np.max(np.abs(mlap - jk))) if jk.size else 0.0
