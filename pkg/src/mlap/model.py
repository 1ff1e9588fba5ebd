"""Full model: encoder, GIN stack, readout and classification head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .config import ModelConfig
from .exceptions import ConfigError
from .graphs import GraphBatch, batch as make_batch
from .layers import forward_stack, init_params_stack, init_uniform
from .readout import Readout, init_readout, readout


def init_head(params, rng, kind, in_dim, num_classes=2, prefix="head"):
    bound = 1.0 / math.sqrt(in_dim)
    if kind == "multiclass":
        init_uniform(params, rng, f"{prefix}.E", (num_classes, in_dim), bound)
        init_uniform(params, rng, f"{prefix}.b", (num_classes,), bound)
    elif kind == "binary":
        init_uniform(params, rng, f"{prefix}.w", (in_dim,), bound)
        init_uniform(params, rng, f"{prefix}.b", (), bound)
    else:
        raise ConfigError(f"unknown head kind {kind!r}")


def multiclass_logits(h_graph, params, prefix="head"):
    return ad.add_row(ad.matmul(h_graph, ad.transpose(params[f"{prefix}.E"])), params[f"{prefix}.b"])


def multiclass_probs(h_graph, params, prefix="head"):
    """Class probabilities ``softmax(h E^T + b)``, one row per graph."""
    return ad.row_softmax(multiclass_logits(h_graph, params, prefix))


def binary_logits(h_graph, params, prefix="head"):
    return ad.add(ad.matmul(h_graph, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def binary_prob(h_graph, params, prefix="head"):
    """Positive-class probability ``sigmoid(h . w + b)`` per graph."""
    return ad.sigmoid(binary_logits(h_graph, params, prefix))


def head_logits(kind, h_graph, params, prefix="head"):
    if kind == "multiclass":
        return multiclass_logits(h_graph, params, prefix)
    return binary_logits(h_graph, params, prefix)


def head_loss(kind, logits, labels):
    """Mean cross-entropy for ``multiclass``, binary cross-entropy otherwise."""
    if kind == "multiclass":
        return ad.cross_entropy_logits(logits, labels)
    return ad.binary_cross_entropy_logits(logits, labels)


def init_params(config: ModelConfig, rng: RngStream | None = None) -> dict:
    """Freshly initialized parameters for ``config``."""
    rng = RngStream(config.seed).child("params") if rng is None else rng
    params: dict[str, Tensor] = {}
    init_params_stack(params, config, rng)
    init_readout(params, config, rng)
    init_head(params, rng, config.head, config.readout_dim, config.num_classes)
    return params


@dataclass
class ForwardOutput:
    node_reps: list
    readout: Readout
    logits: Tensor

    @property
    def graph_rep(self):
        return self.readout.graph_rep


def forward(params, config: ModelConfig, batch: GraphBatch, mode="eval", rng=None) -> ForwardOutput:
    node_reps = forward_stack(params, config, batch, mode, rng)
    ro = readout(params, config, node_reps[1:], batch.segments, batch.num_graphs)
    return ForwardOutput(node_reps, ro, head_logits(config.head, ro.graph_rep, params))


def iter_batches(graphs, batch_size):
    for start in range(0, len(graphs), batch_size):
        yield make_batch(graphs[start:start + batch_size])


def predict_scores(params, config: ModelConfig, graphs, batch_size=500):
    """Class probabilities ``[G, C]`` (multiclass) or positive scores ``[G]``."""
    out = []
    with ad.no_grad():
        for b in iter_batches(graphs, batch_size):
            logits = forward(params, config, b, "eval").logits
            probs = ad.row_softmax(logits) if config.head == "multiclass" else ad.sigmoid(logits)
            out.append(probs.values)
    if not out:
        return np.zeros((0, config.num_classes)) if config.head == "multiclass" else np.zeros(0)
    return np.concatenate(out)


def graph_representations(params, config: ModelConfig, graphs, batch_size=500):
    """Eval-mode ``(aggregated [G, D], layer-wise list or None)`` as arrays."""
    agg, layers = [], []
    with ad.no_grad():
        for b in iter_batches(graphs, batch_size):
            ro = forward(params, config, b, "eval").readout
            agg.append(ro.graph_rep.values)
            if ro.layer_reps is not None:
                layers.append([r.values for r in ro.layer_reps])
    agg_arr = np.concatenate(agg) if agg else np.zeros((0, config.readout_dim))
    if config.arch != "mlap":
        return agg_arr, None
    if not layers:
        return agg_arr, [np.zeros((0, config.dim)) for _ in range(config.layers)]
    return agg_arr, [np.concatenate([chunk[l] for chunk in layers]) for l in range(config.layers)]
