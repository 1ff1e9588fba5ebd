"""GIN message passing, feature encoders and GraphNorm.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names such
as ``gin.0.mlp.1.W``.  Each tensor is initialized from its own random stream
derived from the model seed and the parameter name, so two models that share
a parameter name start from identical values regardless of what else they
contain.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import RngStream, Tensor
from .config import ModelConfig
from .exceptions import ConfigError
from .graphs import GraphBatch

EMBED_INIT = 0.1
GRAPHNORM_EPS = 1e-5


def init_uniform(params, rng: RngStream, name, shape, bound):
    values = rng.child("init", name).uniform(-bound, bound, shape)
    params[name] = Tensor(values, requires_grad=True, name=name)
    return params[name]


def init_constant(params, name, shape, value):
    params[name] = Tensor(np.full(shape, float(value)), requires_grad=True, name=name)
    return params[name]


def init_linear(params, rng, name, fan_in, fan_out):
    bound = 1.0 / math.sqrt(fan_in)
    init_uniform(params, rng, f"{name}.W", (fan_in, fan_out), bound)
    init_uniform(params, rng, f"{name}.b", (fan_out,), bound)


def linear(params, name, x):
    return ad.add_row(ad.matmul(x, params[f"{name}.W"]), params[f"{name}.b"])


def _init_embedding(params, rng, prefix, d, vocab):
    if not vocab:
        init_uniform(params, rng, f"{prefix}.const", (1, d), EMBED_INIT)
    for j, size in enumerate(vocab):
        init_uniform(params, rng, f"{prefix}.{j}", (size, d), EMBED_INIT)


def _embed(params, prefix, codes, num_rows):
    """Sum of per-column lookups, or the shared constant row for no columns."""
    if codes.shape[1] == 0:
        return ad.gather_rows(params[f"{prefix}.const"], np.zeros(num_rows, dtype=np.int64))
    out = None
    for j in range(codes.shape[1]):
        table = params[f"{prefix}.{j}"]
        col = codes[:, j]
        if col.size and col.max() >= table.shape[0]:
            raise ConfigError(
                f"{prefix}.{j}: code {int(col.max())} outside vocabulary of {table.shape[0]}")
        looked_up = ad.gather_rows(table, col)
        out = looked_up if out is None else out + looked_up
    return out


def init_params_stack(params, config: ModelConfig, rng: RngStream):
    d = config.dim
    _init_embedding(params, rng, "encoder.node", d, config.node_vocab)
    for l in range(config.layers):
        init_constant(params, f"gin.{l}.eps", (), 0.0)
        _init_embedding(params, rng, f"gin.{l}.edge", d, config.edge_vocab)
        init_linear(params, rng, f"gin.{l}.mlp.0", d, 2 * d)
        init_linear(params, rng, f"gin.{l}.mlp.1", 2 * d, d)
        if config.graphnorm:
            init_constant(params, f"gn.{l}.alpha", (d,), 1.0)
            init_constant(params, f"gn.{l}.gamma", (d,), 1.0)
            init_constant(params, f"gn.{l}.beta", (d,), 0.0)


def encode_nodes(params, batch: GraphBatch):
    """Initial node representations ``[N, d]``."""
    return _embed(params, "encoder.node", batch.node_feats, batch.num_nodes)


def encode_edges(params, layer, batch: GraphBatch):
    """Per-edge encodings ``[E, d]``; a single broadcast row when featureless."""
    if len(batch.edges) == 0:
        # edgeless batches may not know their feature width; nothing is gathered anyway
        return Tensor(np.zeros((0, params[f"gin.{layer}.mlp.0.W"].shape[0])))
    if batch.edge_feats.shape[1] == 0:
        return params[f"gin.{layer}.edge.const"]
    return _embed(params, f"gin.{layer}.edge", batch.edge_feats, len(batch.edges))


def gin_message(h_prev, batch: GraphBatch, edge_enc):
    """Sum over inbound edges of ``relu(h[src] + edge_enc)``."""
    if h_prev.shape[0] != batch.num_nodes:
        raise ConfigError(
            f"gin_message: {h_prev.shape[0]} rows for a batch of {batch.num_nodes} nodes")
    if len(batch.edges) == 0:
        return Tensor(np.zeros(h_prev.shape))
    msg = ad.relu(ad.add(ad.gather_rows(h_prev, batch.src), edge_enc))
    return ad.segment_sum(msg, batch.dst, batch.num_nodes)


def mlp(params, prefix, x):
    hidden = ad.relu(linear(params, f"{prefix}.0", x))
    return linear(params, f"{prefix}.1", hidden)


def gin_update(h_prev, m, params, layer):
    """``mlp((1 + eps) * h_prev + m)``."""
    scale = ad.add(1.0, params[f"gin.{layer}.eps"])
    return mlp(params, f"gin.{layer}.mlp", ad.add(ad.mul(scale, h_prev), m))


def graphnorm(h, segments, num_graphs, alpha, gamma, beta, eps=GRAPHNORM_EPS):
    """Per-graph normalization with a learnable mean scale ``alpha``.

    For each graph and feature: subtract ``alpha * mean``, divide by the
    standard deviation of the shifted values, then apply ``gamma`` and
    ``beta``.
    """
    mu = ad.segment_mean(h, segments, num_graphs)
    centered = ad.sub(h, ad.gather_rows(ad.mul(mu, alpha), segments))
    var = ad.segment_mean(ad.mul(centered, centered), segments, num_graphs)
    std = ad.gather_rows(ad.sqrt(ad.add(var, eps)), segments)
    return ad.add(ad.mul(ad.div(centered, std), gamma), beta)


def forward_stack(params, config: ModelConfig, batch: GraphBatch, mode="eval", rng=None):
    """Node representations ``[h0, h1, ..., hL]``.

    Each layer runs message, update, optional GraphNorm and dropout in that
    order.  ``h0`` is not dropped out.
    """
    h = encode_nodes(params, batch)
    reps = [h]
    for l in range(config.layers):
        m = gin_message(h, batch, encode_edges(params, l, batch))
        h = gin_update(h, m, params, l)
        if config.graphnorm:
            h = graphnorm(h, batch.segments, batch.num_graphs,
                          params[f"gn.{l}.alpha"], params[f"gn.{l}.gamma"], params[f"gn.{l}.beta"])
        h = ad.dropout(h, config.dropout, mode, rng)
        reps.append(h)
    return reps
