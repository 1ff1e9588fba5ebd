"""scikit-learn compatible wrapper around the training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .analysis import EmbeddingDump, extract_embeddings
from .autodiff import RngStream
from .config import ModelConfig
from .exceptions import ConfigError, DatasetError
from .graphs import GraphInstance, feature_vocab
from .metrics import compute_metric
from .model import graph_representations, predict_scores
from .training import train


def check_graphs(X, y=None):
    """Validate a sequence of graphs and optional labels.

    Returns the graphs as a list, relabelled with ``y`` when given.
    """
    if isinstance(X, GraphInstance):
        raise DatasetError("expected a sequence of GraphInstance, got a single graph")
    graphs = list(X)
    if not graphs:
        raise DatasetError("expected at least one graph")
    for i, g in enumerate(graphs):
        if not isinstance(g, GraphInstance):
            raise DatasetError(f"item {i} is {type(g).__name__}, not GraphInstance")
    if y is None:
        return graphs
    y = np.asarray(y)
    if y.shape != (len(graphs),):
        raise DatasetError(f"y has shape {y.shape}, expected ({len(graphs)},)")
    if not np.issubdtype(y.dtype, np.integer) or (y < 0).any():
        raise DatasetError("y must hold nonnegative integer class codes")
    return [g if g.label == int(t) else
            GraphInstance(g.num_nodes, g.edges, g.node_feats, g.edge_feats, int(t))
            for g, t in zip(graphs, y)]


class GraphClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Graph classifier with a GIN backbone and a configurable readout.

    Parameters
    ----------
    arch : {"mlap", "jk", "naive"}
        Readout family.
    aggregator : str or None
        ``sum``/``weighted`` for MLAP, ``sum``/``concat``/``maxpool`` for JK,
        ``None`` for naive.
    layers, dim, dropout, graphnorm
        Backbone depth, width, dropout probability and GraphNorm switch.
    head : {"multiclass", "binary"}
        Softmax head over ``num_classes`` or a single sigmoid output.
    lr_base, lr_decay_factor, lr_decay_every, epochs, batch_size
        Adam step-decay schedule and mini-batching.
    seed : int
        Seeds initialization, shuffling and dropout.

    Attributes
    ----------
    params_ : dict
        Trained tensors by name.
    config_ : ModelConfig
        Configuration used for fitting, including inferred feature vocabularies.
    record_ : RunRecord
        Per-epoch training log.
    classes_ : ndarray
        Class codes ``0..num_classes-1``.

    ``transform`` returns the aggregated graph representations.
    """

    def __init__(self, arch="mlap", aggregator="sum", layers=5, dim=200, dropout=0.5,
                 graphnorm=False, head="multiclass", num_classes=None, lr_base=1e-3,
                 lr_decay_factor=0.2, lr_decay_every=15, epochs=65, batch_size=50, seed=0):
        self.arch = arch
        self.aggregator = aggregator
        self.layers = layers
        self.dim = dim
        self.dropout = dropout
        self.graphnorm = graphnorm
        self.head = head
        self.num_classes = num_classes
        self.lr_base = lr_base
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_every = lr_decay_every
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    def _make_config(self, graphs):
        node_vocab, edge_vocab = feature_vocab(graphs)
        labels = [g.label for g in graphs]
        num_classes = self.num_classes
        if num_classes is None:
            num_classes = 2 if self.head == "binary" else max(max(labels) + 1, 2)
        params = {k: v for k, v in self.get_params().items() if k != "num_classes"}
        return ModelConfig(num_classes=num_classes, node_vocab=node_vocab,
                           edge_vocab=edge_vocab, **params)

    def fit(self, X, y=None, X_val=None, y_val=None):
        """Train on graphs ``X``; labels come from ``y`` or the graphs."""
        graphs = check_graphs(X, y)
        val = check_graphs(X_val, y_val) if X_val is not None else None
        config = self._make_config(graphs)
        if config.head == "binary" and max(g.label for g in graphs) > 1:
            raise ConfigError("binary head needs labels in {0, 1}")
        self.config_ = config
        self.params_, self.record_ = train(config, graphs, val, RngStream(config.seed))
        self.classes_ = np.arange(config.num_classes if config.head == "multiclass" else 2)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        scores = predict_scores(self.params_, self.config_, check_graphs(X))
        if self.config_.head == "binary":
            return np.column_stack([1.0 - scores, scores])
        return scores

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def transform(self, X):
        check_is_fitted(self, "params_")
        agg, _ = graph_representations(self.params_, self.config_, check_graphs(X))
        return agg

    def layer_representations(self, X, split="all") -> EmbeddingDump:
        """Layer-wise and aggregated graph representations (MLAP only)."""
        check_is_fitted(self, "params_")
        return extract_embeddings(self.params_, self.config_, check_graphs(X), split)

    def evaluate(self, X, metric=None):
        """``error_rate``/``accuracy``/``roc_auc`` on graphs ``X``."""
        graphs = check_graphs(X)
        metric = self.config_.metric if metric is None else metric
        labels = np.array([g.label for g in graphs])
        return compute_metric(metric, self.predict_proba(graphs), labels)
