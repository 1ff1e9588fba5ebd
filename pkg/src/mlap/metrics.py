"""Classification metrics."""

import numpy as np
from scipy.stats import rankdata

from .exceptions import EvaluationError


def predict_labels(probs):
    """Row argmax; ``numpy.argmax`` already breaks ties toward the lowest index."""
    return np.argmax(np.asarray(probs), axis=1)


def accuracy(probs, labels):
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EvaluationError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict_labels(probs) == labels))


def error_rate(probs, labels):
    return 1.0 - accuracy(probs, labels)


def rank_sum_u(x, y):
    """Mann-Whitney ``U`` for sample ``x`` against ``y`` using midranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ranks = rankdata(np.concatenate([x, y]))
    n1 = len(x)
    return float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)


def roc_auc(scores, labels):
    """Area under the ROC curve as a normalized rank-sum statistic.

    Ties between a positive and a negative score count one half.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pos = scores[labels == 1]
    neg = scores[labels != 1]
    if len(pos) == 0 or len(neg) == 0:
        raise EvaluationError("ROC-AUC is undefined when only one class is present")
    return rank_sum_u(pos, neg) / (len(pos) * len(neg))


def compute_metric(metric, scores, labels):
    if metric == "error_rate":
        return error_rate(scores, labels)
    if metric == "accuracy":
        return accuracy(scores, labels)
    if metric == "roc_auc":
        if np.ndim(scores) == 2:
            if np.shape(scores)[1] != 2:
                raise EvaluationError("roc_auc needs binary scores")
            scores = np.asarray(scores)[:, 1]
        return roc_auc(scores, labels)
    raise EvaluationError(f"unknown metric {metric!r}")


def lower_is_better(metric):
    return metric == "error_rate"
