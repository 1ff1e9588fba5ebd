"""Training loop, evaluation and checkpoint I/O."""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, RngStream, Tensor
from .config import ModelConfig, lr_at
from .exceptions import ConfigError, EvaluationError, LoadError, NumericError
from .graphs import batch as make_batch
from .metrics import compute_metric
from .model import forward, head_loss, init_params, predict_scores

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MLAPCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_metric: float | None


@dataclass
class RunRecord:
    """Outcome of one training run."""

    config: ModelConfig
    seed: int
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_time: float = 0.0
    checkpoint: str | None = None


def minibatch_order(n, epoch, rng: RngStream):
    return rng.child("shuffle", epoch).permutation(n)


def train_step(params, config, graphs, state, lr, rng):
    b = make_batch(graphs)
    out = forward(params, config, b, "train", rng)
    loss = head_loss(config.head, out.logits, b.labels)
    ad.backward(loss)
    ad.adam_step(params, state, lr)
    return loss.item()


def train(config: ModelConfig, train_set, val_set=None, rng: RngStream | None = None,
          params=None):
    """Train a model from scratch (or from ``params``) and log every epoch.

    Each epoch draws one seeded permutation of the training set, walks it in
    mini-batches of ``config.batch_size`` with Adam at ``lr_at(epoch)``, and
    evaluates the validation set in eval mode.  The returned parameters are
    those after the last epoch.

    Raises
    ------
    NumericError
        If a mini-batch loss is not finite.
    """
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    rng = RngStream(config.seed) if rng is None else rng
    params = init_params(config, rng.child("params")) if params is None else params
    state = AdamState()
    record = RunRecord(config=config, seed=rng.seed)
    started = time.perf_counter()
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        order = minibatch_order(len(train_set), epoch, rng)
        drop_rng = rng.child("dropout", epoch)
        total, count = 0.0, 0
        for bi, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = [train_set[i] for i in order[start:start + config.batch_size]]
            loss = train_step(params, config, chunk, state, lr, drop_rng)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch}, batch {bi}")
            total += loss * len(chunk)
            count += len(chunk)
        val = evaluate(params, config, val_set) if val_set else None
        record.epochs.append(EpochLog(epoch, total / count, val))
        logger.debug("epoch %d lr %.2e loss %.5f val %s", epoch, lr, total / count, val)
    record.wall_time = time.perf_counter() - started
    return params, record


def evaluate(params, config: ModelConfig, dataset, metric=None):
    """``error_rate``, ``accuracy`` or ``roc_auc`` on ``dataset`` in eval mode."""
    metric = config.metric if metric is None else metric
    if metric == "roc_auc" and config.head != "binary":
        raise EvaluationError("roc_auc needs a binary head")
    if len(dataset) == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    scores = predict_scores(params, config, dataset)
    labels = np.array([g.label for g in dataset])
    return compute_metric(metric, scores, labels)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic "MLAPCKPT"
#   u32       format version
#   u64       length of the metadata JSON, then the UTF-8 JSON itself
#             ({"config": {...}, "extra": {...}}, keys sorted)
#   u32       number of tensors, then per tensor:
#             u16 name length, UTF-8 name, u8 rank, rank x u64 dims,
#             prod(dims) x float64 values in row-major order

def checkpoint_save(params, config: ModelConfig, path, extra=None):
    meta = json.dumps({"config": config.to_dict(), "extra": extra or {}},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(meta)), meta,
             struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(np.ascontiguousarray(t.values, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise LoadError(f"checkpoint truncated while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def checkpoint_load(path):
    """Return ``(params, config, extra)``; shapes are checked against ``config``."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise LoadError("not a checkpoint file (bad magic)")
    version, meta_len = r.unpack("<IQ", "header")
    if version != CHECKPOINT_VERSION:
        raise LoadError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
        config = ModelConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise LoadError(f"bad checkpoint metadata: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    params = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "tensor name")
        name = r.take(name_len, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{ndim}Q", f"shape of {name}")
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(r.take(8 * size, f"values of {name}"), dtype="<f8").reshape(shape)
        params[name] = Tensor(values.astype(np.float64), requires_grad=True, name=name)
    if r.pos != len(r.data):
        raise LoadError("trailing bytes after the last tensor")
    _check_against_config(params, config)
    return params, config, meta.get("extra", {})


def _check_against_config(params, config):
    with ad.no_grad():
        expected = init_params(config, RngStream(0))
    for name, t in expected.items():
        if name not in params:
            raise LoadError(f"checkpoint is missing tensor {name}")
        if params[name].shape != t.shape:
            raise LoadError(f"tensor {name} has shape {params[name].shape}, config expects {t.shape}")
    extra = set(params) - set(expected)
    if extra:
        raise LoadError(f"checkpoint has unexpected tensors {sorted(extra)}")
