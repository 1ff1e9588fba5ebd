"""Model configuration shared by the layers, readouts and training loop."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .exceptions import ConfigError

ARCHS = ("naive", "jk", "mlap")
AGGREGATORS = {"naive": (None,), "jk": ("sum", "concat", "maxpool"), "mlap": ("sum", "weighted")}
HEADS = ("multiclass", "binary")
METRICS = ("error_rate", "accuracy", "roc_auc")

# learning-rate profiles: (lr_base, decay_factor, decay_every, epochs, batch_size)
PROFILES = {
    "synthetic": dict(lr_base=1e-3, lr_decay_factor=0.2, lr_decay_every=15, epochs=65, batch_size=50),
    "binary": dict(lr_base=1e-4, lr_decay_factor=0.5, lr_decay_every=15, epochs=50, batch_size=20),
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and optimization settings for one model.

    ``aggregator`` must be ``None`` for ``arch="naive"``, one of
    ``sum``/``concat``/``maxpool`` for ``jk`` and ``sum``/``weighted`` for
    ``mlap``.  ``node_vocab``/``edge_vocab`` list the vocabulary size of each
    categorical feature column; empty tuples mean featureless graphs.
    """

    arch: str = "mlap"
    aggregator: str | None = "sum"
    layers: int = 5
    dim: int = 200
    dropout: float = 0.5
    graphnorm: bool = False
    head: str = "multiclass"
    num_classes: int = 9
    lr_base: float = 1e-3
    lr_decay_factor: float = 0.2
    lr_decay_every: int = 15
    epochs: int = 65
    batch_size: int = 50
    seed: int = 0
    node_vocab: tuple = ()
    edge_vocab: tuple = ()

    def __post_init__(self):
        if self.aggregator in ("", "none"):
            object.__setattr__(self, "aggregator", None)
        object.__setattr__(self, "node_vocab", tuple(int(v) for v in self.node_vocab))
        object.__setattr__(self, "edge_vocab", tuple(int(v) for v in self.edge_vocab))
        self.validate()

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.aggregator not in AGGREGATORS[self.arch]:
            allowed = "absent" if self.arch == "naive" else f"one of {AGGREGATORS[self.arch]}"
            raise ConfigError(f"aggregator for arch={self.arch} must be {allowed}, got {self.aggregator!r}")
        if not 1 <= self.layers <= 10:
            raise ConfigError(f"layers must be in 1..10, got {self.layers}")
        if self.dim < 1:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.head == "multiclass" and self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.lr_base <= 0 or self.lr_decay_factor <= 0 or self.lr_decay_every < 1:
            raise ConfigError("learning-rate schedule values must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if any(v < 1 for v in self.node_vocab + self.edge_vocab):
            raise ConfigError("feature vocabulary sizes must be positive")

    @property
    def metric(self):
        return "roc_auc" if self.head == "binary" else "error_rate"

    @property
    def readout_dim(self):
        """Width of the graph representation fed to the head."""
        if self.arch == "jk" and self.aggregator == "concat":
            return self.layers * self.dim
        return self.dim

    @property
    def name(self):
        return self.arch if self.aggregator is None else f"{self.arch}-{self.aggregator}"

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["node_vocab"] = list(self.node_vocab)
        d["edge_vocab"] = list(self.edge_vocab)
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_profile(cls, profile, **overrides):
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        return cls(**{**PROFILES[profile], **overrides})


def lr_at(epoch, config: ModelConfig):
    """Step-decayed learning rate for a 0-indexed epoch."""
    return config.lr_base * config.lr_decay_factor ** (epoch // config.lr_decay_every)
