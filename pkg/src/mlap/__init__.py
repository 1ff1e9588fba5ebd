"""Multi-level attention pooling for graph classification on a small autodiff core."""

__version__ = "0.1.0"
