"""Latency-aware differentiable architecture search (plaintext domain)."""

from .autodiff import Tensor, conv2d, cross_entropy, param, softmax
from .search import SearchConfig, SearchResult, darts_step, run_search
from .supernet import Supernet, derive_arch, make_backbone, straight_through_init

__all__ = [
    "Tensor", "conv2d", "cross_entropy", "param", "softmax",
    "SearchConfig", "SearchResult", "darts_step", "run_search",
    "Supernet", "derive_arch", "make_backbone", "straight_through_init",
]
