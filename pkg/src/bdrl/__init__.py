"""Boosted distributional reinforcement learning on categorical return grids."""

from .distributions import (
    CategoricalReturn,
    MixWeight,
    SupportGrid,
    SupportMismatchError,
    expectation,
    js_divergence,
    kl_divergence,
    mix,
    w2_distance,
)

__version__ = "0.1.0"
