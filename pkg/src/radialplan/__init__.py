"""Radial-prior block-sparse attention masks for video token grids.

Candidate pairs come from a logarithmically shrinking window between frames;
a static (uniform sampling) or dynamic (standardized score threshold) mode
selects among them, and selections are pooled into a block mask. An offline
Parzen-estimator search on a drifting-feature proxy task fills a per-regime
lookup table that a motion-score router reads at inference time.
"""

__version__ = "0.1.0"

from .grid import GridSpec, block_of, make_grid
from .radial import CandidateSet, RadialParams, candidate_set, receptive_field, window_width
from .selection import Mode, SparsityConfig, dynamic_select, proxy_scores, static_select
from .mask import BlockMask, TokenMask, aggregate_block, build_mask, expand_mask, sparsity
from .maskio import MaskFormat, MaskFormatError, read_mask, write_mask
from .attention import FeatureBatch, attention_matrix, logits, masked_attention, normalized_mse
from .proxy import DriftRegime, ProxyBatch, fit_decay, lag_correlation, simulate
from .profiler import (
    LUTError,
    MissingRegimeError,
    RegimeLUT,
    SearchSpace,
    TrialRecord,
    build_lut,
    objective,
    profile_regime,
    random_suggest,
    tpe_suggest,
)
from .router import (
    FallbackUnavailableError,
    MotionScore,
    RegimeBins,
    RoutingError,
    discretize,
    heuristic_score,
    route,
)

__all__ = [
    "BlockMask",
    "CandidateSet",
    "DriftRegime",
    "FallbackUnavailableError",
    "FeatureBatch",
    "GridSpec",
    "LUTError",
    "MaskFormat",
    "MaskFormatError",
    "MissingRegimeError",
    "Mode",
    "MotionScore",
    "ProxyBatch",
    "RadialParams",
    "RegimeBins",
    "RegimeLUT",
    "RoutingError",
    "SearchSpace",
    "SparsityConfig",
    "TokenMask",
    "TrialRecord",
    "aggregate_block",
    "attention_matrix",
    "block_of",
    "build_lut",
    "build_mask",
    "candidate_set",
    "discretize",
    "dynamic_select",
    "expand_mask",
    "fit_decay",
    "heuristic_score",
    "lag_correlation",
    "logits",
    "make_grid",
    "masked_attention",
    "normalized_mse",
    "objective",
    "profile_regime",
    "proxy_scores",
    "random_suggest",
    "read_mask",
    "receptive_field",
    "route",
    "simulate",
    "sparsity",
    "static_select",
    "tpe_suggest",
    "window_width",
    "write_mask",
]
