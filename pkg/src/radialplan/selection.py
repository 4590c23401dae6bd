"""Selection of retained token pairs inside a candidate set.

Two mutually exclusive modes share the candidate construction of
:mod:`radialplan.radial`:

* static ratio: a seeded uniform sample of a fixed fraction of the pairs;
* dynamic threshold: pairs whose standardized proxy logit clears a
  decay-state dependent threshold, with a top-k fallback.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import GridSpec
from .radial import CandidateSet, RadialParams, is_near

NORM_EPSILON = 1e-8
DEFAULT_FUSED_HEADS = 2
_SEED_MASK = (1 << 64) - 1


class Mode(str, enum.Enum):
    STATIC_RATIO = "static_ratio"
    DYNAMIC_THRESHOLD = "dynamic_threshold"

    @classmethod
    def parse(cls, value: "str | Mode") -> "Mode":
        if isinstance(value, Mode):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"static": cls.STATIC_RATIO, "dynamic": cls.DYNAMIC_THRESHOLD}
        if key in aliases:
            return aliases[key]
        return cls(key)

    @property
    def short(self) -> str:
        return "static" if self is Mode.STATIC_RATIO else "dynamic"


@dataclass(frozen=True)
class SparsityConfig:
    """Full knob set for one mode.

    ``near_param``/``far_param`` are retention ratios (rho1, rho2) in static
    mode and standardized-score thresholds (tau1, tau2) in dynamic mode.
    """

    mode: Mode
    radial: RadialParams
    mask_threshold: float
    col_threshold: float
    near_param: float
    far_param: float
    block_size: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        for name in ("mask_threshold", "col_threshold"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {value}")
        if self.mode is Mode.STATIC_RATIO:
            for name in ("near_param", "far_param"):
                value = getattr(self, name)
                if not 0.0 < value <= 1.0:
                    raise ValueError(f"static ratio {name} must lie in (0, 1], got {value}")
        else:
            for name in ("near_param", "far_param"):
                if math.isnan(getattr(self, name)):
                    raise ValueError(f"{name} is NaN")

    @property
    def gamma(self) -> float:
        return self.radial.decay_factor

    @property
    def lam(self) -> float:
        return self.radial.long_range_factor

    def with_block_size(self, block_size: int) -> "SparsityConfig":
        return replace(self, block_size=block_size)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "gamma": self.radial.decay_factor,
            "lambda": self.radial.long_range_factor,
            "theta_m": self.mask_threshold,
            "theta_c": self.col_threshold,
            "near_param": self.near_param,
            "far_param": self.far_param,
        }

    @classmethod
    def from_dict(cls, data: dict, block_size: int) -> "SparsityConfig":
        return cls(
            mode=Mode.parse(data["mode"]),
            radial=RadialParams(float(data["gamma"]), float(data["lambda"])),
            mask_threshold=float(data["theta_m"]),
            col_threshold=float(data["theta_c"]),
            near_param=float(data["near_param"]),
            far_param=float(data["far_param"]),
            block_size=int(block_size),
        )


def _check_mode(config: SparsityConfig, expected: Mode) -> None:
    if config.mode is not expected:
        raise ValueError(f"expected a {expected.value} config, got {config.mode.value}")


def retention_ratio(frame_i: int, frame_j: int, config: SparsityConfig, grid: GridSpec) -> float:
    _check_mode(config, Mode.STATIC_RATIO)
    t = abs(frame_i - frame_j)
    if t <= 1:
        return 1.0
    return config.near_param if is_near(t, config.radial, grid) else config.far_param


def threshold_for(frame_i: int, frame_j: int, config: SparsityConfig, grid: GridSpec) -> float:
    _check_mode(config, Mode.DYNAMIC_THRESHOLD)
    t = abs(frame_i - frame_j)
    if t <= 1:
        return -math.inf
    return config.near_param if is_near(t, config.radial, grid) else config.far_param


# --- static ratio ---------------------------------------------------------------


def sample_count(n_candidates: int, ratio: float) -> int:
    return max(1, math.floor(n_candidates * ratio))


def pair_seed_sequence(seed: int, frame_i: int, frame_j: int) -> np.random.SeedSequence:
    """Entropy for one frame pair; independent of the order pairs are visited."""
    return np.random.SeedSequence([int(seed) & _SEED_MASK, int(frame_i), int(frame_j)])


def sample_positions(n_candidates: int, ratio: float, seed: int, frame_i: int, frame_j: int) -> np.ndarray:
    """Positions (into the row-major candidate enumeration) kept by static sampling, ascending."""
    if n_candidates < 1:
        raise ValueError("cannot sample from an empty candidate set")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    k = sample_count(n_candidates, ratio)
    if k >= n_candidates:
        return np.arange(n_candidates)
    rng = np.random.default_rng(pair_seed_sequence(seed, frame_i, frame_j))
    return np.sort(rng.choice(n_candidates, size=k, replace=False, shuffle=False))


def static_select(candidates: CandidateSet, ratio: float, seed: int) -> set[tuple[int, int]]:
    flat = candidates.flat_indices()
    chosen = flat[sample_positions(len(flat), ratio, seed, candidates.frame_i, candidates.frame_j)]
    n = candidates.tokens_per_frame
    return {(int(p // n), int(p % n)) for p in chosen}


# --- dynamic threshold ----------------------------------------------------------


@dataclass
class ScoredCandidates:
    """Proxy logits over a candidate set, listed in row-major pair order."""

    base: CandidateSet
    flat_indices: np.ndarray
    raw_scores: np.ndarray
    normalized_scores: np.ndarray | None = None
    mean: float = field(default=math.nan)
    std: float = field(default=math.nan)

    def pair_list(self) -> list[tuple[int, int]]:
        n = self.base.tokens_per_frame
        return [(int(p // n), int(p % n)) for p in self.flat_indices]


def fuse_heads(features: np.ndarray, fused_heads: int = DEFAULT_FUSED_HEADS) -> np.ndarray:
    """Flatten the first ``fused_heads`` heads of ``[tokens, H, d_k]`` features.

    Rows are pre-scaled so that a plain dot product of a fused query row and a
    fused key row equals the head-averaged scaled logit.
    """
    if features.ndim == 2:
        features = features[:, None, :]
    if features.ndim != 3:
        raise ValueError(f"features must be [tokens, heads, head_dim], got shape {features.shape}")
    if fused_heads < 1:
        raise ValueError("fused_heads must be >= 1")
    h = min(fused_heads, features.shape[1])
    d_k = features.shape[2]
    fused = np.asarray(features[:, :h, :], dtype=np.float64).reshape(features.shape[0], h * d_k)
    return fused / math.sqrt(h * math.sqrt(d_k))


def score_matrix(queries: np.ndarray, keys: np.ndarray, fused_heads: int = DEFAULT_FUSED_HEADS) -> np.ndarray:
    """All-pairs head-averaged logits ``(1/H_f) sum_h Q_u^h . K_v^h / sqrt(d_k)``."""
    if queries.ndim == 2:
        queries = queries[:, None, :]
    if keys.ndim == 2:
        keys = keys[:, None, :]
    if queries.shape[1:] != keys.shape[1:]:
        raise ValueError(f"query/key shapes disagree: {queries.shape} vs {keys.shape}")
    return fuse_heads(queries, fused_heads) @ fuse_heads(keys, fused_heads).T


def proxy_scores(
    queries: np.ndarray,
    keys: np.ndarray,
    candidates: CandidateSet,
    fused_heads: int = DEFAULT_FUSED_HEADS,
) -> ScoredCandidates:
    n = candidates.tokens_per_frame
    if queries.shape[0] != n or keys.shape[0] != n:
        raise ValueError(f"expected {n} tokens per frame, got {queries.shape[0]} and {keys.shape[0]}")
    flat = candidates.flat_indices()
    scores = score_matrix(queries, keys, fused_heads).reshape(-1)[flat]
    return ScoredCandidates(base=candidates, flat_indices=flat, raw_scores=scores)


def standardize(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Population z-score with the ``NORM_EPSILON`` guard; returns (z, mean, std)."""
    mu = float(values.mean())
    sigma = float(values.std())
    return (values - mu) / (sigma + NORM_EPSILON), mu, sigma


def normalize_scores(scored: ScoredCandidates) -> ScoredCandidates:
    if scored.raw_scores.size == 0:
        raise ValueError("cannot normalize an empty candidate set")
    z, mu, sigma = standardize(scored.raw_scores)
    return replace(scored, normalized_scores=z, mean=mu, std=sigma)


def threshold_keep(normalized: np.ndarray, threshold: float, fallback_k: int = 1) -> np.ndarray:
    """Positions with ``score >= threshold``; top ``fallback_k`` if none pass, ascending."""
    if normalized.size == 0:
        raise ValueError("cannot select from an empty candidate set")
    keep = np.flatnonzero(normalized >= threshold)
    if keep.size:
        return keep
    if fallback_k < 1:
        raise ValueError("fallback_k must be >= 1")
    # stable sort on -score keeps the earliest (lexicographically smallest) pair on ties
    order = np.argsort(-normalized, kind="stable")
    return np.sort(order[:fallback_k])


def dynamic_select(scored: ScoredCandidates, threshold: float, fallback_k: int = 1) -> set[tuple[int, int]]:
    if scored.normalized_scores is None:
        raise ValueError("normalize_scores must run before dynamic_select")
    keep = threshold_keep(scored.normalized_scores, threshold, fallback_k)
    pairs = scored.pair_list()
    return {pairs[p] for p in keep}
