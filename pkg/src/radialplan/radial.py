"""Radial locality prior: logarithmic temporal groups, window widths and the split rule.

All window quantities are in tokens. ``t`` is always the temporal distance
``|i - j|`` between two frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grid import GridSpec

SPLIT_EPSILON = 1e-6


@dataclass(frozen=True)
class RadialParams:
    decay_factor: float
    long_range_factor: float
    split_epsilon: float = SPLIT_EPSILON
    # False forces sf(t) = 1, i.e. every frame pair is retained.
    split_rule: bool = True

    def __post_init__(self) -> None:
        if not self.decay_factor > 0:
            raise ValueError(f"decay_factor must be positive, got {self.decay_factor}")
        if not self.long_range_factor > 0:
            raise ValueError(f"long_range_factor must be positive, got {self.long_range_factor}")
        if not self.split_epsilon > 0:
            raise ValueError(f"split_epsilon must be positive, got {self.split_epsilon}")


def group_index(t: int) -> int:
    if t < 1:
        raise ValueError(f"group_index needs t >= 1, got {t}")
    return int(t).bit_length()


def base_span(tokens_per_frame: int) -> int:
    if tokens_per_frame < 1:
        raise ValueError(f"tokens_per_frame must be >= 1, got {tokens_per_frame}")
    return 1 << (int(tokens_per_frame) - 1).bit_length()


def _group_scale(t: int, L0: int) -> float:
    # L0 / 2^B(t); exact in binary floating point.
    return math.ldexp(float(L0), -group_index(t))


def decay_length(t: int, params: RadialParams, L0: int) -> float:
    return _group_scale(t, L0) * params.decay_factor


def split_length(t: int, params: RadialParams, L0: int) -> float:
    return _group_scale(t, L0) * params.long_range_factor


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def window_width(frame_i: int, frame_j: int, params: RadialParams, grid: GridSpec) -> int:
    t = abs(frame_i - frame_j)
    if t <= 1:
        return grid.tokens_per_frame
    L = decay_length(t, params, base_span(grid.tokens_per_frame))
    return max(grid.block_size, round_half_away(L))


def split_factor(t: int, params: RadialParams, block_size: int, L0: int) -> int:
    if not params.split_rule:
        return 1
    # epsilon only guards the division; adding it would push exact quotients (4 / 2) below the integer
    return max(1, math.floor(block_size / max(split_length(t, params, L0), params.split_epsilon)))


def frame_retained(t: int, params: RadialParams, block_size: int, L0: int) -> bool:
    """Split rule for a frame pair at distance ``t``.

    Adjacent frames (``t == 1``) are always kept: their window is the full
    frame and the stride only thins out long-range pairs.
    """
    if t < 1:
        raise ValueError(f"frame_retained needs t >= 1, got {t}")
    if t == 1:
        return True
    return t % split_factor(t, params, block_size, L0) == 0


def is_near(t: int, params: RadialParams, grid: GridSpec) -> bool:
    """Decay-state branch shared by the ratio and threshold selectors: L(t) >= B_s."""
    return decay_length(t, params, base_span(grid.tokens_per_frame)) >= grid.block_size


@dataclass(frozen=True)
class CandidateSet:
    """Token pairs ``(u, v)`` with ``|u - v| <= window_width`` for frames ``(i, j)``.

    Stored implicitly; ``pairs`` and ``flat_indices`` materialize on demand.
    """

    frame_i: int
    frame_j: int
    window_width: int
    tokens_per_frame: int
    retained: bool = True

    def band(self) -> np.ndarray:
        """Boolean ``N_t x N_t`` membership matrix."""
        n = self.tokens_per_frame
        if not self.retained:
            return np.zeros((n, n), dtype=bool)
        return band_matrix(n, self.window_width)

    @cached_property
    def size(self) -> int:
        if not self.retained:
            return 0
        return band_size(self.tokens_per_frame, self.window_width)

    def __len__(self) -> int:
        return self.size

    def flat_indices(self) -> np.ndarray:
        """Row-major flat indices ``u * N_t + v`` of the members, ascending."""
        return np.flatnonzero(self.band())

    def pairs(self) -> list[tuple[int, int]]:
        """Members in row-major order."""
        n = self.tokens_per_frame
        return [(int(p // n), int(p % n)) for p in self.flat_indices()]


def band_matrix(n: int, width: int) -> np.ndarray:
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :]) <= width


def band_size(n: int, width: int) -> int:
    """Number of ``(u, v)`` in ``[0, n)^2`` with ``|u - v| <= width``."""
    w = min(max(width, 0), n - 1)
    return n * (2 * w + 1) - w * (w + 1)


def candidate_set(frame_i: int, frame_j: int, params: RadialParams, grid: GridSpec) -> CandidateSet:
    for f in (frame_i, frame_j):
        if not 0 <= f < grid.n_frames:
            raise IndexError(f"frame {f} out of range [0, {grid.n_frames})")
    t = abs(frame_i - frame_j)
    if t < 1:
        raise ValueError("intra-frame pairs are dense and have no candidate set")
    L0 = base_span(grid.tokens_per_frame)
    return CandidateSet(
        frame_i=frame_i,
        frame_j=frame_j,
        window_width=window_width(frame_i, frame_j, params, grid),
        tokens_per_frame=grid.tokens_per_frame,
        retained=frame_retained(t, params, grid.block_size, L0),
    )


def receptive_field(grid: GridSpec, params: RadialParams) -> float:
    """Average number of candidate keys per query token, summed over all key frames.

    Counts the intra-frame block as ``N_t`` keys and pruned frame pairs as zero.
    """
    n, nf = grid.tokens_per_frame, grid.n_frames
    L0 = base_span(n)
    total = 0
    for t in range(nf):
        n_pairs = nf - t if t == 0 else 2 * (nf - t)
        if t == 0:
            per_pair = n * n
        elif not frame_retained(t, params, grid.block_size, L0):
            per_pair = 0
        else:
            per_pair = band_size(n, window_width(0, t, params, grid))
        total += n_pairs * per_pair
    return total / (nf * n)
