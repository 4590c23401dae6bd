"""Block-mask construction: candidate windows, per-pair selection and block aggregation."""

from __future__ import annotations

import math
import os
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .grid import GridSpec
from .radial import base_span, frame_retained, window_width
from .selection import (
    DEFAULT_FUSED_HEADS,
    Mode,
    SparsityConfig,
    fuse_heads,
    retention_ratio,
    sample_count,
    sample_positions,
    standardize,
    threshold_for,
    threshold_keep,
)

THREADS_ENV = "RADIALPLAN_THREADS"


class BlockMask:
    """Immutable ``S_b x S_b`` bit matrix, stored row-major with rows packed to bytes."""

    __slots__ = ("blocks_per_dim", "_packed")

    def __init__(self, blocks_per_dim: int, packed: np.ndarray):
        row_bytes = -(-blocks_per_dim // 8)
        packed = np.ascontiguousarray(packed, dtype=np.uint8).reshape(blocks_per_dim, row_bytes)
        packed.flags.writeable = False
        self.blocks_per_dim = int(blocks_per_dim)
        self._packed = packed

    @classmethod
    def from_array(cls, bits: np.ndarray) -> "BlockMask":
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
            raise ValueError(f"block mask must be square, got shape {bits.shape}")
        return cls(bits.shape[0], np.packbits(bits, axis=1))

    @classmethod
    def empty(cls, blocks_per_dim: int) -> "BlockMask":
        return cls.from_array(np.zeros((blocks_per_dim, blocks_per_dim), dtype=bool))

    @property
    def packed(self) -> np.ndarray:
        return self._packed

    def to_array(self) -> np.ndarray:
        return np.unpackbits(self._packed, axis=1, count=self.blocks_per_dim).astype(bool)

    def active_count(self) -> int:
        return int(np.unpackbits(self._packed, axis=1, count=self.blocks_per_dim).sum())

    def __getitem__(self, rc: tuple[int, int]) -> bool:
        r, c = rc
        return bool(self._packed[r, c >> 3] >> (7 - (c & 7)) & 1)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BlockMask):
            return NotImplemented
        return self.blocks_per_dim == other.blocks_per_dim and np.array_equal(self._packed, other._packed)

    def __hash__(self) -> int:
        return hash((self.blocks_per_dim, self._packed.tobytes()))

    def __repr__(self) -> str:
        return f"BlockMask(blocks_per_dim={self.blocks_per_dim}, active={self.active_count()})"


@dataclass(frozen=True)
class TokenMask:
    padded_tokens: int
    bits: np.ndarray


def sparsity(mask: BlockMask) -> float:
    return 1.0 - mask.active_count() / mask.blocks_per_dim**2


def expand_mask(mask: BlockMask, grid: GridSpec) -> TokenMask:
    if mask.blocks_per_dim != grid.blocks_per_dim:
        raise ValueError(f"mask has {mask.blocks_per_dim} blocks per side, grid has {grid.blocks_per_dim}")
    b = grid.block_size
    bits = mask.to_array().repeat(b, axis=0).repeat(b, axis=1)
    bits.flags.writeable = False
    return TokenMask(grid.padded_tokens, bits)


def aggregate_block(
    selected_pairs_in_block: Iterable[tuple[int, int]],
    col_threshold: float,
    mask_threshold: float,
    block_size: int,
) -> bool:
    """Column-then-block density rule on one ``B_s x B_s`` tile of (row, col) offsets."""
    per_column = defaultdict(int)
    for row, col in set(selected_pairs_in_block):
        if not (0 <= row < block_size and 0 <= col < block_size):
            raise ValueError(f"pair {(row, col)} lies outside a {block_size}x{block_size} tile")
        per_column[col] += 1
    active_cols = sum(1 for count in per_column.values() if count / block_size >= col_threshold)
    return active_cols / block_size >= mask_threshold


def _segment_starts(offset: int, length: int, block_size: int) -> np.ndarray:
    """Local indices in ``[0, length)`` where a new block begins, given a global ``offset``."""
    first = (-offset) % block_size
    return np.unique(np.concatenate(([0], np.arange(first, length, block_size)))).astype(np.intp)


def _blocks_from_counts(
    counts: np.ndarray, row_offset: int, col_offset: int, block_size: int, col_threshold: float, mask_threshold: float
) -> tuple[int, int, np.ndarray]:
    # counts[r, c]: retained entries of column c inside the r-th block row touched by the tile
    col_starts = _segment_starts(col_offset, counts.shape[1], block_size)
    col_active = counts / block_size >= col_threshold
    active_cols = np.add.reduceat(col_active.view(np.uint8), col_starts, axis=1, dtype=np.int32)
    return row_offset // block_size, col_offset // block_size, active_cols / block_size >= mask_threshold


def aggregate_tile(
    selected: np.ndarray,
    row_offset: int,
    col_offset: int,
    block_size: int,
    col_threshold: float,
    mask_threshold: float,
) -> tuple[int, int, np.ndarray]:
    """Aggregate a frame-pair selection matrix into the blocks it touches.

    Returns ``(first_block_row, first_block_col, active)``. Column ratios and
    active-column ratios both divide by ``block_size``, so tokens outside this
    frame pair (other frames, padding) count as unretained.
    """
    row_starts = _segment_starts(row_offset, selected.shape[0], block_size)
    counts = np.add.reduceat(selected.view(np.uint8), row_starts, axis=0, dtype=np.int32)
    return _blocks_from_counts(counts, row_offset, col_offset, block_size, col_threshold, mask_threshold)


@dataclass(frozen=True)
class _Band:
    """Row layout of the candidate band ``|u - v| <= width`` over ``n x n`` pairs."""

    n: int
    width: int
    lo: np.ndarray  # first key column of each row
    counts: np.ndarray  # members per row
    cum: np.ndarray  # row start positions in the row-major enumeration, length n + 1

    @classmethod
    def build(cls, n: int, width: int) -> "_Band":
        u = np.arange(n)
        lo = np.maximum(u - width, 0)
        counts = np.minimum(u + width + 1, n) - lo
        cum = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=cum[1:])
        return cls(n, width, lo, counts, cum)

    @property
    def size(self) -> int:
        return int(self.cum[-1])

    def locate(self, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) of ascending enumeration positions."""
        per_row = np.diff(np.searchsorted(positions, self.cum))
        u = np.repeat(np.arange(self.n), per_row)
        return u, self.lo[u] + (positions - self.cum[u])

    def column_counts(self, row_offset: int, block_size: int) -> np.ndarray:
        """Per block row and key column, members of the full band (no enumeration)."""
        starts = _segment_starts(row_offset, self.n, block_size)
        ends = np.append(starts[1:], self.n)
        v = np.arange(self.n)
        lo = np.maximum(starts[:, None], v - self.width)
        hi = np.minimum(ends[:, None], v + self.width + 1)
        return np.maximum(hi - lo, 0)

    def scores(self, q: np.ndarray, k: np.ndarray, chunk: int = 256) -> np.ndarray:
        """``q[u] . k[v]`` for every member, in enumeration order, computed on row slabs."""
        out = np.empty(self.size)
        for u0 in range(0, self.n, chunk):
            u1 = min(self.n, u0 + chunk)
            c0 = int(self.lo[u0])
            c1 = int(self.lo[u1 - 1] + self.counts[u1 - 1])
            slab = q[u0:u1] @ k[c0:c1].T
            p0, p1 = int(self.cum[u0]), int(self.cum[u1])
            u, v = self.locate(np.arange(p0, p1))
            out[p0:p1] = slab[u - u0, v - c0]
        return out


def _pair_counts(u: np.ndarray, v: np.ndarray, n: int, row_offset: int, block_size: int) -> np.ndarray:
    first = row_offset // block_size
    n_block_rows = (row_offset + n - 1) // block_size - first + 1
    r = (row_offset + u) // block_size - first
    return np.bincount(r * n + v, minlength=n_block_rows * n).reshape(n_block_rows, n)


class PhaseTimer:
    """Accumulates wall time per named phase."""

    def __init__(self) -> None:
        self.totals: dict[str, float] = defaultdict(float)
        self.frame_pairs = 0

    def add(self, phase: str, seconds: float) -> None:
        self.totals[phase] += seconds

    def merge(self, other: "PhaseTimer") -> None:
        for k, v in other.totals.items():
            self.totals[k] += v
        self.frame_pairs += other.frame_pairs


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, int(threads))


class _MaskBuilder:
    def __init__(self, grid, config, features, seed, fused_heads, fallback_k):
        if config.block_size != grid.block_size:
            raise ValueError(f"config block size {config.block_size} != grid block size {grid.block_size}")
        self.grid = grid
        self.config = config
        self.seed = int(seed)
        self.fallback_k = int(fallback_k)
        self.L0 = base_span(grid.tokens_per_frame)
        self.fused = None
        if config.mode is Mode.DYNAMIC_THRESHOLD:
            if features is None:
                raise ValueError("dynamic_threshold mode requires query/key features")
            queries, keys = features if isinstance(features, tuple) else (features, features)
            s = grid.total_tokens
            for name, arr in (("queries", queries), ("keys", keys)):
                if arr.shape[0] < s:
                    raise ValueError(f"{name} has {arr.shape[0]} tokens, grid needs {s}")
            self.fused = (fuse_heads(np.asarray(queries)[:s], fused_heads), fuse_heads(np.asarray(keys)[:s], fused_heads))
        self._bands: dict[int, _Band] = {}

    def band(self, width: int) -> _Band:
        band = self._bands.get(width)
        if band is None:
            band = self._bands[width] = _Band.build(self.grid.tokens_per_frame, width)
        return band

    def pair_tile(self, i: int, j: int, timer: PhaseTimer | None):
        """Active blocks contributed by frame pair ``(i, j)``, or None when it adds nothing."""
        grid, cfg = self.grid, self.config
        n, bs = grid.tokens_per_frame, grid.block_size
        t = abs(i - j)
        if t == 0:
            r0, r1 = grid.frame_blocks(i)
            return r0, r0, np.ones((r1 - r0, r1 - r0), dtype=bool)

        clock = time.perf_counter
        t0 = clock()
        if not frame_retained(t, cfg.radial, bs, self.L0):
            if timer is not None:
                timer.add("candidates", clock() - t0)
            return None
        band = self.band(window_width(i, j, cfg.radial, grid))
        t1 = clock()

        positions = None  # None keeps the whole band
        if cfg.mode is Mode.STATIC_RATIO:
            ratio = retention_ratio(i, j, cfg, grid)
            if sample_count(band.size, ratio) < band.size:
                positions = sample_positions(band.size, ratio, self.seed, i, j)
        else:
            tau = threshold_for(i, j, cfg, grid)
            if tau != -math.inf:
                q, k = self.fused
                scores = band.scores(q[i * n : (i + 1) * n], k[j * n : (j + 1) * n])
                z, _, _ = standardize(scores)
                positions = threshold_keep(z, tau, self.fallback_k)
                if positions.size == band.size:
                    positions = None
        if positions is None:
            counts = band.column_counts(i * n, bs)
        else:
            u, v = band.locate(positions)
            counts = _pair_counts(u, v, n, i * n, bs)
        t2 = clock()

        tile = _blocks_from_counts(counts, i * n, j * n, bs, cfg.col_threshold, cfg.mask_threshold)
        if timer is not None:
            timer.add("candidates", t1 - t0)
            timer.add("selection", t2 - t1)
            timer.add("aggregation", clock() - t2)
        return tile

    def frame_row(self, i: int, timer: PhaseTimer | None):
        out = []
        for j in range(self.grid.n_frames):
            tile = self.pair_tile(i, j, timer)
            if timer is not None:
                timer.frame_pairs += 1
            if tile is not None:
                out.append(tile)
        return out


def build_mask(
    grid: GridSpec,
    config: SparsityConfig,
    features: np.ndarray | tuple[np.ndarray, np.ndarray] | None = None,
    seed: int = 0,
    *,
    fused_heads: int = DEFAULT_FUSED_HEADS,
    fallback_k: int = 1,
    threads: int | None = None,
    timer: PhaseTimer | None = None,
) -> BlockMask:
    """Block-sparse mask for ``grid`` under ``config``.

    ``features`` are ``[tokens, heads, head_dim]`` (or ``[tokens, dim]``) arrays,
    either one array used as both queries and keys or a ``(queries, keys)``
    tuple; they are required in dynamic mode and ignored in static mode.
    Per-pair results are OR-merged, so the output does not depend on
    ``threads``.
    """
    builder = _MaskBuilder(grid, config, features, seed, fused_heads, fallback_k)
    bits = np.zeros((grid.blocks_per_dim, grid.blocks_per_dim), dtype=bool)
    frames = range(grid.n_frames)
    n_threads = min(resolve_threads(threads), grid.n_frames)

    if n_threads == 1:
        rows = (builder.frame_row(i, timer) for i in frames)
    else:
        timers = [PhaseTimer() if timer is not None else None for _ in frames]
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            rows = list(pool.map(lambda i: builder.frame_row(i, timers[i]), frames))
        if timer is not None:
            for sub in timers:
                timer.merge(sub)

    for tiles in rows:
        for r0, c0, active in tiles:
            bits[r0 : r0 + active.shape[0], c0 : c0 + active.shape[1]] |= active
    return BlockMask.from_array(bits)
