"""Token, frame and block coordinates for a padded spatiotemporal sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Geometry of ``n_frames`` frames of ``tokens_per_frame`` tokens, padded to whole blocks."""

    n_frames: int
    tokens_per_frame: int
    block_size: int

    def __post_init__(self) -> None:
        for name in ("n_frames", "tokens_per_frame", "block_size"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise TypeError(f"{name} must be an integer, got {value!r}")
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.block_size < 2 or self.block_size & (self.block_size - 1):
            raise ValueError(f"block_size must be a power of two >= 2, got {self.block_size}")

    @property
    def total_tokens(self) -> int:
        return self.n_frames * self.tokens_per_frame

    @property
    def padded_tokens(self) -> int:
        return -(-self.total_tokens // self.block_size) * self.block_size

    @property
    def blocks_per_dim(self) -> int:
        return self.padded_tokens // self.block_size

    @property
    def frame_aligned(self) -> bool:
        """True when every frame starts and ends on a block boundary."""
        return self.tokens_per_frame % self.block_size == 0

    def frame_start(self, frame: int) -> int:
        return frame * self.tokens_per_frame

    def frame_blocks(self, frame: int) -> tuple[int, int]:
        """Half-open range of blocks touched by the tokens of ``frame``."""
        start = frame * self.tokens_per_frame
        stop = start + self.tokens_per_frame
        return start // self.block_size, (stop - 1) // self.block_size + 1

    def frame_of(self, token_index: int) -> int:
        """Frame owning a token; padding tokens belong to the last frame."""
        self._check_token(token_index)
        return min(token_index // self.tokens_per_frame, self.n_frames - 1)

    def block_range(self, block: int) -> tuple[int, int]:
        if not 0 <= block < self.blocks_per_dim:
            raise IndexError(f"block {block} out of range [0, {self.blocks_per_dim})")
        return block * self.block_size, (block + 1) * self.block_size

    def _check_token(self, token_index: int) -> None:
        if not 0 <= token_index < self.padded_tokens:
            raise IndexError(f"token {token_index} out of range [0, {self.padded_tokens})")

    def to_dict(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "tokens_per_frame": self.tokens_per_frame,
            "block_size": self.block_size,
        }


def make_grid(n_frames: int, tokens_per_frame: int, block_size: int) -> GridSpec:
    return GridSpec(n_frames, tokens_per_frame, block_size)


def block_of(token_index: int, grid: GridSpec) -> int:
    grid._check_token(token_index)
    return token_index // grid.block_size
