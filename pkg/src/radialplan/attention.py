"""Dense reference attention: logits, masked attention, proxy attention matrices and errors."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .grid import GridSpec
from .mask import TokenMask

MASK_EPSILON = 1e-10


@dataclass(frozen=True)
class FeatureBatch:
    """Queries, keys and values shaped ``[tokens, heads, head_dim]``."""

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        shapes = {a.shape for a in (self.queries, self.keys, self.values)}
        if len(shapes) != 1 or self.queries.ndim != 3:
            raise ValueError(f"Q/K/V must share one [tokens, heads, head_dim] shape, got {shapes}")
        if self.queries.shape[2] < 1:
            raise ValueError("head_dim must be >= 1")
        for a in (self.queries, self.keys, self.values):
            if not np.all(np.isfinite(a)):
                raise ValueError("features must be finite")

    @property
    def tokens(self) -> int:
        return self.queries.shape[0]

    @property
    def heads(self) -> int:
        return self.queries.shape[1]

    @property
    def head_dim(self) -> int:
        return self.queries.shape[2]

    def padded(self, tokens: int) -> "FeatureBatch":
        """Zero-pad along the token axis up to ``tokens`` rows."""
        extra = tokens - self.tokens
        if extra < 0:
            raise ValueError(f"cannot pad {self.tokens} tokens down to {tokens}")
        if extra == 0:
            return self
        pad = ((0, extra), (0, 0), (0, 0))
        return FeatureBatch(*(np.pad(a, pad) for a in (self.queries, self.keys, self.values)))


def logits(batch: FeatureBatch) -> np.ndarray:
    """Per-head ``Q K^T / sqrt(d_k)``, shape ``[heads, tokens, tokens]``."""
    q = np.asarray(batch.queries, dtype=np.float64)
    k = np.asarray(batch.keys, dtype=np.float64)
    return np.einsum("uhd,vhd->huv", q, k) / math.sqrt(batch.head_dim)


def _row_softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=-1, keepdims=True)
    return x


def _mask_bits(token_mask: TokenMask | np.ndarray) -> np.ndarray:
    bits = token_mask.bits if isinstance(token_mask, TokenMask) else token_mask
    return np.asarray(bits, dtype=bool)


def _prepare(batch: FeatureBatch, token_mask) -> tuple[FeatureBatch, np.ndarray]:
    bits = _mask_bits(token_mask)
    if bits.ndim != 2 or bits.shape[0] != bits.shape[1] or bits.shape[0] < batch.tokens:
        raise ValueError(f"mask of shape {bits.shape} does not cover {batch.tokens} tokens")
    real = batch.tokens
    if bits.shape[0] > real:
        # padding keys never receive attention
        bits = bits.copy()
        bits[:, real:] = False
    return batch.padded(bits.shape[0]), bits


def masked_attention(
    batch: FeatureBatch, token_mask: TokenMask | np.ndarray, mask_epsilon: float = MASK_EPSILON
) -> np.ndarray:
    """``Softmax(A + log(M + eps)) V`` per head; returns ``[tokens, heads, head_dim]`` for the real tokens."""
    if not mask_epsilon > 0:
        raise ValueError(f"mask_epsilon must be positive, got {mask_epsilon}")
    real = batch.tokens
    padded, bits = _prepare(batch, token_mask)
    bias = np.log(bits.astype(np.float64) + mask_epsilon)
    weights = _row_softmax(logits(padded) + bias[None])
    out = np.einsum("huv,vhd->uhd", weights, np.asarray(padded.values, dtype=np.float64))
    return out[:real]


def masked_attention_exact(batch: FeatureBatch, token_mask: TokenMask | np.ndarray) -> np.ndarray:
    """Masked attention with masked logits at ``-inf``; a row with no allowed key is an error."""
    real = batch.tokens
    padded, bits = _prepare(batch, token_mask)
    empty = ~bits[:real].any(axis=1)
    if empty.any():
        raise ValueError(f"{int(empty.sum())} query rows have no unmasked key")
    a = logits(padded)
    a[:, ~bits] = -np.inf
    a[:, real:, :] = 0.0  # padding query rows are discarded below
    weights = _row_softmax(a)
    out = np.einsum("huv,vhd->uhd", weights, np.asarray(padded.values, dtype=np.float64))
    return out[:real]


def attention_matrix(features: np.ndarray, token_mask: TokenMask | np.ndarray | None = None) -> np.ndarray:
    """Row-stochastic ``softmax(h_i . h_j / sqrt(D))`` over ``[S, D]`` features.

    With a mask, disallowed entries are exactly zero and each row is
    renormalized over its allowed keys. A row with no allowed key falls back
    to attending to itself and triggers a ``RuntimeWarning``.
    """
    h = np.asarray(features, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"features must be [S, D], got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("features must be finite")
    s, d = h.shape
    a = (h @ h.T) / math.sqrt(d)
    if token_mask is None:
        return _row_softmax(a)
    bits = _mask_bits(token_mask)
    if bits.shape[0] < s or bits.shape[1] < s:
        raise ValueError(f"mask of shape {bits.shape} does not cover {s} tokens")
    bits = bits[:s, :s]
    empty = ~bits.any(axis=1)
    if empty.any():
        warnings.warn(f"{int(empty.sum())} attention rows fully masked; using the diagonal", RuntimeWarning)
        bits = bits.copy()
        bits[empty, empty.nonzero()[0]] = True
    a[~bits] = -np.inf
    return _row_softmax(a)


def normalized_mse(dense: np.ndarray, sparse: np.ndarray) -> float:
    """``||dense - sparse||_F^2 / ||dense||_F^2``."""
    dense = np.asarray(dense, dtype=np.float64)
    sparse = np.asarray(sparse, dtype=np.float64)
    if dense.shape != sparse.shape:
        raise ValueError(f"shape mismatch: {dense.shape} vs {sparse.shape}")
    denom = float(np.sum(dense * dense))
    if denom == 0.0:
        raise ValueError("dense matrix has zero Frobenius norm")
    diff = dense - sparse
    return float(np.sum(diff * diff)) / denom


def local_index(grid: GridSpec, s: int | None = None) -> np.ndarray:
    s = grid.total_tokens if s is None else s
    return np.arange(s) % grid.tokens_per_frame


def spatial_mass_profile(attn: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Mean row mass at each local spatial distance ``|u - v| = 0 .. N_t - 1``."""
    s = attn.shape[0]
    u = local_index(grid, s)
    dist = np.abs(u[:, None] - u[None, :])
    return np.bincount(dist.ravel(), weights=attn.ravel(), minlength=grid.tokens_per_frame) / s


def radial_tail_mass(attn: np.ndarray, grid: GridSpec, width: int) -> float:
    """Mean row mass on keys outside the spatial window ``|u - v| <= width``."""
    profile = spatial_mass_profile(attn, grid)
    return float(profile[width + 1 :].sum())
