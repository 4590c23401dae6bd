"""Synthetic drifting features for offline profiling.

Each spatial token follows an AR(1) process across frames,
``h_t = sqrt(1 - d^2) h_{t-1} + d eps_t``, started from a stationary draw.
Both the initial state and the innovations are smoothed along the token axis
so that neighbouring tokens are correlated, then rescaled to unit variance.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import attention_matrix, spatial_mass_profile
from .grid import GridSpec, make_grid

_SEED_MASK = (1 << 64) - 1
_NOISE_STREAM = 0x50524F58  # "PROX"


class DriftRegime(str, enum.Enum):
    LOW = "low"
    MID = "mid"
    HIGH = "high"

    @classmethod
    def parse(cls, value: "str | DriftRegime") -> "DriftRegime":
        if isinstance(value, DriftRegime):
            return value
        return cls(str(value).strip().lower())

    @property
    def drift_rate(self) -> float:
        return _DRIFT[self]

    @property
    def index(self) -> int:
        return list(DriftRegime).index(self)


_DRIFT = {DriftRegime.LOW: 0.02, DriftRegime.MID: 0.15, DriftRegime.HIGH: 0.40}


def regime_drift(name: "str | DriftRegime") -> float:
    return DriftRegime.parse(name).drift_rate


@dataclass(frozen=True)
class ProxyBatch:
    grid: GridSpec
    feature_dim: int
    features: np.ndarray  # [n_frames, tokens_per_frame, feature_dim]
    drift_rate: float
    spatial_scale: float
    seed: int

    def flat(self) -> np.ndarray:
        """Features as ``[S, D]`` in frame-major token order."""
        return self.features.reshape(self.grid.total_tokens, self.feature_dim)


@dataclass(frozen=True)
class DecayFit:
    amplitude: float
    rate: float
    residual: float

    def weight(self, distance) -> np.ndarray:
        return self.amplitude * np.exp(-self.rate * np.asarray(distance, dtype=np.float64))

    def tail_bound(self, width: float) -> float:
        """``integral_w^inf C e^{-mu x} dx``; infinite when the fit shows no decay."""
        if self.rate <= 0:
            return math.inf
        return self.amplitude / self.rate * math.exp(-self.rate * width)


def default_spatial_scale(tokens_per_frame: int) -> float:
    return tokens_per_frame / 8.0


def smoothing_matrix(n: int, scale: float) -> np.ndarray:
    """Gaussian smoother whose rows have unit L2 norm, so white noise keeps unit variance."""
    if scale < 0:
        raise ValueError(f"spatial_scale must be >= 0, got {scale}")
    if scale == 0:
        return np.eye(n)
    d = np.arange(n)[:, None] - np.arange(n)[None, :]
    w = np.exp(-0.5 * (d / scale) ** 2)
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def frame_noise(seed: int, frame: int, shape: tuple[int, int]) -> np.ndarray:
    """Standard normal draws for one frame from a Philox stream keyed by (seed, frame)."""
    ss = np.random.SeedSequence([int(seed) & _SEED_MASK, _NOISE_STREAM, int(frame)])
    return np.random.Generator(np.random.Philox(ss)).standard_normal(shape)


def simulate(
    regime: "DriftRegime | str | float",
    grid: GridSpec,
    feature_dim: int = 64,
    spatial_scale: float | None = None,
    seed: int = 0,
) -> ProxyBatch:
    """Draw a proxy batch. ``regime`` may also be a raw drift rate in ``[0, 1]``."""
    if isinstance(regime, (int, float)) and not isinstance(regime, bool):
        delta = float(regime)
    else:
        delta = DriftRegime.parse(regime).drift_rate
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"drift rate must lie in [0, 1], got {delta}")
    if feature_dim < 1:
        raise ValueError("feature_dim must be >= 1")
    if spatial_scale is None:
        spatial_scale = default_spatial_scale(grid.tokens_per_frame)
    n = grid.tokens_per_frame
    smooth = smoothing_matrix(n, spatial_scale)
    carry = math.sqrt(1.0 - delta * delta)
    feats = np.empty((grid.n_frames, n, feature_dim))
    feats[0] = smooth @ frame_noise(seed, 0, (n, feature_dim))
    for t in range(1, grid.n_frames):
        feats[t] = carry * feats[t - 1] + delta * (smooth @ frame_noise(seed, t, (n, feature_dim)))
    return ProxyBatch(grid, feature_dim, feats, delta, float(spatial_scale), int(seed))


def lag_correlation(batch: ProxyBatch, lag: int) -> float:
    """Pearson correlation between all feature entries of frame ``f`` and frame ``f + lag``, pooled over ``f``."""
    if not 0 <= lag < batch.grid.n_frames:
        raise ValueError(f"lag {lag} out of range")
    a = batch.features[: batch.grid.n_frames - lag].ravel()
    b = batch.features[lag:].ravel()
    return float(np.corrcoef(a, b)[0, 1])


def frame_distance_profile(attn: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Mean attention weight at each temporal distance ``0 .. N_f - 1``."""
    s = attn.shape[0]
    frames = np.arange(s) // grid.tokens_per_frame
    dist = np.abs(frames[:, None] - frames[None, :]).ravel()
    sums = np.bincount(dist, weights=attn.ravel(), minlength=grid.n_frames)
    counts = np.bincount(dist, minlength=grid.n_frames)
    return sums / counts


def _log_linear_fit(x: np.ndarray, y: np.ndarray) -> DecayFit:
    if np.any(y <= 0):
        raise ValueError("cannot log-fit non-positive mean attention weights")
    slope, intercept = np.polyfit(x, np.log(y), 1)
    resid = np.log(y) - (intercept + slope * x)
    return DecayFit(amplitude=float(math.exp(intercept)), rate=float(-slope), residual=float(np.sqrt(np.mean(resid**2))))


def fit_decay(batch: ProxyBatch, attn: np.ndarray | None = None) -> DecayFit:
    """Fit ``C exp(-mu t)`` to the mean proxy attention weight at temporal distance ``t >= 1``."""
    if batch.grid.n_frames < 4:
        raise ValueError("fit_decay needs at least 4 frames")
    if attn is None:
        attn = attention_matrix(batch.flat())
    profile = frame_distance_profile(attn, batch.grid)
    t = np.arange(1, batch.grid.n_frames, dtype=np.float64)
    return _log_linear_fit(t, profile[1:])


def fit_spatial_decay(attn: np.ndarray, grid: GridSpec) -> DecayFit:
    """Fit ``C exp(-mu d)`` to the mean row mass at local spatial distance ``d >= 1``."""
    profile = spatial_mass_profile(attn, grid)
    d = np.arange(1, grid.tokens_per_frame, dtype=np.float64)
    return _log_linear_fit(d, profile[1:])


def spatial_decay_envelope(attn: np.ndarray, grid: GridSpec) -> DecayFit:
    """Exponential envelope of the spatial mass profile: fitted rate, amplitude lifted to dominate.

    The tail bound ``C / mu * exp(-mu w)`` only holds if every per-distance
    mass sits under ``C exp(-mu d)``; a plain log-linear fit passes through the
    profile instead of over it.
    """
    fit = fit_spatial_decay(attn, grid)
    profile = spatial_mass_profile(attn, grid)
    d = np.arange(1, grid.tokens_per_frame, dtype=np.float64)
    lift = float(np.max(profile[1:] * np.exp(fit.rate * d)))
    return DecayFit(amplitude=max(fit.amplitude, lift), rate=fit.rate, residual=fit.residual)


def write_batch(batch: ProxyBatch, path: str | Path) -> tuple[Path, Path]:
    """Write features as little-endian float64 ``<path>`` plus a ``<path>.json`` sidecar."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(batch.features, dtype="<f8").tobytes())
    sidecar = path.with_name(path.name + ".json")
    meta = {
        "format": "radialplan-proxy",
        "version": 1,
        "dtype": "float64-le",
        "shape": [batch.grid.n_frames, batch.grid.tokens_per_frame, batch.feature_dim],
        "grid": batch.grid.to_dict(),
        "drift_rate": batch.drift_rate,
        "spatial_scale": batch.spatial_scale,
        "seed": batch.seed,
    }
    sidecar.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return path, sidecar


def read_batch(path: str | Path) -> ProxyBatch:
    path = Path(path)
    if path.suffix == ".json":
        sidecar, path = path, path.with_name(path.name[: -len(".json")])
    else:
        sidecar = path.with_name(path.name + ".json")
    meta = json.loads(sidecar.read_text())
    if meta.get("format") != "radialplan-proxy":
        raise ValueError(f"{sidecar} is not a proxy batch sidecar")
    shape = tuple(meta["shape"])
    raw = path.read_bytes()
    expected = math.prod(shape) * 8
    if len(raw) != expected:
        raise ValueError(f"{path} holds {len(raw)} bytes, expected {expected}")
    g = meta["grid"]
    grid = make_grid(g["n_frames"], g["tokens_per_frame"], g["block_size"])
    feats = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return ProxyBatch(grid, shape[2], feats, float(meta["drift_rate"]), float(meta["spatial_scale"]), int(meta["seed"]))
