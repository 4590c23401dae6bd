"""Tree-structured Parzen Estimator over a box of continuous parameters.

Independent (per-parameter) TPE: the history is split at a loss quantile into
"good" and "bad" trials, each parameter gets a truncated-Gaussian Parzen
mixture per split, and the candidate drawn from the good mixtures with the
highest ``l(x) / g(x)`` wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

N_STARTUP = 10
N_CANDIDATES = 24
GOOD_QUANTILE = 0.25
MIN_BANDWIDTH_FRACTION = 0.1


@dataclass(frozen=True)
class ParzenMixture:
    """Equal-weight mixture of Gaussians truncated to ``[low, high]``."""

    centers: np.ndarray
    widths: np.ndarray
    low: float
    high: float

    @classmethod
    def fit(cls, points: Sequence[float], low: float, high: float) -> "ParzenMixture":
        x = np.asarray(points, dtype=np.float64)
        if x.size == 0:
            raise ValueError("cannot fit a Parzen mixture to no points")
        floor = (high - low) * MIN_BANDWIDTH_FRACTION
        if x.size == 1:
            widths = np.array([floor])
        else:
            gaps = np.abs(x[:, None] - x[None, :])
            np.fill_diagonal(gaps, np.inf)
            widths = np.maximum(floor, gaps.min(axis=1))
        return cls(x, widths, float(low), float(high))

    def _mass(self) -> np.ndarray:
        a = (self.low - self.centers) / self.widths
        b = (self.high - self.centers) / self.widths
        return ndtr(b) - ndtr(a)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[..., None]
        z = (x - self.centers) / self.widths
        log_comp = -0.5 * z * z - 0.5 * math.log(2 * math.pi) - np.log(self.widths) - np.log(self._mass())
        m = log_comp.max(axis=-1, keepdims=True)
        return (m[..., 0] + np.log(np.exp(log_comp - m).sum(axis=-1))) - math.log(self.centers.size)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        comp = rng.integers(0, self.centers.size, size=size)
        mu, sd = self.centers[comp], self.widths[comp]
        lo = ndtr((self.low - mu) / sd)
        hi = ndtr((self.high - mu) / sd)
        u = lo + rng.random(size) * (hi - lo)
        # ndtri saturates for tails thrown far outside the box; clip keeps draws in bounds
        return np.clip(mu + sd * ndtri(np.clip(u, 1e-300, 1 - 1e-16)), self.low, self.high)


def split_history(losses: Sequence[float], quantile: float = GOOD_QUANTILE) -> tuple[np.ndarray, np.ndarray]:
    """Indices of good and bad trials. Ties keep the earlier trial in the good set."""
    losses = np.asarray(losses, dtype=np.float64)
    order = np.argsort(losses, kind="stable")
    n_good = max(1, math.ceil(quantile * losses.size))
    return order[:n_good], order[n_good:]


def suggest(
    points: np.ndarray,
    losses: Sequence[float],
    bounds: Sequence[tuple[float, float]],
    rng: np.random.Generator,
    *,
    n_startup: int = N_STARTUP,
    n_candidates: int = N_CANDIDATES,
    quantile: float = GOOD_QUANTILE,
) -> np.ndarray:
    """Next point to evaluate given past ``points`` (``[n, dims]``) and their ``losses``."""
    lows = np.array([b[0] for b in bounds], dtype=np.float64)
    highs = np.array([b[1] for b in bounds], dtype=np.float64)
    points = np.asarray(points, dtype=np.float64).reshape(-1, len(bounds))
    if len(losses) != points.shape[0]:
        raise ValueError("points and losses disagree in length")
    if points.shape[0] < max(n_startup, 2):
        return lows + rng.random(len(bounds)) * (highs - lows)

    good, bad = split_history(losses, quantile)
    candidates = np.empty((n_candidates, len(bounds)))
    score = np.zeros(n_candidates)
    for d, (lo, hi) in enumerate(zip(lows, highs)):
        l_mix = ParzenMixture.fit(points[good, d], lo, hi)
        g_mix = ParzenMixture.fit(points[bad, d], lo, hi)
        candidates[:, d] = l_mix.sample(rng, n_candidates)
        score += l_mix.log_pdf(candidates[:, d]) - g_mix.log_pdf(candidates[:, d])
    return candidates[int(np.argmax(score))]
