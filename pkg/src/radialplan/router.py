"""Motion-score routing into the regime lookup table."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Protocol

from .profiler import LUTEntry, LUTError, MissingRegimeError, RegimeLUT
from .proxy import DriftRegime
from .selection import Mode, SparsityConfig

NEUTRAL_SCORE = 0.5
_WORD = re.compile(r"[a-z0-9]+(?:[-'][a-z0-9]+)*")


class ScoreSource(str, Enum):
    PROVIDED = "provided"
    HEURISTIC = "heuristic"


@dataclass(frozen=True)
class MotionScore:
    value: float
    source: ScoreSource = ScoreSource.PROVIDED

    def __post_init__(self) -> None:
        v = float(self.value)
        if math.isnan(v):
            raise ValueError("motion score is NaN")
        object.__setattr__(self, "value", min(1.0, max(0.0, v)))
        object.__setattr__(self, "source", ScoreSource(self.source))


@dataclass(frozen=True)
class RegimeBins:
    low_upper: float = 0.3
    mid_upper: float = 0.7

    def __post_init__(self) -> None:
        if not (0.0 < self.low_upper < self.mid_upper < 1.0):
            raise ValueError(f"need 0 < low_upper < mid_upper < 1, got {self.low_upper}, {self.mid_upper}")


class RoutingError(LUTError):
    """The lookup table cannot satisfy a routing request."""


class FallbackUnavailableError(RoutingError):
    """No static-ratio mid-regime profile to fall back on."""


def discretize(score: MotionScore | float, bins: RegimeBins = RegimeBins()) -> DriftRegime:
    value = score.value if isinstance(score, MotionScore) else MotionScore(score).value
    if value < bins.low_upper:
        return DriftRegime.LOW
    if value < bins.mid_upper:
        return DriftRegime.MID
    return DriftRegime.HIGH


def parse_score(raw) -> MotionScore | None:
    """Coerce user input to a score; ``None`` for absent or unparseable input."""
    if raw is None or isinstance(raw, MotionScore):
        return raw
    if isinstance(raw, str):
        raw = raw.strip()
        if not raw:
            return None
    try:
        value = float(raw)
    except (TypeError, ValueError):
        return None
    if not math.isfinite(value):
        return None
    return MotionScore(value)


@dataclass(frozen=True)
class RouteDecision:
    regime: DriftRegime
    mode: Mode
    config: SparsityConfig
    used_fallback: bool
    score: MotionScore | None = None

    def to_dict(self) -> dict:
        d = {
            "regime": self.regime.value,
            "mode": self.mode.value,
            "used_fallback": self.used_fallback,
            "config": self.config.to_dict(),
        }
        if self.score is not None:
            d["score"] = self.score.value
            d["score_source"] = self.score.source.value
        return d


def route(score, lut: RegimeLUT, bins: RegimeBins = RegimeBins()) -> RouteDecision:
    """Pick the table entry for a score, or the conservative default when the score is unusable.

    A usable score whose regime is missing raises :class:`MissingRegimeError`.
    An unusable score with no static mid profile raises :class:`FallbackUnavailableError`.
    """
    parsed = parse_score(score)
    if parsed is None:
        entry = lut.conservative_default()
        if entry is None:
            raise FallbackUnavailableError("lookup table has no static_ratio mid-regime profile for the conservative default")
        return RouteDecision(DriftRegime.MID, entry.mode, entry.config, True, None)
    regime = discretize(parsed, bins)
    entry: LUTEntry = lut.lookup(regime)
    return RouteDecision(regime, entry.mode, entry.config, False, parsed)


class MotionScorer(Protocol):
    def __call__(self, prompt: str) -> MotionScore: ...


@dataclass(frozen=True)
class Lexicon:
    base: float
    terms: Mapping[tuple[str, ...], float]

    @classmethod
    def from_dict(cls, data: dict) -> "Lexicon":
        terms = {}
        for phrase, weight in data["terms"].items():
            words = tuple(_WORD.findall(phrase.lower()))
            if not words:
                raise ValueError(f"empty lexicon phrase {phrase!r}")
            terms[words] = float(weight)
        return cls(float(data.get("base", NEUTRAL_SCORE)), terms)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Lexicon":
        if path is None:
            return default_lexicon()
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def longest(self) -> int:
        return max((len(k) for k in self.terms), default=1)

    def matches(self, prompt: str) -> list[tuple[str, float]]:
        # greedy longest-phrase-first scan so "static camera" is not also read as "camera"
        words = _WORD.findall(prompt.lower())
        found = []
        i = 0
        while i < len(words):
            for n in range(min(self.longest, len(words) - i), 0, -1):
                key = tuple(words[i:i + n])
                if key in self.terms:
                    found.append((" ".join(key), self.terms[key]))
                    i += n
                    break
            else:
                i += 1
        return found

    def score(self, prompt: str) -> MotionScore:
        total = self.base + sum(w for _, w in self.matches(prompt))
        return MotionScore(total, ScoreSource.HEURISTIC)

    __call__ = score


@lru_cache(maxsize=1)
def default_lexicon() -> Lexicon:
    text = resources.files("radialplan").joinpath("data/lexicon.json").read_text()
    return Lexicon.from_dict(json.loads(text))


def heuristic_score(prompt: str, lexicon: Lexicon | None = None) -> MotionScore:
    return (lexicon or default_lexicon()).score(prompt or "")


def provided_score(value: float) -> MotionScore:
    return MotionScore(value, ScoreSource.PROVIDED)


__all__ = [
    "FallbackUnavailableError",
    "Lexicon",
    "MissingRegimeError",
    "MotionScore",
    "MotionScorer",
    "RegimeBins",
    "RouteDecision",
    "RoutingError",
    "ScoreSource",
    "default_lexicon",
    "discretize",
    "heuristic_score",
    "parse_score",
    "provided_score",
    "route",
]
