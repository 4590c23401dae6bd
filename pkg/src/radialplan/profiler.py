"""Offline configuration search on the drifting-feature proxy task."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from . import tpe
from .attention import attention_matrix, normalized_mse
from .grid import GridSpec, make_grid
from .mask import build_mask, expand_mask, sparsity
from .proxy import DriftRegime, ProxyBatch, simulate
from .radial import RadialParams
from .selection import Mode, SparsityConfig

PENALTY_WEIGHT = 10.0
SPARSITY_TARGET = 0.80
DEFAULT_TRIALS = 30
DESK_GRID = (16, 64, 8)
DESK_FEATURE_DIM = 64
LUT_VERSION = 1

PARAM_NAMES = ("gamma", "lambda", "theta_m", "theta_c", "near_param", "far_param")


class LUTError(Exception):
    """Structural problem with a regime lookup table."""


class MissingRegimeError(LUTError, KeyError):
    def __str__(self) -> str:  # KeyError would repr() the message
        return str(self.args[0]) if self.args else "missing regime"


@dataclass(frozen=True)
class SearchSpace:
    gamma: tuple[float, float] = (1.0, 3.0)
    lam: tuple[float, float] = (0.1, 1.0)
    theta_c: tuple[float, float] = (0.1, 1.0)
    theta_m: tuple[float, float] = (0.1, 1.0)
    rho1: tuple[float, float] = (0.3, 1.0)
    rho2: tuple[float, float] = (0.1, 0.8)
    tau1: tuple[float, float] = (-10.0, 5.0)
    tau2: tuple[float, float] = (-5.0, 8.0)

    def __post_init__(self) -> None:
        for name, (lo, hi) in self.items():
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ValueError(f"bad interval for {name}: [{lo}, {hi}]")
        for name in ("theta_c", "theta_m", "rho1", "rho2"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi > 1:
                raise ValueError(f"{name} bounds must lie inside (0, 1], got [{lo}, {hi}]")
        if self.gamma[0] <= 0 or self.lam[0] <= 0:
            raise ValueError("gamma and lambda bounds must be positive")

    def items(self):
        for name in ("gamma", "lam", "theta_c", "theta_m", "rho1", "rho2", "tau1", "tau2"):
            yield name, getattr(self, name)

    def bounds(self, mode: Mode | str) -> list[tuple[float, float]]:
        """Bounds in ``PARAM_NAMES`` order for ``mode``."""
        mode = Mode.parse(mode)
        near, far = (self.rho1, self.rho2) if mode is Mode.STATIC_RATIO else (self.tau1, self.tau2)
        return [self.gamma, self.lam, self.theta_m, self.theta_c, near, far]

    def contains(self, config: SparsityConfig) -> bool:
        return all(lo <= x <= hi for x, (lo, hi) in zip(config_vector(config), self.bounds(config.mode)))

    def with_overrides(self, overrides: Mapping[str, tuple[float, float]]) -> "SearchSpace":
        alias = {"lambda": "lam", "theta-m": "theta_m", "theta-c": "theta_c"}
        fields = {}
        for name, bounds in overrides.items():
            key = alias.get(name, name).replace("-", "_")
            if key not in dict(self.items()):
                raise ValueError(f"unknown search parameter {name!r}")
            fields[key] = (float(bounds[0]), float(bounds[1]))
        return replace(self, **fields)


def config_vector(config: SparsityConfig) -> np.ndarray:
    return np.array(
        [
            config.radial.decay_factor,
            config.radial.long_range_factor,
            config.mask_threshold,
            config.col_threshold,
            config.near_param,
            config.far_param,
        ]
    )


def vector_config(x: Iterable[float], mode: Mode | str, block_size: int) -> SparsityConfig:
    g, lam, tm, tc, near, far = (float(v) for v in x)
    return SparsityConfig(Mode.parse(mode), RadialParams(g, lam), tm, tc, near, far, block_size)


@dataclass(frozen=True)
class TrialRecord:
    config: SparsityConfig
    loss: float
    mse: float
    achieved_sparsity: float
    trial_index: int = 0

    @property
    def penalty(self) -> float:
        return self.loss - self.mse


def sparsity_penalty(achieved: float, penalty_weight: float, sparsity_target: float) -> float:
    return penalty_weight * max(0.0, sparsity_target - achieved)


def objective(
    config: SparsityConfig,
    batch: ProxyBatch,
    grid: GridSpec | None = None,
    penalty_weight: float = PENALTY_WEIGHT,
    sparsity_target: float = SPARSITY_TARGET,
    *,
    seed: int = 0,
    dense: np.ndarray | None = None,
    trial_index: int = 0,
) -> TrialRecord:
    """Normalized reconstruction error of the proxy attention plus the sparsity shortfall penalty."""
    grid = batch.grid if grid is None else grid
    if grid != batch.grid:
        raise ValueError("proxy batch was generated on a different grid")
    h = batch.flat()
    if dense is None:
        dense = attention_matrix(h)
    mask = build_mask(grid, config, h, seed=seed)
    sp = sparsity(mask)
    sparse = attention_matrix(h, expand_mask(mask, grid))
    mse = normalized_mse(dense, sparse)
    loss = mse + sparsity_penalty(sp, penalty_weight, sparsity_target)
    return TrialRecord(config, loss, mse, sp, trial_index)


def _history_arrays(history: list[TrialRecord], mode: Mode) -> tuple[np.ndarray, list[float]]:
    same = [r for r in history if r.config.mode is mode]
    return np.array([config_vector(r.config) for r in same]).reshape(-1, len(PARAM_NAMES)), [r.loss for r in same]


def tpe_suggest(
    history: list[TrialRecord],
    space: SearchSpace,
    rng_state: np.random.Generator,
    mode: Mode | str = Mode.STATIC_RATIO,
    block_size: int = DESK_GRID[2],
    **tpe_options,
) -> SparsityConfig:
    mode = Mode.parse(mode)
    points, losses = _history_arrays(history, mode)
    x = tpe.suggest(points, losses, space.bounds(mode), rng_state, **tpe_options)
    return vector_config(x, mode, block_size)


def random_suggest(
    history: list[TrialRecord],
    space: SearchSpace,
    rng_state: np.random.Generator,
    mode: Mode | str = Mode.STATIC_RATIO,
    block_size: int = DESK_GRID[2],
) -> SparsityConfig:
    """Uniform baseline with the same signature as :func:`tpe_suggest`."""
    bounds = space.bounds(mode)
    lows = np.array([b[0] for b in bounds])
    highs = np.array([b[1] for b in bounds])
    return vector_config(lows + rng_state.random(len(bounds)) * (highs - lows), mode, block_size)


def _seed_words(seed: int) -> int:
    return int(seed) & ((1 << 64) - 1)


def search_rng(seed: int, regime: DriftRegime, mode: Mode) -> np.random.Generator:
    modes = list(Mode)
    return np.random.default_rng(np.random.SeedSequence([_seed_words(seed), 0x54504531, regime.index, modes.index(mode)]))


def batch_seed(seed: int, regime: DriftRegime, trial: int | None = None) -> int:
    words = [_seed_words(seed), 0x42415443, regime.index]
    if trial is not None:
        words.append(trial)
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0])


@dataclass
class ProfileResult:
    regime: DriftRegime
    mode: Mode
    best: TrialRecord
    history: list[TrialRecord]

    def best_so_far(self) -> list[float]:
        return list(np.minimum.accumulate([r.loss for r in self.history]))


def best_record(history: list[TrialRecord]) -> TrialRecord:
    """Lowest loss; ties go to the earlier trial."""
    return min(history, key=lambda r: (r.loss, r.trial_index))


def profile_regime(
    regime: DriftRegime | str,
    mode: Mode | str,
    space: SearchSpace | None = None,
    trials: int = DEFAULT_TRIALS,
    grid: GridSpec | None = None,
    seed: int = 0,
    *,
    feature_dim: int = DESK_FEATURE_DIM,
    spatial_scale: float | None = None,
    penalty_weight: float = PENALTY_WEIGHT,
    sparsity_target: float = SPARSITY_TARGET,
    resample: bool = False,
    suggest: Callable[..., SparsityConfig] = tpe_suggest,
    batch: ProxyBatch | None = None,
) -> ProfileResult:
    """Run the sequential search for one (regime, mode).

    One proxy batch is drawn per regime and shared by all trials and both
    modes unless ``resample`` is set, in which case every trial draws a fresh
    batch.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    regime = DriftRegime.parse(regime)
    mode = Mode.parse(mode)
    space = SearchSpace() if space is None else space
    grid = make_grid(*DESK_GRID) if grid is None else grid
    rng = search_rng(seed, regime, mode)

    def draw(trial: int | None) -> tuple[ProxyBatch, np.ndarray]:
        b = simulate(regime, grid, feature_dim, spatial_scale, batch_seed(seed, regime, trial))
        return b, attention_matrix(b.flat())

    if batch is not None and not resample:
        fixed = (batch, attention_matrix(batch.flat()))
    else:
        fixed = None if resample else draw(None)

    history: list[TrialRecord] = []
    for i in range(trials):
        config = suggest(history, space, rng, mode, grid.block_size)
        b, dense = draw(i) if resample else fixed
        history.append(
            objective(config, b, grid, penalty_weight, sparsity_target, seed=seed, dense=dense, trial_index=i)
        )
    return ProfileResult(regime, mode, best_record(history), history)


# --- lookup table ---------------------------------------------------------------


@dataclass(frozen=True)
class LUTEntry:
    mode: Mode
    config: SparsityConfig
    achieved_sparsity: float
    loss: float

    @classmethod
    def from_record(cls, record: TrialRecord) -> "LUTEntry":
        return cls(record.config.mode, record.config, record.achieved_sparsity, record.loss)

    def to_dict(self) -> dict:
        d = self.config.to_dict()
        d.update(mode=self.mode.value, achieved_sparsity=self.achieved_sparsity, loss=self.loss)
        return d

    @classmethod
    def from_dict(cls, data: dict, block_size: int) -> "LUTEntry":
        config = SparsityConfig.from_dict(data, block_size)
        return cls(config.mode, config, float(data["achieved_sparsity"]), float(data["loss"]))


@dataclass
class RegimeLUT:
    """Regime name -> best profiled entry, plus the static mid-regime fallback."""

    entries: dict[DriftRegime, LUTEntry]
    grid: GridSpec
    seed: int = 0
    trials: int = 0
    fallback: LUTEntry | None = None
    metadata: dict = field(default_factory=dict)

    def lookup(self, regime: DriftRegime | str) -> LUTEntry:
        regime = DriftRegime.parse(regime)
        try:
            return self.entries[regime]
        except KeyError:
            raise MissingRegimeError(f"lookup table has no entry for regime {regime.value!r}") from None

    def conservative_default(self) -> LUTEntry | None:
        """Static-ratio mid-regime profile, if the table carries one."""
        if self.fallback is not None:
            return self.fallback
        mid = self.entries.get(DriftRegime.MID)
        if mid is not None and mid.mode is Mode.STATIC_RATIO:
            return mid
        return None

    def to_dict(self, include_timestamp: bool = True) -> dict:
        d = {
            "version": LUT_VERSION,
            "grid": self.grid.to_dict(),
            "seed": self.seed,
            "trials": self.trials,
            "regimes": {r.value: e.to_dict() for r, e in self.entries.items()},
        }
        if self.fallback is not None:
            d["fallback"] = self.fallback.to_dict()
        meta = dict(self.metadata)
        if not include_timestamp:
            meta.pop("created", None)
        if meta:
            d["metadata"] = meta
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def canonical_hash(self) -> str:
        """SHA-256 of the key-sorted JSON without the creation timestamp."""
        blob = json.dumps(self.to_dict(include_timestamp=False), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "RegimeLUT":
        if data.get("version") != LUT_VERSION:
            raise LUTError(f"unsupported lookup table version {data.get('version')!r}")
        try:
            g = data["grid"]
            grid = make_grid(g["n_frames"], g["tokens_per_frame"], g["block_size"])
            entries = {}
            for name, entry in data["regimes"].items():
                entries[DriftRegime.parse(name)] = LUTEntry.from_dict(entry, grid.block_size)
            fallback = LUTEntry.from_dict(data["fallback"], grid.block_size) if "fallback" in data else None
        except (KeyError, TypeError, ValueError) as exc:
            raise LUTError(f"malformed lookup table: {exc}") from exc
        return cls(entries, grid, int(data.get("seed", 0)), int(data.get("trials", 0)), fallback, dict(data.get("metadata", {})))

    @classmethod
    def from_json(cls, text: str) -> "RegimeLUT":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise LUTError(f"lookup table is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "RegimeLUT":
        return cls.from_json(Path(path).read_text())


def build_lut(
    results: Iterable[tuple[DriftRegime | str, TrialRecord]] | Mapping,
    grid: GridSpec,
    *,
    seed: int = 0,
    trials: int = 0,
    fallback: TrialRecord | LUTEntry | None = None,
    metadata: dict | None = None,
) -> RegimeLUT:
    """Assemble a lookup table from one best record per regime."""
    items = list(results.items()) if isinstance(results, Mapping) else list(results)
    if not items:
        raise LUTError("cannot build a lookup table from no regime results")
    entries: dict[DriftRegime, LUTEntry] = {}
    for regime, record in items:
        regime = DriftRegime.parse(regime)
        if regime in entries:
            raise LUTError(f"duplicate result for regime {regime.value!r}")
        entry = record if isinstance(record, LUTEntry) else LUTEntry.from_record(record)
        if entry.config.block_size != grid.block_size:
            raise LUTError(f"{regime.value} entry has block size {entry.config.block_size}, grid has {grid.block_size}")
        entries[regime] = entry
    if isinstance(fallback, TrialRecord):
        fallback = LUTEntry.from_record(fallback)
    if fallback is not None and fallback.mode is not Mode.STATIC_RATIO:
        raise LUTError("the conservative default must be a static_ratio profile")
    meta = {"created": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    meta.update(metadata or {})
    return RegimeLUT(entries, grid, int(seed), int(trials), fallback, meta)


def lut_from_profiles(
    results: Iterable[ProfileResult], grid: GridSpec, seed: int, trials: int, metadata: dict | None = None
) -> RegimeLUT:
    """Best mode per regime by loss; the static mid result (if run) becomes the fallback."""
    by_regime: dict[DriftRegime, list[ProfileResult]] = {}
    for res in results:
        by_regime.setdefault(res.regime, []).append(res)
    best = {}
    fallback = None
    for regime, group in by_regime.items():
        modes = list(Mode)
        winner = min(group, key=lambda r: (r.best.loss, modes.index(r.mode)))
        best[regime] = winner.best
        if regime is DriftRegime.MID:
            for r in group:
                if r.mode is Mode.STATIC_RATIO:
                    fallback = r.best
    meta = dict(metadata or {})
    if trials < tpe.N_STARTUP:
        meta["low_confidence"] = True
    ordered = sorted(best.items(), key=lambda kv: kv[0].index)
    return build_lut(ordered, grid, seed=seed, trials=trials, fallback=fallback, metadata=meta)


HISTORY_COLUMNS = ("regime", "mode", "trial_index", "loss", "mse", "sparsity") + PARAM_NAMES


def history_csv(results: Iterable[ProfileResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for res in results:
        for r in res.history:
            writer.writerow(
                [res.regime.value, res.mode.value, r.trial_index, repr(r.loss), repr(r.mse), repr(r.achieved_sparsity)]
                + [repr(float(v)) for v in config_vector(r.config)]
            )
    return buf.getvalue()


# Published per-regime optima, usable as presets on any grid.
REFERENCE_CONFIGS: dict[tuple[str, str], dict] = {
    ("low", "static"): dict(gamma=2.0, lam=0.3, theta_m=0.75, theta_c=0.20, near=0.25, far=0.55, sparsity=0.866),
    ("low", "dynamic"): dict(gamma=1.3, lam=0.4, theta_m=0.70, theta_c=0.45, near=-1.2, far=2.4, sparsity=0.827),
    ("mid", "static"): dict(gamma=1.3, lam=0.7, theta_m=0.60, theta_c=0.15, near=0.75, far=0.55, sparsity=0.840),
    ("mid", "dynamic"): dict(gamma=1.4, lam=0.7, theta_m=0.70, theta_c=0.45, near=-1.5, far=2.0, sparsity=0.806),
    ("high", "static"): dict(gamma=1.6, lam=0.8, theta_m=0.65, theta_c=0.15, near=0.55, far=0.50, sparsity=0.817),
    ("high", "dynamic"): dict(gamma=1.6, lam=0.9, theta_m=0.55, theta_c=0.40, near=-2.0, far=2.4, sparsity=0.779),
}


def reference_config(regime: str, mode: str, block_size: int) -> SparsityConfig:
    m = Mode.parse(mode)
    p = REFERENCE_CONFIGS[(DriftRegime.parse(regime).value, m.short)]
    return SparsityConfig(m, RadialParams(p["gamma"], p["lam"]), p["theta_m"], p["theta_c"], p["near"], p["far"], block_size)
