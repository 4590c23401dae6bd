"""Command-line entry point: mask, profile, eval, route, bench."""

from __future__ import annotations

import argparse
import json
import platform
import statistics
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .grid import GridSpec, make_grid
from .mask import PhaseTimer, build_mask, resolve_threads, sparsity
from .maskio import MaskFormat, write_mask
from .profiler import (
    DESK_FEATURE_DIM,
    DESK_GRID,
    PENALTY_WEIGHT,
    SPARSITY_TARGET,
    LUTError,
    RegimeLUT,
    SearchSpace,
    batch_seed,
    history_csv,
    lut_from_profiles,
    objective,
    profile_regime,
)
from .proxy import DriftRegime, read_batch, simulate
from .radial import RadialParams
from .router import RegimeBins, RoutingError, heuristic_score, parse_score, route
from .selection import Mode, SparsityConfig

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # keep argparse's exit code 2 but route through our handler
        raise UsageError(message)


# --- manifests ------------------------------------------------------------------


class RunManifest:
    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.params = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.timings: dict[str, float] = {}
        self.seed = getattr(args, "seed", None)
        self.started = time.perf_counter()

    def phase(self, name: str, seconds: float) -> None:
        self.timings[name] = self.timings.get(name, 0.0) + seconds

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "version": __version__,
            "parameters": self.params,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings": dict(self.timings, total=time.perf_counter() - self.started),
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "python": platform.python_version(),
            "numpy": np.__version__,
        }

    def write(self, path: str | Path | None) -> Path | None:
        if path is None:
            return None
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str) + "\n")
        return path


def _manifest_path(explicit: str | None, anchor: str | Path | None) -> Path | None:
    if explicit:
        return Path(explicit)
    if anchor is None:
        return None
    anchor = Path(anchor)
    return anchor.with_name(anchor.name + ".manifest.json")


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --- shared flag groups ---------------------------------------------------------


def _add_grid(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("grid")
    g.add_argument("--frames", type=int, default=DESK_GRID[0], help="latent frames N_f")
    g.add_argument("--tokens", type=int, default=DESK_GRID[1], help="tokens per frame N_t")
    g.add_argument("--block", type=int, default=DESK_GRID[2], help="block size B_s (power of two)")


def _add_config(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (explicit knobs or --lut/--regime)")
    g.add_argument("--mode", choices=["static", "dynamic", "static_ratio", "dynamic_threshold"])
    for flag in ("--gamma", "--lambda", "--theta-m", "--theta-c", "--rho1", "--rho2", "--tau1", "--tau2"):
        g.add_argument(flag, type=float)
    g.add_argument("--lut", help="lookup table JSON to take the configuration from")
    g.add_argument("--regime", choices=[r.value for r in DriftRegime], help="regime entry to read from --lut")


def _add_features(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("features")
    g.add_argument("--features", help="proxy batch file written by write_batch (or a .npy [S, D] array)")
    g.add_argument("--proxy-regime", choices=[r.value for r in DriftRegime], help="simulate proxy features")
    g.add_argument("--feature-dim", type=int, default=DESK_FEATURE_DIM)


def _grid(args) -> GridSpec:
    try:
        return make_grid(args.frames, args.tokens, args.block)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


_KNOBS = ("gamma", "lambda", "theta_m", "theta_c", "rho1", "rho2", "tau1", "tau2")


def _config(args, grid: GridSpec, manifest: RunManifest | None = None, split_rule: bool = True) -> SparsityConfig:
    given = [k for k in _KNOBS if getattr(args, k) is not None]
    if args.lut:
        if given or args.mode:
            raise UsageError("--lut cannot be combined with explicit --mode or knob flags")
        if not args.regime:
            raise UsageError("--lut requires --regime")
        lut = RegimeLUT.load(args.lut)
        if manifest is not None:
            manifest.inputs.append(str(args.lut))
        config = lut.lookup(args.regime).config.with_block_size(grid.block_size)
    else:
        if args.regime:
            raise UsageError("--regime only applies together with --lut")
        if not args.mode:
            raise UsageError("--mode is required unless --lut is given")
        mode = Mode.parse(args.mode)
        near, far = ("rho1", "rho2") if mode is Mode.STATIC_RATIO else ("tau1", "tau2")
        other = {"rho1", "rho2", "tau1", "tau2"} - {near, far}
        wrong = [k for k in given if k in other]
        if wrong:
            raise UsageError(f"--{wrong[0]} does not apply to {mode.value} mode")
        required = ("gamma", "lambda", "theta_m", "theta_c", near, far)
        missing = [k for k in required if getattr(args, k) is None]
        if missing:
            raise UsageError("missing " + ", ".join("--" + k.replace("_", "-") for k in missing))
        try:
            config = SparsityConfig(
                mode,
                RadialParams(args.gamma, args.__dict__["lambda"]),
                args.theta_m,
                args.theta_c,
                getattr(args, near),
                getattr(args, far),
                grid.block_size,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if not split_rule:
        config = replace(config, radial=replace(config.radial, split_rule=False))
    return config


def _features(args, grid: GridSpec, manifest: RunManifest | None, required: bool) -> np.ndarray | None:
    if args.features and args.proxy_regime:
        raise UsageError("--features and --proxy-regime are mutually exclusive")
    if args.features:
        path = Path(args.features)
        if manifest is not None:
            manifest.inputs.append(str(path))
        if path.suffix == ".npy":
            arr = np.load(path)
        else:
            batch = read_batch(path)
            if batch.grid != grid:
                raise ValueError(f"feature batch grid {batch.grid} does not match {grid}")
            arr = batch.flat()
        if arr.shape[0] < grid.total_tokens:
            raise ValueError(f"features have {arr.shape[0]} tokens, grid needs {grid.total_tokens}")
        return arr
    if args.proxy_regime:
        regime = DriftRegime.parse(args.proxy_regime)
        return simulate(regime, grid, args.feature_dim, seed=batch_seed(args.seed, regime)).flat()
    if required:
        raise UsageError("dynamic mode needs --features or --proxy-regime")
    return None


# --- commands -------------------------------------------------------------------


def cmd_mask(args) -> int:
    manifest = RunManifest("mask", args)
    grid = _grid(args)
    config = _config(args, grid, manifest)
    features = _features(args, grid, manifest, config.mode is Mode.DYNAMIC_THRESHOLD)
    timer = PhaseTimer()
    mask = build_mask(grid, config, features, seed=args.seed, threads=args.threads, timer=timer)
    for k, v in timer.totals.items():
        manifest.phase(k, v)
    formats = [MaskFormat.parse(f) for f in args.format] if args.format else None
    outs = args.out or []
    if formats and len(formats) != len(outs):
        raise UsageError("--format must be given once per --out")
    for idx, path in enumerate(outs):
        fmt = formats[idx] if formats else MaskFormat.from_suffix(path)
        write_mask(mask, fmt, path)
        manifest.outputs.append(str(path))
    report = {
        "sparsity": sparsity(mask),
        "active_blocks": mask.active_count(),
        "blocks_per_dim": mask.blocks_per_dim,
        "grid": grid.to_dict(),
        "config": config.to_dict(),
        "outputs": manifest.outputs,
    }
    written = manifest.write(_manifest_path(args.manifest, outs[0] if outs else None))
    if written:
        report["manifest"] = str(written)
    _emit(report)
    return EXIT_OK


def _parse_bounds(items: list[str] | None) -> dict[str, tuple[float, float]]:
    out = {}
    for item in items or []:
        name, sep, rng = item.partition("=")
        lo, sep2, hi = rng.partition(":")
        if not sep or not sep2:
            raise UsageError(f"bad --bound {item!r}; expected name=lo:hi")
        try:
            out[name.strip()] = (float(lo), float(hi))
        except ValueError:
            raise UsageError(f"bad --bound {item!r}; bounds must be numbers") from None
    return out


def _csv_list(text: str, parse) -> list:
    try:
        return [parse(x.strip()) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_profile(args) -> int:
    manifest = RunManifest("profile", args)
    grid = _grid(args)
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    try:
        space = SearchSpace().with_overrides(_parse_bounds(args.bound))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    regimes = _csv_list(args.regimes, DriftRegime.parse)
    modes = _csv_list(args.modes, Mode.parse)
    results = []
    for regime in regimes:
        for mode in modes:
            t0 = time.perf_counter()
            res = profile_regime(
                regime,
                mode,
                space,
                args.trials,
                grid,
                args.seed,
                feature_dim=args.feature_dim,
                penalty_weight=args.alpha,
                sparsity_target=args.target,
                resample=args.resample,
            )
            manifest.phase(f"{regime.value}/{mode.short}", time.perf_counter() - t0)
            results.append(res)
    meta = {"penalty_weight": args.alpha, "sparsity_target": args.target, "feature_dim": args.feature_dim}
    if args.resample:
        meta["resample"] = True
    lut = lut_from_profiles(results, grid, args.seed, args.trials, meta)
    out = Path(args.out)
    lut.save(out)
    history = Path(args.history) if args.history else out.with_suffix(".history.csv")
    history.write_text(history_csv(results))
    manifest.outputs += [str(out), str(history)]
    written = manifest.write(_manifest_path(args.manifest, out))
    _emit(
        {
            "lut": str(out),
            "history": str(history),
            "manifest": str(written),
            "canonical_hash": lut.canonical_hash(),
            "regimes": {r.value: e.to_dict() for r, e in lut.entries.items()},
        }
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = RunManifest("eval", args)
    grid = _grid(args)
    config = _config(args, grid, manifest)
    regime = DriftRegime.parse(args.proxy_regime or args.regime or "mid")
    if args.features:
        path = Path(args.features)
        manifest.inputs.append(str(path))
        batch = read_batch(path)
    else:
        # a fresh batch, distinct from the one profiling searched on
        batch = simulate(regime, grid, args.feature_dim, seed=batch_seed(args.seed, regime, trial=2**32 - 1))
    rec = objective(config, batch, grid, args.alpha, args.target, seed=args.seed)
    report = {
        "regime": regime.value,
        "mode": config.mode.value,
        "mse": rec.mse,
        "sparsity": rec.achieved_sparsity,
        "loss": rec.loss,
        "penalty": rec.penalty,
        "config": config.to_dict(),
    }
    manifest.write(_manifest_path(args.manifest, None))
    _emit(report)
    return EXIT_OK


def cmd_route(args) -> int:
    manifest = RunManifest("route", args)
    given = [x for x in (args.score is not None, args.prompt is not None, args.stdin) if x]
    if len(given) > 1:
        raise UsageError("--score, --prompt and --stdin are mutually exclusive")
    try:
        bins = RegimeBins(args.low_upper, args.mid_upper)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    lut = RegimeLUT.load(args.lut)
    manifest.inputs.append(str(args.lut))

    if args.stdin:
        for line in sys.stdin:
            line = line.strip()
            if not line:
                continue
            decision = route(parse_score(line), lut, bins)
            sys.stdout.write(json.dumps(decision.to_dict(), sort_keys=True) + "\n")
        manifest.write(_manifest_path(args.manifest, None))
        return EXIT_OK

    if args.prompt is not None:
        score = heuristic_score(args.prompt)
    else:
        score = parse_score(args.score)
    decision = route(score, lut, bins)
    manifest.write(_manifest_path(args.manifest, None))
    _emit(decision.to_dict())
    return EXIT_OK


def cmd_bench(args) -> int:
    manifest = RunManifest("bench", args)
    grid = _grid(args)
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    config = _config(args, grid, manifest, split_rule=not args.no_split)
    features = _features(args, grid, manifest, config.mode is Mode.DYNAMIC_THRESHOLD)
    phases = ("candidates", "selection", "aggregation")
    runs = {p: [] for p in phases + ("total",)}
    frame_pairs = 0
    mask = None
    for _ in range(args.repeats):
        timer = PhaseTimer()
        t0 = time.perf_counter()
        mask = build_mask(grid, config, features, seed=args.seed, threads=args.threads, timer=timer)
        runs["total"].append(time.perf_counter() - t0)
        for p in phases:
            runs[p].append(timer.totals.get(p, 0.0))
        frame_pairs = timer.frame_pairs
    medians = {p: statistics.median(v) for p, v in runs.items()}
    report = {
        "grid": grid.to_dict(),
        "total_tokens": grid.total_tokens,
        "mode": config.mode.value,
        "split_rule": config.radial.split_rule,
        "repeats": args.repeats,
        "threads": resolve_threads(args.threads),
        "frame_pairs": frame_pairs,
        "sparsity": sparsity(mask),
        "median_seconds": medians,
        "median_seconds_per_frame_pair": {p: v / max(frame_pairs, 1) for p, v in medians.items()},
        "runs": runs,
    }
    for p, v in medians.items():
        manifest.phase(p, v)
    written = manifest.write(_manifest_path(args.manifest, None))
    if written:
        report["manifest"] = str(written)
    if args.json:
        _emit(report)
    else:
        print(f"grid {grid.n_frames}x{grid.tokens_per_frame} (S={grid.total_tokens}) block {grid.block_size}, "
              f"{config.mode.value}, split rule {'on' if config.radial.split_rule else 'off'}")
        print(f"sparsity {report['sparsity']:.4f} over {frame_pairs} frame pairs, {args.repeats} repeats (median)")
        for p in phases + ("total",):
            per = report["median_seconds_per_frame_pair"][p]
            print(f"  {p:<12} {medians[p] * 1e3:10.2f} ms   {per * 1e6:10.2f} us/pair")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="radialplan", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("mask", help="build a block mask and write it to disk")
    _add_grid(p)
    _add_config(p)
    _add_features(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", action="append", help="output path; format from suffix (.pgm, .csv, else binary)")
    p.add_argument("--format", action="append", choices=[f.value for f in MaskFormat], help="explicit format per --out")
    p.add_argument("--threads", type=int)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("profile", help="search per-regime configurations and write a lookup table")
    _add_grid(p)
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--regimes", default="low,mid,high")
    p.add_argument("--modes", default="static,dynamic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=PENALTY_WEIGHT, help="sparsity penalty weight")
    p.add_argument("--target", type=float, default=SPARSITY_TARGET, help="sparsity target")
    p.add_argument("--bound", action="append", metavar="NAME=LO:HI", help="override a search interval")
    p.add_argument("--resample", action="store_true", help="draw a fresh proxy batch per trial")
    p.add_argument("--feature-dim", type=int, default=DESK_FEATURE_DIM)
    p.add_argument("--out", required=True, help="lookup table JSON path")
    p.add_argument("--history", help="per-trial CSV path (default: <out>.history.csv)")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("eval", help="evaluate one configuration on a proxy batch")
    _add_grid(p)
    _add_config(p)
    _add_features(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=PENALTY_WEIGHT)
    p.add_argument("--target", type=float, default=SPARSITY_TARGET)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("route", help="map a motion score or prompt to a lookup table entry")
    p.add_argument("--lut", required=True)
    p.add_argument("--score", help="motion score in [0, 1]; unparseable values take the conservative default")
    p.add_argument("--prompt", help="score the prompt with the keyword heuristic")
    p.add_argument("--stdin", action="store_true", help="route one score per stdin line (JSON lines out)")
    p.add_argument("--low-upper", type=float, default=0.3)
    p.add_argument("--mid-upper", type=float, default=0.7)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("bench", help="time mask construction phases")
    _add_grid(p)
    _add_config(p)
    _add_features(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--no-split", action="store_true", help="force split factor 1")
    p.add_argument("--threads", type=int)
    p.add_argument("--json", action="store_true")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"radialplan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, LUTError, RoutingError, ValueError) as exc:
        print(f"radialplan: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
