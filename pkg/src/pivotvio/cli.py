"""Command-line entry point: ``pivotvio <subcommand> ...``.

Every subcommand that writes files also writes ``manifest.txt`` next to its
outputs; it records the full configuration and the input manifest so the run
can be repeated bit-exactly.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .camera import parse_calibration
from .evaluation import (DEFAULT_GAMMAS, ablation, evaluate_run, gamma_sweep, graph_residuals,
                         interior_gammas, residual_stats, summarize, trajectory_errors, write_errors_csv,
                         write_experiment, write_summary_csv, write_sweep)
from .odometry import VARIANTS, OdometryConfig, RunResult, run, variant
from .residuals import KINDS, ResidualStatistics, reference_statistics
from .sensors import (calibrate_imu, estimate_time_offset, gyro_twists, read_imu_calibration, read_imu_csv,
                      read_pose_csv, twist_from_trajectory, write_imu_calibration, write_pose_csv)
from .simulator import FILES, MANIFEST, PRESETS, emit, generate, preset, read_manifest, write_manifest
from .tracks import read_track_csv

log = logging.getLogger("pivotvio")

EXIT_USAGE = 2


class UsageError(Exception):
    """Bad configuration or missing input; reported with exit status 2."""


# configuration ---------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Variant switches plus every odometry / optimizer default."""

    variant: str = "V3"
    optimize: bool = False
    imu_time_offset: float = 0.0  # seconds subtracted from IMU timestamps
    odometry: OdometryConfig = field(default_factory=OdometryConfig)

    def __post_init__(self):
        if self.variant.upper() not in VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        self.variant = self.variant.upper()
        o = self.odometry
        if not 0.0 <= o.gamma <= 1.0:
            raise UsageError(f"gamma must lie in [0, 1], got {o.gamma}")
        if o.trigger < 1 or o.window < 1:
            raise UsageError("trigger and window must be >= 1")

    def items(self) -> Dict[str, str]:
        out = {"variant": self.variant, "optimize": str(self.optimize),
               "imu_time_offset": repr(self.imu_time_offset)}
        for f in dataclasses.fields(OdometryConfig):
            out[f.name] = repr(getattr(self.odometry, f.name))
        return out


_ODO_FIELDS = {f.name: f for f in dataclasses.fields(OdometryConfig)}


def _coerce(key: str, value: str, template):
    try:
        if isinstance(template, bool):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(template, int):
            return int(value)
        if isinstance(template, float):
            return float(value)
        return value.strip().strip("'\"")
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {value!r}") from None


def build_config(settings: Dict[str, str]) -> ExperimentConfig:
    """Experiment configuration from ``key=value`` settings (unknown keys fail)."""
    base = ExperimentConfig()
    top, odo = {}, {}
    for key, value in settings.items():
        if key in ("variant", "optimize", "imu_time_offset"):
            top[key] = _coerce(key, value, getattr(base, key))
        elif key in _ODO_FIELDS:
            odo[key] = _coerce(key, value, getattr(base.odometry, key))
        else:
            raise UsageError(f"unknown config key {key!r}")
    return ExperimentConfig(odometry=dataclasses.replace(base.odometry, **odo), **top)


def read_config_file(path) -> Dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        return read_manifest(p)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _settings(args) -> Dict[str, str]:
    """Config file, then ``--set`` pairs, then dedicated flags (last wins)."""
    out: Dict[str, str] = {}
    if getattr(args, "config", None):
        out.update(read_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for key in ("variant", "gamma", "trigger", "window", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = str(v)
    if getattr(args, "optimize", None) is not None:
        out["optimize"] = str(args.optimize)
    return out


# input loading ---------------------------------------------------------------

@dataclass
class Recording:
    directory: Path
    imu: object
    tracks: object
    rig: object
    calibration: object
    ir_times: Optional[np.ndarray]
    ir_poses: Optional[list]
    manifest: Dict[str, str]


def _require(path: Path) -> Path:
    if not path.exists():
        raise UsageError(f"missing input file: {path}")
    return path


def load_recording(directory, imu_calibration=None) -> Recording:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"input directory not found: {d}")
    imu = read_imu_csv(_require(d / FILES["imu"]))
    tracks = read_track_csv(_require(d / FILES["tracks"]), d / FILES["frames"])
    rig = parse_calibration(_require(d / FILES["calibration"]))
    cal_path = Path(imu_calibration) if imu_calibration else d / FILES["imu_calibration"]
    cal = read_imu_calibration(_require(cal_path))
    ir_times = ir_poses = None
    if (d / FILES["ir"]).exists():
        ir_times, ir_poses = read_pose_csv(d / FILES["ir"])
    manifest = read_manifest(d / MANIFEST) if (d / MANIFEST).exists() else {}
    return Recording(d, imu, tracks, rig, cal, ir_times, ir_poses, manifest)


def initial_pose(rec: Recording):
    """IR pose nearest to the first video frame."""
    if not rec.ir_poses:
        raise UsageError(f"{rec.directory}: {FILES['ir']} is needed for the initial pose")
    t0 = float(rec.tracks.frame_times[0])
    return rec.ir_poses[int(np.argmin(np.abs(rec.ir_times - t0)))]


def load_stats(path) -> ResidualStatistics:
    if path is None:
        return reference_statistics()
    p = Path(path)
    if not p.exists():
        raise UsageError(f"statistics file not found: {p}")
    stats = ResidualStatistics.from_csv(p)
    missing = [k for k in KINDS if k not in stats]
    if missing:
        raise UsageError(f"{p}: missing statistics for {', '.join(missing)}")
    return stats


def run_recording(rec: Recording, cfg: ExperimentConfig, stats: ResidualStatistics) -> RunResult:
    imu = rec.imu.shifted(-cfg.imu_time_offset) if cfg.imu_time_offset else rec.imu
    return run(imu, rec.tracks, rec.rig, rec.calibration, initial_pose(rec),
               variant(cfg.variant, cfg.optimize), cfg.odometry, stats)


class _RecordingSim:
    """Adapter giving a loaded recording the attributes the harnesses use."""

    def __init__(self, rec: Recording, cfg: ExperimentConfig):
        self.imu = rec.imu.shifted(-cfg.imu_time_offset) if cfg.imu_time_offset else rec.imu
        self.tracks, self.rig, self.calibration = rec.tracks, rec.rig, rec.calibration
        if not rec.ir_poses:
            raise UsageError(f"{rec.directory}: {FILES['ir']} is needed as reference")
        self.ir_times, self.ir_poses = rec.ir_times, rec.ir_poses


# outputs ----------------------------------------------------------------------

def _out_dir(path) -> Path:
    d = Path(path)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {d}: {exc}") from None
    return d


def write_run_manifest(out: Path, command: str, items: Dict[str, str], inputs: Dict[str, str]) -> None:
    m = {"kind": command, "version": __version__}
    m.update(items)
    m.update({f"input.{k}": v for k, v in inputs.items()})
    write_manifest(m, out / MANIFEST)


def write_run_outputs(res: RunResult, out: Path) -> None:
    write_pose_csv(res.frame_times, res.poses, out / "trajectory.csv")
    kfs = res.graph.keyframes
    write_pose_csv([k.timestamp for k in kfs], [k.pose for k in kfs], out / "keyframes.csv")
    with (out / "status.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_s", "status"])
        for t, s in zip(res.frame_times, res.status):
            w.writerow([repr(float(t)), s])
    with (out / "solver.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["solve", "iteration", "total_cost"] + [f"f_{k}" for k in KINDS])
        for n, rep in enumerate(res.reports):
            for i, (c, kc) in enumerate(zip(rep.costs, rep.kind_costs)):
                w.writerow([n, i, repr(c)] + [repr(kc[k]) for k in KINDS])
    with (out / "delta_f.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["solve", "iterations", "reason"] + [f"delta_f_{k}" for k in KINDS])
        for n, rep in enumerate(res.reports):
            w.writerow([n, rep.iterations, rep.reason] + [repr(rep.delta_f[k]) for k in KINDS])
    if res.pivot_history:
        with (out / "pivot.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp_s", "px", "py", "pz"])
            for t, p in res.pivot_history:
                w.writerow([repr(float(t))] + [repr(float(v)) for v in p])


def _print_summary(label: str, s) -> None:
    print(f"{label}: n={s.count} rot median {s.rot_median:.6g} rad p95 {s.rot_p95:.6g} rad | "
          f"trans median {s.trans_median:.6g} m p95 {s.trans_p95:.6g} m")


# subcommands -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.duration is not None:
        overrides["duration"] = args.duration
    try:
        sc = preset(args.preset, **overrides)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if args.noiseless:
        sc = sc.noiseless()
    out = _out_dir(args.out)
    sim = generate(sc)
    paths = emit(sim, out)
    print(f"scenario {sc.name} seed {sc.seed}: {len(sim.imu)} IMU samples, "
          f"{len(sim.tracks)} frames, {len(sim.tracks.ids)} track rows -> {out}")
    for k, p in paths.items():
        log.info("%s: %s", k, p)
    return 0


def cmd_run(args) -> int:
    cfg = build_config(_settings(args))
    rec = load_recording(args.input, args.imu_calibration)
    stats = load_stats(args.stats)
    out = _out_dir(args.out)
    res = run_recording(rec, cfg, stats)
    write_run_outputs(res, out)
    inputs = dict(rec.manifest)
    inputs["dir"] = str(rec.directory)
    inputs["stats"] = str(args.stats) if args.stats else "reference"
    write_run_manifest(out, "run", cfg.items(), inputs)
    print(f"{cfg.variant}{' +opt' if cfg.optimize else ''}: {len(res.poses)} frames, "
          f"{len(res.graph.keyframes)} keyframes, {len(res.reports)} solves, status {res.status_counts()}")
    if res.pivot is not None:
        print("pivot estimate: " + " ".join(f"{v:.6g}" for v in res.pivot.point))
    if rec.ir_poses:
        o = evaluate_run(res, rec.ir_times, rec.ir_poses, cfg.variant)
        write_errors_csv(o.errors, out / "errors.csv")
        _print_summary("error vs IR", o.summary)
    return 0


def cmd_calibrate_imu(args) -> int:
    d = Path(args.input)
    path = d / FILES["imu"] if d.is_dir() else d
    imu = read_imu_csv(_require(path))
    cal, info = calibrate_imu(imu, args.static_threshold)
    out = Path(args.out)
    _out_dir(out.parent)
    write_imu_calibration(cal, out)
    print(f"accel bias {np.round(cal.accel_bias, 6).tolist()} scale {cal.accel_scale:.6f} "
          f"({info['n_accel']} static samples)")
    print(f"mag bias {np.round(cal.mag_bias, 6).tolist()} scale {cal.mag_scale:.6f} ({info['n_mag']} samples)")
    return 0


def cmd_calibrate_time(args) -> int:
    rec_dir = Path(args.input)
    imu = read_imu_csv(_require(rec_dir / FILES["imu"]))
    ir_times, ir_poses = read_pose_csv(_require(rec_dir / FILES["ir"]))
    tj, vj = gyro_twists(imu)
    tk, vk = twist_from_trajectory(ir_times, ir_poses)
    res = estimate_time_offset(tj, vj, tk, vk[:, :3], (-args.max_offset, args.max_offset, args.step))
    if args.out:
        out = Path(args.out)
        _out_dir(out.parent)
        with out.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["offset_s", "cost"])
            for g, c in zip(res.grid, res.cost):
                w.writerow([repr(float(g)), repr(float(c))])
    print(f"imu_time_offset={res.offset:.6f}" + ("" if res.reliable else "  (unreliable: flat cost)"))
    return 0


def cmd_stats(args) -> int:
    cfg = build_config(_settings(args))
    rec = load_recording(args.input, args.imu_calibration)
    res = run_recording(rec, cfg, load_stats(None))
    stats = ResidualStatistics.from_residuals(graph_residuals(res.graph))
    out = Path(args.out)
    _out_dir(out.parent)
    stats.to_csv(out)
    ref = reference_statistics()
    print(f"{'kind':8s} {'E':>12s} {'Var':>12s} {'N':>6s}  unit   (reference E / Var)")
    for k in KINDS:
        if k in stats:
            s = stats[k]
            print(f"{k:8s} {s.mean:12.5g} {s.var:12.5g} {s.count:6d}  {s.unit:6s} "
                  f"({ref[k].mean:.4g} / {ref[k].var:.4g})")
    return 0


def cmd_ablate(args) -> int:
    cfg = build_config(_settings(args))
    rec = load_recording(args.input, args.imu_calibration)
    sim = _RecordingSim(rec, cfg)
    names = [n.upper() for n in args.variants.split(",")]
    for n in names:
        if n not in VARIANTS:
            raise UsageError(f"unknown variant {n!r}")
    out = _out_dir(args.out)
    outcomes = ablation(sim, names, cfg.odometry, load_stats(args.stats), cfg.optimize)
    write_experiment(outcomes, out)
    items = cfg.items()
    items["variants"] = ",".join(names)
    write_run_manifest(out, "ablate", items, dict(rec.manifest, dir=str(rec.directory),
                                                  stats=str(args.stats or "reference")))
    for label, o in outcomes.items():
        _print_summary(label, o.summary)
    return 0


def cmd_sweep_gamma(args) -> int:
    cfg = build_config(_settings(args))
    rec = load_recording(args.input, args.imu_calibration)
    sim = _RecordingSim(rec, cfg)
    try:
        gammas = [float(g) for g in args.gammas.split(",")] if args.gammas else list(DEFAULT_GAMMAS)
    except ValueError:
        raise UsageError(f"--gammas expects comma-separated numbers, got {args.gammas!r}") from None
    if any(not 0.0 <= g <= 1.0 for g in gammas):
        raise UsageError("gamma values must lie in [0, 1]")
    out = _out_dir(args.out)
    sweep = gamma_sweep(sim, gammas, cfg.odometry, load_stats(args.stats), cfg.variant)
    write_sweep(sweep, out)
    items = cfg.items()
    items["gammas"] = ",".join(repr(g) for g in gammas)
    write_run_manifest(out, "sweep-gamma", items, dict(rec.manifest, dir=str(rec.directory),
                                                       stats=str(args.stats or "reference")))
    print(f"{'gamma':>6s} " + " ".join(f"{'df_' + k:>11s}" for k in KINDS) + "  rot_med    trans_med")
    for s in sweep:
        print(f"{s.gamma:6.2f} " + " ".join(f"{s.mean_delta_f[k]:11.4g}" for k in KINDS)
              + f"  {s.outcome.summary.rot_median:.4g}  {s.outcome.summary.trans_median:.4g}")
    both = interior_gammas(sweep)
    print("gamma with gyro and reprojection cost both decreasing: "
          + (", ".join(f"{g:g}" for g in both) if both else "none"))
    return 0


def cmd_evaluate(args) -> int:
    ref_t, ref_p = read_pose_csv(_require(Path(args.ref)))
    est_t, est_p = read_pose_csv(_require(Path(args.est)))
    errors, skipped = trajectory_errors(ref_t, ref_p, est_t, est_p, args.tolerance)
    s = summarize(errors)
    if args.out:
        out = Path(args.out)
        _out_dir(out.parent)
        write_errors_csv(errors, out)
    _print_summary("error", s)
    if skipped:
        print(f"skipped {skipped} estimates without a reference sample within tolerance")
    return 0


# parser -----------------------------------------------------------------------

def _config_flags(p: argparse.ArgumentParser, variant_flag: bool = True) -> None:
    p.add_argument("--config", help="plain-text key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    if variant_flag:
        p.add_argument("--variant", choices=sorted(VARIANTS) + [v.lower() for v in VARIANTS])
    g = p.add_mutually_exclusive_group()
    g.add_argument("--optimize", dest="optimize", action="store_const", const=True, default=None,
                   help="enable the windowed optimization")
    g.add_argument("--no-optimize", dest="optimize", action="store_const", const=False)
    p.add_argument("--gamma", type=float, help="gyro / reprojection trade-off in [0, 1]")
    p.add_argument("--trigger", type=int, help="optimize every K keyframes")
    p.add_argument("--window", type=int, help="optimization window W in keyframes")
    p.add_argument("--seed", type=int, help="RANSAC seed")
    p.add_argument("--imu-calibration", help="IMU calibration CSV (default: the recording's)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pivotvio", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic recording")
    p.add_argument("--preset", required=True, choices=sorted(PRESETS))
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--noiseless", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the localization on a recording")
    p.add_argument("--in", dest="input", required=True, help="recording directory")
    p.add_argument("--stats", help="residual statistics CSV for the weights (default: reference table)")
    p.add_argument("--out", required=True)
    _config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("calibrate-imu", help="sphere-fit accelerometer and magnetometer calibration")
    p.add_argument("--in", dest="input", required=True, help="recording directory or IMU CSV")
    p.add_argument("--static-threshold", type=float, default=0.05, help="gyro norm (rad/s) of static samples")
    p.add_argument("--out", required=True, help="output calibration CSV")
    p.set_defaults(func=cmd_calibrate_imu)

    p = sub.add_parser("calibrate-time", help="IMU-to-IR time offset from angular rates")
    p.add_argument("--in", dest="input", required=True, help="recording directory")
    p.add_argument("--max-offset", type=float, default=0.5)
    p.add_argument("--step", type=float, default=0.001)
    p.add_argument("--out", help="optional cost-curve CSV")
    p.set_defaults(func=cmd_calibrate_time)

    p = sub.add_parser("stats", help="residual statistics of a run")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="output statistics CSV")
    _config_flags(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("ablate", help="compare variants against the IR reference")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--stats")
    p.add_argument("--out", required=True)
    _config_flags(p, variant_flag=False)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-gamma", help="optimize with a grid of gamma values")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--gammas", help="comma-separated grid (default 0,0.1,...,1)")
    p.add_argument("--stats")
    p.add_argument("--out", required=True)
    _config_flags(p)
    p.set_defaults(func=cmd_sweep_gamma)

    p = sub.add_parser("evaluate", help="pose errors of an estimate against a reference")
    p.add_argument("--ref", required=True, help="reference pose CSV")
    p.add_argument("--est", required=True, help="estimated pose CSV")
    p.add_argument("--tolerance", type=float, help="association tolerance in seconds")
    p.add_argument("--out", help="optional per-sample error CSV")
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pivotvio {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"pivotvio {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
