"""Trajectory error metrics, residual statistics and the variant / gamma
experiment harnesses."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .geometry import Transform, ominus
from .odometry import VARIANTS, KeyframeGraph, OdometryConfig, RunResult, run, variant
from .optimizer import build_problem
from .residuals import KINDS, ResidualStatistics, evaluate, reference_statistics
from .sensors import write_pose_csv

log = logging.getLogger(__name__)

DEFAULT_GAMMAS = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class PoseError:
    timestamp: float
    rotation: float  # |omega|, rad
    translation: float  # |upsilon|, m


def pose_error(T_ref: Transform, T_est: Transform, timestamp: float = float("nan")) -> PoseError:
    xi = ominus(T_ref, T_est)
    return PoseError(float(timestamp), float(np.linalg.norm(xi[:3])), float(np.linalg.norm(xi[3:])))


def associate(ref_times, est_times, tolerance: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest reference sample for every estimate within ``tolerance``.

    The default tolerance is half the finer of the two median sample
    periods, so only (near-)coincident samples are paired. Returns
    ``(est_index, ref_index)`` of the matched pairs.
    """
    ref_times = np.asarray(ref_times, dtype=float)
    est_times = np.asarray(est_times, dtype=float)
    if len(ref_times) == 0 or len(est_times) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    if tolerance is None:
        periods = [float(np.median(np.diff(x))) for x in (ref_times, est_times) if len(x) > 1]
        tolerance = 0.5 * min(periods) if periods else np.inf
    j = np.clip(np.searchsorted(ref_times, est_times), 1, max(len(ref_times) - 1, 1))
    if len(ref_times) > 1:
        j = np.where(np.abs(ref_times[j - 1] - est_times) <= np.abs(ref_times[j] - est_times), j - 1, j)
    else:
        j = np.zeros(len(est_times), np.int64)
    ok = np.abs(ref_times[j] - est_times) <= tolerance + 1e-12
    return np.flatnonzero(ok), j[ok]


def trajectory_errors(ref_times, ref_poses: Sequence[Transform], est_times, est_poses: Sequence[Transform],
                      tolerance: Optional[float] = None) -> Tuple[List[PoseError], int]:
    """Per-sample errors of an estimated trajectory; returns (errors, skipped)."""
    ei, ri = associate(ref_times, est_times, tolerance)
    errors = [pose_error(ref_poses[r], est_poses[e], est_times[e]) for e, r in zip(ei, ri)]
    return errors, len(est_times) - len(errors)


@dataclass(frozen=True)
class ErrorSummary:
    count: int
    rot_median: float
    rot_p95: float
    rot_max: float
    rot_final: float
    trans_median: float
    trans_p95: float
    trans_max: float
    trans_final: float

    def row(self) -> Dict[str, float]:
        return dataclasses.asdict(self)


def summarize(errors: Sequence[PoseError]) -> ErrorSummary:
    if not errors:
        nan = float("nan")
        return ErrorSummary(0, nan, nan, nan, nan, nan, nan, nan, nan)
    rot = np.array([e.rotation for e in errors])
    tr = np.array([e.translation for e in errors])
    return ErrorSummary(len(errors),
                        float(np.median(rot)), float(np.percentile(rot, 95)), float(rot.max()), float(rot[-1]),
                        float(np.median(tr)), float(np.percentile(tr, 95)), float(tr.max()), float(tr[-1]))


def write_errors_csv(errors: Sequence[PoseError], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_s", "rot_err_rad", "trans_err_m"])
        for e in errors:
            w.writerow([repr(e.timestamp), repr(e.rotation), repr(e.translation)])


# residual statistics -------------------------------------------------------

def graph_residuals(graph: KeyframeGraph) -> Dict[str, List[np.ndarray]]:
    """Raw residuals of every block the optimizer would build over the whole
    keyframe graph, at the graph's current poses."""
    ids = [k.id for k in graph.keyframes]
    if not ids:
        return {k: [] for k in KINDS}
    problem = build_problem(graph, ids, reference_statistics())
    out: Dict[str, List[np.ndarray]] = {k: [] for k in KINDS}
    for b in problem.blocks:
        out[b.kind].append(evaluate(b, problem.poses))
    return out


def residual_stats(graphs: Iterable[KeyframeGraph]) -> ResidualStatistics:
    """Per-kind expectation and variance over the residuals of all graphs."""
    pooled: Dict[str, List[np.ndarray]] = {k: [] for k in KINDS}
    for g in graphs:
        for k, rows in graph_residuals(g).items():
            pooled[k].extend(rows)
    return ResidualStatistics.from_residuals(pooled)


def normalized_residuals(residuals: Mapping[str, Sequence[np.ndarray]],
                         stats: ResidualStatistics) -> Dict[str, np.ndarray]:
    """Component-wise ``(r - E) / sqrt(Var)`` per kind."""
    out = {}
    for kind, rows in residuals.items():
        if not rows or kind not in stats:
            continue
        s = stats[kind]
        vals = np.concatenate([np.ravel(r) for r in rows])
        out[kind] = (vals - s.mean) / np.sqrt(s.var)
    return out


# experiments ---------------------------------------------------------------

@dataclass
class VariantOutcome:
    name: str
    result: RunResult
    errors: List[PoseError]
    skipped: int
    summary: ErrorSummary = field(init=False)

    def __post_init__(self):
        self.summary = summarize(self.errors)


def evaluate_run(result: RunResult, ref_times, ref_poses, name: str = "run") -> VariantOutcome:
    errors, skipped = trajectory_errors(ref_times, ref_poses, result.frame_times, result.poses)
    return VariantOutcome(name, result, errors, skipped)


def run_simulation(sim, var, cfg: OdometryConfig = OdometryConfig(),
                   stats: Optional[ResidualStatistics] = None) -> RunResult:
    """Run odometry on a simulation, initialized from its first IR pose."""
    init = sim.ir_poses[int(np.argmin(np.abs(np.asarray(sim.ir_times) - sim.tracks.frame_times[0])))]
    return run(sim.imu, sim.tracks, sim.rig, sim.calibration, init, var, cfg, stats)


def ablation(sim, names: Sequence[str] = tuple(VARIANTS), cfg: OdometryConfig = OdometryConfig(),
             stats: Optional[ResidualStatistics] = None, optimize: Optional[bool] = None,
             out_dir=None) -> Dict[str, VariantOutcome]:
    """Run every variant on ``sim`` and compare against the IR reference.

    ``optimize=None`` keeps each variant's own optimization switch.
    """
    out = {}
    for name in names:
        var = VARIANTS[name] if optimize is None else variant(name, optimize)
        label = name if optimize is None else f"{name}{'+opt' if optimize else ''}"
        res = run_simulation(sim, var, cfg, stats)
        out[label] = evaluate_run(res, sim.ir_times, sim.ir_poses, label)
        log.info("%s: %s", label, out[label].summary)
    if out_dir is not None:
        write_experiment(out, out_dir)
    return out


@dataclass
class GammaOutcome:
    gamma: float
    outcome: VariantOutcome
    mean_delta_f: Dict[str, float]


def mean_delta_f(result: RunResult) -> Dict[str, float]:
    if not result.reports:
        return {k: float("nan") for k in KINDS}
    return {k: float(np.mean([r.delta_f[k] for r in result.reports])) for k in KINDS}


def gamma_sweep(sim, gammas: Sequence[float] = DEFAULT_GAMMAS, cfg: OdometryConfig = OdometryConfig(),
                stats: Optional[ResidualStatistics] = None, name: str = "V3",
                out_dir=None) -> List[GammaOutcome]:
    """Run the optimizing variant for every trade-off value ``gamma``."""
    out = []
    for g in gammas:
        if not 0.0 <= g <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {g}")
        res = run_simulation(sim, variant(name, True), dataclasses.replace(cfg, gamma=float(g)), stats)
        outcome = evaluate_run(res, sim.ir_times, sim.ir_poses, f"gamma={g:g}")
        out.append(GammaOutcome(float(g), outcome, mean_delta_f(res)))
        log.info("gamma %.2f: %s", g, out[-1].mean_delta_f)
    if out_dir is not None:
        write_sweep(out, out_dir)
    return out


def interior_gammas(sweep: Sequence[GammaOutcome]) -> List[float]:
    """Interior grid values where gyro and reprojection costs both decrease."""
    return [s.gamma for s in sweep
            if 0.0 < s.gamma < 1.0 and s.mean_delta_f["gyro"] < 0 and s.mean_delta_f["reproj"] < 0]


# CSV output ----------------------------------------------------------------

SUMMARY_COLUMNS = ["label"] + [f.name for f in dataclasses.fields(ErrorSummary)]


def write_summary_csv(rows: Mapping[str, ErrorSummary], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for label, s in rows.items():
            w.writerow([label] + [repr(v) if isinstance(v, float) else v for v in s.row().values()])


def write_experiment(outcomes: Mapping[str, VariantOutcome], out_dir) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    for label, o in outcomes.items():
        write_errors_csv(o.errors, d / f"errors_{_slug(label)}.csv")
        write_pose_csv(o.result.frame_times, o.result.poses, d / f"trajectory_{_slug(label)}.csv")
    write_summary_csv({k: o.summary for k, o in outcomes.items()}, d / "summary.csv")


def write_sweep(sweep: Sequence[GammaOutcome], out_dir) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    with (d / "gamma_delta_f.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma"] + [f"delta_f_{k}" for k in KINDS])
        for s in sweep:
            w.writerow([repr(s.gamma)] + [repr(s.mean_delta_f[k]) for k in KINDS])
    with (d / "gamma_errors.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "timestamp_s", "rot_err_rad", "trans_err_m"])
        for s in sweep:
            for e in s.outcome.errors:
                w.writerow([repr(s.gamma), repr(e.timestamp), repr(e.rotation), repr(e.translation)])
    write_summary_csv({s.outcome.name: s.outcome.summary for s in sweep}, d / "summary.csv")


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in label)
