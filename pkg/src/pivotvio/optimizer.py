"""Windowed robust least squares over keyframe poses.

Only poses are variables; landmarks ride rigidly on their anchor keyframes.
The normal equations are assembled from 6x6 pose blocks into a sparse
matrix and solved with Levenberg-Marquardt using right-multiplied updates
``T <- T Exp(xi)``. Robust losses are handled by iteratively reweighting.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Transform
from .odometry import KeyframeGraph
from .residuals import (DIMS, KINDS, ROBUST_KINDS, ReprojMeasurement, ResidualBlock, ResidualStatistics,
                        VectorMeasurement, default_betas, evaluate, reproj_batch, residual_jacobians,
                        robust_cost, robust_weight, scale_factor)

log = logging.getLogger(__name__)


class EmptyWindowError(ValueError):
    pass


class NonFiniteCostError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    damping: float = 1e-4
    up: float = 2.0
    down: float = 3.0
    g_tol: float = 1e-10
    f_tol: float = 1e-9
    max_iter: int = 50
    max_damping: float = 1e16


@dataclass(eq=False)
class WindowProblem:
    poses: Dict[int, Transform]  # every pose referenced by a block
    window: List[int]
    fixed: Set[int]
    blocks: List[ResidualBlock]
    config: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        allowed = set(self.window) | self.fixed
        for b in self.blocks:
            if len(b.pose_ids) > 2 or not set(b.pose_ids) <= allowed:
                raise ValueError(f"block {b.kind} references poses {b.pose_ids} outside the problem")
        self._compile()

    @property
    def variables(self) -> List[int]:
        return [i for i in self.window if i not in self.fixed]

    def count(self, kind: str) -> int:
        return sum(1 for b in self.blocks if b.kind == kind)

    def _compile(self):
        rep = [b for b in self.blocks if b.kind == "reproj"]
        self.other_blocks = [b for b in self.blocks if b.kind != "reproj"]
        self.reproj = None
        if rep:
            self.reproj = {
                "obs": np.array([b.pose_ids[0] for b in rep]),
                "anc": np.array([b.pose_ids[1] for b in rep]),
                "point": np.array([b.measurement.point for b in rep]),
                "pixel": np.array([b.measurement.pixel for b in rep]),
                "lens": np.array([b.measurement.lens for b in rep]),
                "alpha": np.array([b.alpha for b in rep]),
                "delta": np.array([np.inf if b.huber_delta is None else b.huber_delta for b in rep]),
                "rig": rep[0].measurement.rig,
            }


@dataclass
class SolveReport:
    iterations: int = 0
    costs: List[float] = field(default_factory=list)
    kind_costs: List[Dict[str, float]] = field(default_factory=list)
    before: Dict[str, float] = field(default_factory=dict)
    after: Dict[str, float] = field(default_factory=dict)
    reason: str = ""
    deactivated: int = 0

    @property
    def delta_f(self) -> Dict[str, float]:
        return {k: self.after[k] - self.before[k] for k in KINDS}

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "total_cost"] + [f"f_{k}" for k in KINDS])
            for i, (c, kc) in enumerate(zip(self.costs, self.kind_costs)):
                w.writerow([i, repr(c)] + [repr(kc[k]) for k in KINDS])


# problem assembly -----------------------------------------------------------

def build_problem(graph: KeyframeGraph, window: Sequence[int], stats: ResidualStatistics,
                  gamma: float = 0.4, huber_delta: float = 1.345,
                  betas: Optional[Mapping[str, float]] = None,
                  config: Optional[SolverConfig] = None,
                  count_normalization: str = "cost", fix_unobserved: bool = True) -> WindowProblem:
    """Residual blocks of every keyframe in ``window`` (ordered ids).

    ``count_normalization`` controls how the per-keyframe reprojection count
    ``N`` enters: ``"cost"`` divides the summed squared cost of the group by
    ``N`` (alpha uses ``sqrt(N)``), ``"residual"`` divides every residual by
    ``N`` (alpha uses ``N``, which scales the group cost by ``1/N``).
    With ``fix_unobserved`` window keyframes without any reprojection block
    (e.g. created while tracking was lost) are held fixed: only inertial
    residuals would move them.

    The first window pose is the gauge. Reprojection blocks whose anchor lies
    outside the window bring that anchor in as a fixed pose; observations of
    a landmark from its own anchor carry no information and are skipped.
    """
    window = list(window)
    if not window:
        raise EmptyWindowError("optimization window is empty")
    betas = dict(betas) if betas is not None else default_betas(gamma)
    if count_normalization == "cost":
        count = math.sqrt
    elif count_normalization == "residual":
        count = float
    else:
        raise ValueError(f"unknown count normalization {count_normalization!r}")
    in_window = set(window)
    fixed = {window[0]}
    blocks: List[ResidualBlock] = []
    refs = graph.references
    for n, kid in enumerate(window):
        kf = graph.keyframes[kid]
        if graph.pivot_known:
            blocks.append(ResidualBlock("pivot", (kid,), None, scale_factor("pivot", stats, betas["pivot"])))
        blocks.append(ResidualBlock("accel", (kid,), VectorMeasurement(kf.accel, refs.gravity),
                                    scale_factor("accel", stats, betas["accel"])))
        blocks.append(ResidualBlock("mag", (kid,), VectorMeasurement(kf.mag, refs.magnetic),
                                    scale_factor("mag", stats, betas["mag"])))
        obs = [o for o in kf.observations
               if o.landmark in graph.landmarks and graph.landmarks[o.landmark].anchor != kid]
        if obs:
            alpha = scale_factor("reproj", stats, betas["reproj"], count(len(obs)))
            for o in obs:
                lm = graph.landmarks[o.landmark]
                if lm.anchor not in in_window:
                    fixed.add(lm.anchor)
                blocks.append(ResidualBlock("reproj", (kid, lm.anchor),
                                            ReprojMeasurement(lm.position, o.pixel, o.lens, graph.rig, lm.id),
                                            alpha, huber_delta))
        if n > 0:
            prev = window[n - 1]
            link = kf.gyro_link
            if link is not None and prev == kid - 1:
                blocks.append(ResidualBlock("gyro", (prev, kid), link.delta_rotation,
                                            scale_factor("gyro", stats, betas["gyro"])))
    if fix_unobserved:
        observed = {b.pose_ids[0] for b in blocks if b.kind == "reproj"}
        fixed.update(k for k in window if k not in observed)
    poses = {i: graph.keyframes[i].pose for i in in_window | fixed}
    return WindowProblem(poses, window, fixed, blocks, config or SolverConfig())


# cost evaluation ------------------------------------------------------------

def _reproj_eval(problem: WindowProblem, poses: Mapping[int, Transform], jac: bool):
    d = problem.reproj
    rig = d["rig"]
    n = len(d["obs"])
    r = np.zeros((n, 2))
    Jo = np.zeros((n, 2, 6))
    Ja = np.zeros((n, 2, 6))
    valid = np.zeros(n, bool)
    Rs = {k: p.rotation for k, p in poses.items()}
    ts = {k: p.translation for k, p in poses.items()}
    R_o = np.array([Rs[i] for i in d["obs"]])
    t_o = np.array([ts[i] for i in d["obs"]])
    R_a = np.array([Rs[i] for i in d["anc"]])
    t_a = np.array([ts[i] for i in d["anc"]])
    for lens in (0, 1):
        m = d["lens"] == lens
        if not np.any(m):
            continue
        L = rig.lens_from_body(lens)
        rr, jo, ja, ok = reproj_batch(R_o[m], t_o[m], R_a[m], t_a[m], d["point"][m], d["pixel"][m],
                                      L.rotation, L.translation, rig.intrinsics(lens))
        r[m], Jo[m], Ja[m], valid[m] = rr, jo, ja, ok
    return r, Jo, Ja, valid


def _robust_vec(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return np.where(x <= delta, 0.5 * x * x, delta * (x - 0.5 * delta))


def _weight_vec(x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return np.where(x <= delta, 1.0, delta / np.maximum(x, 1e-300))


def cost_breakdown(problem: WindowProblem, poses: Optional[Mapping[int, Transform]] = None
                   ) -> Dict[str, float]:
    """Per-kind robustified costs ``f_k = sum rho(|alpha r|)``; adds ``total``."""
    poses = problem.poses if poses is None else poses
    f = {k: 0.0 for k in KINDS}
    for b in problem.other_blocks:
        x = float(np.linalg.norm(b.alpha * evaluate(b, poses)))
        f[b.kind] += robust_cost(x, b.huber_delta)
    if problem.reproj is not None:
        r, _, _, valid = _reproj_eval(problem, poses, False)
        d = problem.reproj
        x = np.linalg.norm(r, axis=1) * d["alpha"]
        f["reproj"] += float(np.sum(_robust_vec(x, d["delta"])[valid]))
    f["total"] = sum(f[k] for k in KINDS)
    return f


def delta_f(problem: WindowProblem, before: Mapping[int, Transform], after: Mapping[int, Transform]
            ) -> Dict[str, float]:
    fb = cost_breakdown(problem, before)
    fa = cost_breakdown(problem, after)
    return {k: fa[k] - fb[k] for k in KINDS}


def _accumulate(problem: WindowProblem, poses, index: Dict[int, int]):
    """Block Hessian (nv, nv, 6, 6) and gradient (nv, 6) of the reweighted problem."""
    nv = len(index)
    Hb = np.zeros((nv + 1, nv + 1, 6, 6))  # last slot collects fixed poses
    gb = np.zeros((nv + 1, 6))
    deactivated = 0
    for b in problem.other_blocks:
        r = evaluate(b, poses)
        e = b.alpha * r
        w = robust_weight(float(np.linalg.norm(e)), b.huber_delta) * b.alpha ** 2
        Js = residual_jacobians(b, poses)
        slots = [index.get(i, nv) for i in b.pose_ids]
        for si, Ji in zip(slots, Js):
            gb[si] += w * Ji.T @ r
            for sj, Jj in zip(slots, Js):
                Hb[si, sj] += w * Ji.T @ Jj
    if problem.reproj is not None:
        d = problem.reproj
        r, Jo, Ja, valid = _reproj_eval(problem, poses, True)
        deactivated = int((~valid).sum())
        x = np.linalg.norm(r, axis=1) * d["alpha"]
        w = _weight_vec(x, d["delta"]) * d["alpha"] ** 2
        w[~valid] = 0.0
        so = np.array([index.get(i, nv) for i in d["obs"]])
        sa = np.array([index.get(i, nv) for i in d["anc"]])
        for s1, J1 in ((so, Jo), (sa, Ja)):
            np.add.at(gb, s1, w[:, None] * np.einsum("nki,nk->ni", J1, r))
            for s2, J2 in ((so, Jo), (sa, Ja)):
                np.add.at(Hb, (s1, s2), w[:, None, None] * np.einsum("nki,nkj->nij", J1, J2))
    return Hb[:nv, :nv], gb[:nv], deactivated


def normal_equations(problem: WindowProblem, poses, index: Dict[int, int]):
    """Sparse block normal matrix (CSR) and gradient for the variable poses."""
    Hb, gb, deact = _accumulate(problem, poses, index)
    nv = len(index)
    nz = [(i, j) for i in range(nv) for j in range(nv) if np.any(Hb[i, j])]
    if nz:
        rows = np.array([i for i, _ in nz])
        cols = np.array([j for _, j in nz])
        data = np.array([Hb[i, j] for i, j in nz])
        H = sp.bsr_matrix((data, cols, np.searchsorted(rows, np.arange(nv + 1))),
                          shape=(6 * nv, 6 * nv), blocksize=(6, 6)).tocsr()
    else:
        H = sp.csr_matrix((6 * nv, 6 * nv))
    return H, gb.reshape(-1), deact


def dense_normal_equations(problem: WindowProblem, poses, index: Dict[int, int]):
    """Brute-force oracle: stack every weighted residual row into one dense Jacobian."""
    nv = len(index)
    rows_J, rows_r = [], []
    for b in problem.blocks:
        r = evaluate(b, poses)
        e = b.alpha * r
        try:
            Js = residual_jacobians(b, poses)
        except Exception:
            continue
        s = math.sqrt(robust_weight(float(np.linalg.norm(e)), b.huber_delta)) * b.alpha
        J = np.zeros((len(r), 6 * nv))
        for pid, Ji in zip(b.pose_ids, Js):
            if pid in index:
                k = index[pid]
                J[:, 6 * k:6 * k + 6] += Ji
        rows_J.append(s * J)
        rows_r.append(s * r)
    J = np.vstack(rows_J)
    r = np.concatenate(rows_r)
    return J.T @ J, J.T @ r


def lm_step(H, g, lam: float) -> np.ndarray:
    """Solve ``(H + lam D) x = -g`` with ``D = diag(H)`` (plus a floor)."""
    if sp.issparse(H):
        diag = H.diagonal()
        floor = 1e-12 * max(float(diag.max()) if diag.size else 1.0, 1e-300)
        A = (H + sp.diags(lam * (diag + floor))).tocsc()
        return spla.spsolve(A, -g)
    diag = np.diag(H)
    floor = 1e-12 * max(float(diag.max()) if diag.size else 1.0, 1e-300)
    return np.linalg.solve(H + np.diag(lam * (diag + floor)), -g)


def _retract(poses: Mapping[int, Transform], index: Dict[int, int], step: np.ndarray):
    out = dict(poses)
    for pid, k in index.items():
        out[pid] = poses[pid].retract(step[6 * k:6 * k + 6])
    return out


def solve(problem: WindowProblem) -> Tuple[Dict[int, Transform], SolveReport]:
    """Levenberg-Marquardt; returns the updated window poses and a report."""
    cfg = problem.config
    index = {pid: k for k, pid in enumerate(problem.variables)}
    poses = dict(problem.poses)
    kc = cost_breakdown(problem, poses)
    cost = kc["total"]
    if not math.isfinite(cost):
        raise NonFiniteCostError(f"initial cost is {cost}")
    report = SolveReport(costs=[cost], kind_costs=[kc], before=kc)
    if not index:
        report.reason = "no variables"
        report.after = kc
        return {}, report
    lam = cfg.damping
    reason = "max iterations"
    for it in range(cfg.max_iter):
        H, g, deact = normal_equations(problem, poses, index)
        report.deactivated = max(report.deactivated, deact)
        if np.max(np.abs(g)) < cfg.g_tol:
            reason = "gradient"
            break
        accepted = False
        while True:
            step = lm_step(H, g, lam)
            cand = _retract(poses, index, step)
            ckc = cost_breakdown(problem, cand)
            if math.isfinite(ckc["total"]) and ckc["total"] < cost:
                accepted = True
                break
            lam *= cfg.up
            if lam > cfg.max_damping:
                break
        if not accepted:
            reason = "damping overflow" if lam > cfg.max_damping else "no decrease"
            break
        rel = (cost - ckc["total"]) / max(cost, 1e-300)
        poses, cost = cand, ckc["total"]
        lam = max(lam / cfg.down, 1e-15)
        report.iterations = it + 1
        report.costs.append(cost)
        report.kind_costs.append(ckc)
        if rel < cfg.f_tol:
            reason = "relative decrease"
            break
    report.reason = reason
    report.after = report.kind_costs[-1]
    return {pid: poses[pid] for pid in index}, report
