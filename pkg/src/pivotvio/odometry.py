"""Tracking loop: gyro propagation on the pivot sphere, PnP-RANSAC on
anchored landmarks, sanity checks, keyframes and stereo landmark
initialization, with the V1-V4 switches."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from .camera import (StereoRig, essential_matrix, project_jacobian, project_points,
                     triangulate_bearings, unproject_points, DegenerateGeometryError)
from .geometry import Transform, exp_se3_batch, extract_pivot, hat, rotation_distance
from .residuals import Landmark, Observation, ResidualStatistics, reference_statistics
from .sensors import (ImuCalibration, ImuStream, PreintegratedGyro, WorldReferences, correct_mag,
                      gravity_in_body, preintegrate)
from .tracks import TrackFrame, TrackStream, advance_tracks, first_frame

log = logging.getLogger(__name__)


class InsufficientDataError(ValueError):
    """Fewer than four 3D-2D correspondences."""


class TrackingLostError(RuntimeError):
    """RANSAC found too few inliers; carries the best hypothesis."""

    def __init__(self, msg, pose=None, inliers=None):
        super().__init__(msg)
        self.pose = pose
        self.inliers = inliers


class IllConditionedError(ValueError):
    def __init__(self, msg, condition=math.inf):
        super().__init__(msg)
        self.condition = condition


@dataclass(frozen=True)
class VariantConfig:
    use_gyro_update: bool = True
    use_visual_update: bool = True
    pivot_online: bool = False
    use_optimization: bool = False

    def __post_init__(self):
        if not (self.use_gyro_update or self.use_visual_update):
            raise ValueError("at least one of the gyro and visual update paths must be enabled")


VARIANTS = {
    "V1": VariantConfig(True, False, False),
    "V2": VariantConfig(False, True, False),
    "V3": VariantConfig(True, True, False),
    "V4": VariantConfig(True, True, True),
}


def variant(name: str, optimize: bool = False) -> VariantConfig:
    try:
        return replace(VARIANTS[name.upper()], use_optimization=optimize)
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


@dataclass(frozen=True)
class OdometryConfig:
    n_min: int = 50
    a_max: int = 30
    theta_kf: float = math.radians(10.0)
    d_kf: float = 0.01
    theta_max: float = math.radians(5.0)
    d_max: float = 0.005
    ransac_threshold: float = 2.0
    ransac_iterations: int = 200
    ransac_confidence: float = 0.999
    min_inlier_ratio: float = 0.3
    epipolar_threshold: float = 1e-2
    min_depth: float = 0.005
    max_depth: float = 1.0
    max_gap: float = 0.5
    reference_window: float = 0.5
    pivot_min_keyframes: int = 3
    pivot_max_condition: float = 1e4
    gamma: float = 0.4
    trigger: int = 10
    window: int = 10
    huber_delta: float = 1.345
    count_normalization: str = "cost"
    seed: int = 0


@dataclass
class Keyframe:
    id: int
    timestamp: float
    frame: int
    pose: Transform
    observations: List[Observation] = field(default_factory=list)
    gyro_link: Optional[PreintegratedGyro] = None
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))  # gravity in C, m/s^2
    mag: np.ndarray = field(default_factory=lambda: np.zeros(3))  # field in C, uT


@dataclass
class KeyframeGraph:
    keyframes: List[Keyframe]
    landmarks: Dict[int, Landmark]
    rig: StereoRig
    references: WorldReferences
    pivot_known: bool = True

    def poses(self) -> Dict[int, Transform]:
        return {kf.id: kf.pose for kf in self.keyframes}

    def by_id(self, kf_id: int) -> Keyframe:
        return self.keyframes[kf_id]


@dataclass
class PivotEstimate:
    point: np.ndarray
    confidence: float
    rms: float = 0.0
    condition: float = 1.0


# pose propagation --------------------------------------------------------

def gyro_pose_update(T_prev: Transform, dR, pivot_known: bool = True) -> Transform:
    """Rotate the camera about the pivot by the preintegrated gyro rotation.

    ``C<-T`` update: ``R <- dR^T R``; the translation keeps only its
    component along x. Without a known pivot the camera center is kept.
    """
    D = dR.delta_rotation if isinstance(dR, PreintegratedGyro) else np.asarray(dR, dtype=float)
    R = D.T @ T_prev.rotation
    if pivot_known:
        t = np.array([T_prev.translation[0], 0.0, 0.0])
    else:
        t = D.T @ T_prev.translation
    return Transform(R, t, T_prev.to_frame, T_prev.from_frame)


# PnP-RANSAC ---------------------------------------------------------------

def _lens_arrays(rig: StereoRig):
    Ls = [rig.lens_from_body(0), rig.lens_from_body(1)]
    return np.stack([L.rotation for L in Ls]), np.stack([L.translation for L in Ls])


def _project(R, t, X, lens, rig: StereoRig, RL, tL, jac: bool):
    """Project world points ``X (..., n, 3)`` with poses ``R (..., 3, 3)``.

    Returns ``(uv, valid, J)`` with ``J`` the (..., n, 2, 6) Jacobian for a
    right-multiplied perturbation, or None.
    """
    sel = (lens == 1)[..., None]
    xl = None
    Rl = []
    for k in (0, 1):
        Rk = RL[k] @ R  # lens <- T rotation
        tk = t @ RL[k].T + tL[k]
        xk = X @ np.swapaxes(Rk, -1, -2)[..., :, :] + tk[..., None, :]
        xl = xk if xl is None else np.where(sel, xk, xl)
        Rl.append(Rk)
    uv, valid = project_points(xl, rig.left)
    if rig.right is not rig.left and np.any(sel):
        uv1, valid1 = project_points(xl, rig.right)
        uv = np.where(sel, uv1, uv)
        valid = np.where(sel[..., 0], valid1, valid)
    if not jac:
        return uv, valid, None
    safe = np.where(valid[..., None], xl, np.array([0.0, 0.0, 1.0]))
    P = project_jacobian(safe, rig.left)
    if rig.right is not rig.left and np.any(sel):
        P = np.where(sel[..., None], project_jacobian(safe, rig.right), P)
    A0 = P @ Rl[0][..., None, :, :]
    A1 = P @ Rl[1][..., None, :, :]
    A = np.where(sel[..., None], A1, A0)
    # row a of A times -hat(X) equals cross(X, a)
    Jr = np.cross(X[..., None, :], A)
    return uv, valid, np.concatenate([Jr, A], axis=-1)


def _compose_batch(R, t, xi):
    dR, dt = exp_se3_batch(xi)
    return R @ dR, np.einsum("nij,nj->ni", R, dt) + t


def refine_pose(init: Transform, X, pixels, lens, rig: StereoRig, max_iter: int = 30,
                lam: float = 1e-4) -> Transform:
    """Levenberg-Marquardt on the reprojection error, starting from ``init``."""
    RL, tL = _lens_arrays(rig)
    lens = np.asarray(lens)

    def linearize(T):
        uv, valid, J = _project(T.rotation, T.translation, X, lens, rig, RL, tL, True)
        r = np.where(valid[:, None], uv - pixels, 0.0)
        return r, J, valid

    def cost_at(T):
        uv, valid, _ = _project(T.rotation, T.translation, X, lens, rig, RL, tL, False)
        r = np.where(valid[:, None], uv - pixels, 0.0)
        return float(np.sum(r * r))

    T = init
    r, J, valid = linearize(T)
    cost = float(np.sum(r * r))
    for _ in range(max_iter):
        Jv = J[valid].reshape(-1, 6)
        rv = r[valid].reshape(-1)
        H = Jv.T @ Jv
        g = Jv.T @ rv
        if np.max(np.abs(g)) < 1e-12:
            break
        accepted = False
        while lam < 1e12:
            step = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), -g)
            T2 = T.retract(step)
            cost2 = cost_at(T2)
            if cost2 <= cost:
                accepted = True
                break
            lam *= 2.0
        if not accepted:
            break
        decrease = cost - cost2
        T, cost = T2, cost2
        lam = max(lam / 3.0, 1e-12)
        if decrease <= 1e-8 * cost or np.linalg.norm(step) < 1e-10:
            break
        r, J, valid = linearize(T)
    return Transform(T.rotation, T.translation, init.to_frame, init.from_frame)


def pnp_ransac(X, pixels, lens, init: Transform, rig: StereoRig, threshold: float = 2.0,
               iterations: int = 200, confidence: float = 0.999, min_inlier_ratio: float = 0.3,
               rng: Optional[np.random.Generator] = None, batch: int = 50
               ) -> Tuple[Transform, np.ndarray]:
    """Robust camera pose from world points ``X`` and their pixels.

    Each hypothesis is a four-point Gauss-Newton solve linearized about
    ``init``; the best hypothesis (truncated squared error) defines the
    inliers, on which the pose is refined by LM from ``init``. Sampling stops
    early once ``confidence`` is reached, capped at ``iterations``.
    """
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    lens = np.asarray(lens, dtype=np.int64).reshape(-1)
    n = len(X)
    if n < 4:
        raise InsufficientDataError(f"PnP needs at least 4 correspondences, got {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    RL, tL = _lens_arrays(rig)
    thr2 = threshold * threshold

    def score(Rh, th):
        uv, valid, _ = _project(Rh, th, np.broadcast_to(X, (len(Rh), n, 3)),
                                np.broadcast_to(lens, (len(Rh), n)), rig, RL, tL, False)
        e2 = np.sum((uv - pixels) ** 2, axis=-1)
        e2 = np.where(valid, e2, np.inf)
        return np.sum(np.minimum(e2, thr2), axis=1), e2 < thr2

    # the initial guess is a free hypothesis
    best_cost, best_in = score(init.rotation[None], init.translation[None])
    best_cost, best_in = float(best_cost[0]), best_in[0]
    best = (init.rotation, init.translation)
    done = 0
    while done < iterations:
        h = min(batch, iterations - done)
        idx = np.stack([rng.choice(n, 4, replace=False) for _ in range(h)])
        Xs, us, ls = X[idx], pixels[idx], lens[idx]
        R = np.broadcast_to(init.rotation, (h, 3, 3)).copy()
        t = np.broadcast_to(init.translation, (h, 3)).copy()
        for _ in range(5):
            uv, valid, J = _project(R, t, Xs, ls, rig, RL, tL, True)
            r = np.where(valid[..., None], uv - us, 0.0).reshape(h, 8)
            Jf = np.where(valid[..., None, None], J, 0.0).reshape(h, 8, 6)
            H = np.einsum("hki,hkj->hij", Jf, Jf)
            g = np.einsum("hki,hk->hi", Jf, r)
            H = H + 1e-9 * (np.trace(H, axis1=1, axis2=2)[:, None, None] + 1e-12) * np.eye(6)
            step = np.linalg.solve(H, -g[..., None])[..., 0]
            R, t = _compose_batch(R, t, step)
        cost, inl = score(R, t)
        k = int(np.argmin(cost))
        if cost[k] < best_cost:
            best_cost, best_in, best = float(cost[k]), inl[k], (R[k], t[k])
        done += h
        w = best_in.sum() / n
        if w >= 1.0:
            break
        if w > 0:
            needed = math.log(1.0 - confidence) / math.log(max(1.0 - w ** 4, 1e-12))
            if done >= needed:
                break
    inliers = best_in
    if inliers.sum() < max(4, min_inlier_ratio * n):
        pose = Transform(best[0], best[1], init.to_frame, init.from_frame)
        raise TrackingLostError(f"inlier ratio {inliers.sum() / n:.2f} below {min_inlier_ratio}",
                                pose, inliers)
    pose = init
    for _ in range(2):
        pose = refine_pose(pose, X[inliers], pixels[inliers], lens[inliers], rig)
        _, new_in = score(pose.rotation[None], pose.translation[None])
        if np.array_equal(new_in[0], inliers) or new_in[0].sum() < 4:
            break
        inliers = new_in[0]
    return pose, inliers


# checks and decisions --------------------------------------------------------

@dataclass(frozen=True)
class SanityResult:
    accepted: bool
    reason: str = ""


def sanity_check(T_candidate: Transform, T_predicted: Optional[Transform], pivot_known: bool = True,
                 theta_max: float = math.radians(5.0), d_max: float = 0.005) -> SanityResult:
    """Reject visual poses that disagree with the gyro or leave the pivot."""
    if T_predicted is not None:
        if rotation_distance(T_candidate.rotation, T_predicted.rotation) > theta_max:
            return SanityResult(False, "rotation")
    if pivot_known and np.linalg.norm(extract_pivot(T_candidate)[1]) > d_max:
        return SanityResult(False, "pivot")
    return SanityResult(True)


def keyframe_decision(T: Transform, T_last: Optional[Transform], n_tracked: Optional[int] = None,
                      mean_age: float = 0.0, cfg: OdometryConfig = OdometryConfig()) -> bool:
    if T_last is None:
        return True
    if n_tracked is not None and (n_tracked < cfg.n_min or mean_age > cfg.a_max):
        return True
    if rotation_distance(T.rotation, T_last.rotation) > cfg.theta_kf:
        return True
    c = -T.rotation.T @ T.translation
    c_last = -T_last.rotation.T @ T_last.translation
    return bool(np.linalg.norm(c - c_last) > cfg.d_kf)


def init_landmarks(ids0, uv0, ids1, uv1, rig: StereoRig, kf_id: int, threshold: float = 1e-2,
                   min_depth: float = 0.005, max_depth: float = 1.0
                   ) -> Tuple[List[Landmark], List[int]]:
    """Triangulate stereo pairs that pass the epipolar test.

    Returns the new landmarks (anchored in the body frame of ``kf_id``) and
    the ids of rejected pairs.
    """
    ids0 = np.asarray(ids0, dtype=np.int64)
    ids1 = np.asarray(ids1, dtype=np.int64)
    common, a, b = np.intersect1d(ids0, ids1, return_indices=True)
    if len(common) == 0:
        return [], []
    b0 = unproject_points(np.asarray(uv0)[a], rig.left)
    b1 = unproject_points(np.asarray(uv1)[b], rig.right)
    E = essential_matrix(rig)
    epi = np.abs(np.einsum("ni,ij,nj->n", b0, E, b1))
    R01, t01 = rig.extrinsic.rotation, rig.extrinsic.translation
    out, rejected = [], []
    for k, lid in enumerate(common):
        if not epi[k] <= threshold:
            rejected.append(int(lid))
            continue
        try:
            p0 = triangulate_bearings(b0[k], b1[k], rig)
        except DegenerateGeometryError:
            rejected.append(int(lid))
            continue
        p1 = R01.T @ (p0 - t01)
        if not (min_depth < p0[2] < max_depth and min_depth < p1[2] < max_depth):
            rejected.append(int(lid))
            continue
        out.append(Landmark(int(lid), kf_id, rig.mount.apply(p0)))
    return out, rejected


def estimate_pivot(poses, min_keyframes: int = 3, max_condition: float = 1e4) -> PivotEstimate:
    """Least-squares intersection of the camera shaft lines.

    Each pose ``C<-T`` defines the line through the camera center along the
    body x axis; the pivot is the point closest to all of them.
    """
    poses = list(poses)
    if len(poses) < min_keyframes:
        raise IllConditionedError(f"pivot estimation needs {min_keyframes} keyframes, got {len(poses)}")
    A = np.zeros((3, 3))
    b = np.zeros(3)
    projs = []
    for T in poses:
        a = T.rotation[0]  # body x axis in T
        c = -T.rotation.T @ T.translation
        P = np.eye(3) - np.outer(a, a)
        A += P
        b += P @ c
        projs.append((P, c))
    cond = float(np.linalg.cond(A))
    if not cond < max_condition:
        raise IllConditionedError(f"shaft lines nearly parallel (condition number {cond:.3g})", cond)
    p = np.linalg.solve(A, b)
    rms = math.sqrt(np.mean([np.sum((P @ (p - c)) ** 2) for P, c in projs]))
    return PivotEstimate(p, 1.0 / cond, rms, cond)


def estimate_references(imu: ImuStream, cal: ImuCalibration, T0: Transform, t0: float,
                        window: float = 0.5) -> WorldReferences:
    """World gravity and magnetic directions from the first ``window`` seconds.

    Samples are rotated into T with the gyro-propagated initial orientation
    and averaged.
    """
    i0 = imu.nearest(t0)
    idx = np.flatnonzero((imu.timestamps >= imu.timestamps[i0]) & (imu.timestamps <= t0 + window))
    g_sum = np.zeros(3)
    m_sum = np.zeros(3)
    R = T0.rotation  # C<-T
    t_prev = t0
    for i in idx:
        ti = float(imu.timestamps[i])
        if ti > t_prev:
            R = preintegrate(imu, t_prev, ti).delta_rotation.T @ R
            t_prev = ti
        g_sum += R.T @ gravity_in_body(imu.accel[i], cal)
        m_sum += R.T @ correct_mag(imu.mag[i], cal)
    return WorldReferences(g_sum, m_sum)


# the loop --------------------------------------------------------------------

@dataclass
class RunResult:
    frame_times: np.ndarray
    poses: List[Transform]
    graph: KeyframeGraph
    variant: VariantConfig
    status: List[str]
    reports: list = field(default_factory=list)
    pivot: Optional[PivotEstimate] = None
    pivot_history: List[Tuple[float, np.ndarray]] = field(default_factory=list)

    def status_counts(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for s in self.status:
            out[s] = out.get(s, 0) + 1
        return out


def _landmark_world(graph: KeyframeGraph, lids) -> np.ndarray:
    lms = [graph.landmarks[int(i)] for i in lids]
    anchors = np.array([lm.anchor for lm in lms])
    P = np.array([lm.position for lm in lms]).reshape(-1, 3)
    X = np.empty_like(P)
    for a in np.unique(anchors):
        m = anchors == a
        T = graph.keyframes[a].pose
        X[m] = (P[m] - T.translation) @ T.rotation
    return X


def run(imu: ImuStream, tracks: TrackStream, rig: StereoRig, calibration: ImuCalibration,
        initial_pose: Transform, var: VariantConfig = VARIANTS["V3"],
        cfg: OdometryConfig = OdometryConfig(), stats: Optional[ResidualStatistics] = None
        ) -> RunResult:
    """Run the tracking loop over every frame of ``tracks``.

    ``initial_pose`` is the ``C<-T`` pose at the first frame. For the
    pivot-online variant its world origin need not be the pivot; the output
    trajectory stays in that frame while the pivot is estimated internally.
    """
    from .optimizer import build_problem, solve

    stats = stats if stats is not None else reference_statistics()
    rng = np.random.default_rng(cfg.seed)
    t0 = float(tracks.frame_times[0])
    refs = estimate_references(imu, calibration, initial_pose, t0, cfg.reference_window)
    graph = KeyframeGraph([], {}, rig, refs, pivot_known=not var.pivot_online)
    pivot_offset = np.zeros(3)  # pivot position in the output frame
    blacklist: Set[int] = set()
    poses_out: List[Transform] = []
    status: List[str] = []
    reports = []
    pivot_est: Optional[PivotEstimate] = None
    pivot_history = []

    def out_pose(T: Transform) -> Transform:
        return Transform(T.rotation, T.translation - T.rotation @ pivot_offset, T.to_frame, T.from_frame)

    def add_keyframe(frame: TrackFrame, T: Transform, observations) -> Keyframe:
        kf_id = len(graph.keyframes)
        i = imu.nearest(frame.timestamp)
        link = None
        if graph.keyframes:
            link = preintegrate(imu, graph.keyframes[-1].timestamp, frame.timestamp)
        kf = Keyframe(kf_id, frame.timestamp, frame.index, T, list(observations), link,
                      gravity_in_body(imu.accel[i], calibration), correct_mag(imu.mag[i], calibration))
        graph.keyframes.append(kf)
        # every track seen by a keyframe restarts its age; resetting only the
        # inliers lets persistent outlier tracks age without bound
        frame.reset_ages(list(frame.ages))
        if var.use_visual_update:
            free0 = np.array([int(i) not in graph.landmarks and int(i) not in blacklist
                              for i in frame.ids[0]], dtype=bool)
            new, rejected = init_landmarks(frame.ids[0][free0], frame.uv[0][free0], frame.ids[1],
                                           frame.uv[1], rig, kf_id, cfg.epipolar_threshold,
                                           cfg.min_depth, cfg.max_depth)
            for lm in new:
                graph.landmarks[lm.id] = lm
            blacklist.update(rejected)
        return kf

    frame = first_frame(tracks)
    T = initial_pose
    add_keyframe(frame, T, [])
    poses_out.append(out_pose(T))
    status.append("init")

    for _ in range(1, len(tracks)):
        t_prev = frame.timestamp
        frame = advance_tracks(frame, tracks, cfg.max_gap, blacklist)
        pred = None
        if var.use_gyro_update:
            pred = gyro_pose_update(T, preintegrate(imu, t_prev, frame.timestamp), graph.pivot_known)
            T_new = pred
        else:
            T_new = T
        state = "gyro" if var.use_gyro_update else "hold"
        observations: List[Observation] = []
        n_tracked = None
        if var.use_visual_update:
            lids, pix, lens = [], [], []
            for ln in (0, 1):
                for lid, uv in zip(frame.ids[ln], frame.uv[ln]):
                    if int(lid) in graph.landmarks:
                        lids.append(int(lid))
                        pix.append(uv)
                        lens.append(ln)
            n_tracked = len(set(lids))
            if len(lids) >= 4:
                X = _landmark_world(graph, lids)
                try:
                    cand, inl = pnp_ransac(X, np.array(pix), np.array(lens), T_new, rig,
                                           cfg.ransac_threshold, cfg.ransac_iterations,
                                           cfg.ransac_confidence, cfg.min_inlier_ratio, rng)
                    chk = sanity_check(cand, pred, graph.pivot_known, cfg.theta_max, cfg.d_max)
                    if chk.accepted:
                        T_new = cand
                        state = "visual"
                        inlier_ids = {lids[k] for k in np.flatnonzero(inl)}
                        observations = [Observation(lids[k], -1, lens[k], np.asarray(pix[k]))
                                        for k in np.flatnonzero(inl)]
                        n_tracked = len(inlier_ids)
                    else:
                        state = f"reject-{chk.reason}"
                except TrackingLostError:
                    state = "lost"
            else:
                state = "lost"
        T = T_new
        ages = [frame.ages[i] for i in frame.ages]
        mean_age = float(np.mean(ages)) if ages else 0.0
        last = graph.keyframes[-1]
        if keyframe_decision(T, last.pose, n_tracked, mean_age, cfg):
            kf = add_keyframe(frame, T, observations)
            for o in kf.observations:
                o.keyframe = kf.id
            if var.pivot_online:
                try:
                    est = estimate_pivot([k.pose for k in graph.keyframes], cfg.pivot_min_keyframes,
                                         cfg.pivot_max_condition)
                    p = est.point
                    for k in graph.keyframes:
                        k.pose = Transform(k.pose.rotation, k.pose.translation + k.pose.rotation @ p,
                                           k.pose.to_frame, k.pose.from_frame)
                    pivot_offset = pivot_offset + p
                    pivot_est = PivotEstimate(pivot_offset.copy(), est.confidence, est.rms, est.condition)
                    pivot_history.append((frame.timestamp, pivot_offset.copy()))
                    graph.pivot_known = True
                    T = kf.pose
                except IllConditionedError:
                    pass
            if var.use_optimization and len(graph.keyframes) % cfg.trigger == 0:
                ids = [k.id for k in graph.keyframes[-cfg.window:]]
                problem = build_problem(graph, ids, stats, cfg.gamma, cfg.huber_delta,
                                        count_normalization=cfg.count_normalization)
                new_poses, report = solve(problem)
                for kid, P in new_poses.items():
                    graph.keyframes[kid].pose = P
                reports.append(report)
                T = graph.keyframes[-1].pose
        poses_out.append(out_pose(T))
        status.append(state)

    return RunResult(np.asarray(tracks.frame_times, dtype=float), poses_out, graph, var, status,
                     reports, pivot_est, pivot_history)
