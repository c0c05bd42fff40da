"""Deterministic synthetic trocar world.

The camera pivots about the trocar point (origin of the world frame T):
``C<-T = (R_CT, depth * e_x)``. The IMU coincides with the body frame C,
the optical axis is -x_C and the left lens frame C0 has its x axis along
z_C. Orientation is sampled at IMU ticks and interpolated geodesically in
between, so the zero-order-hold gyro stream integrates exactly to the
ground truth when noise is off.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from .camera import CameraIntrinsics, StereoRig, project_points, write_calibration
from .geometry import Transform, exp_so3, log_so3
from .sensors import (GRAVITY, MAGNETIC_FIELD, ImuCalibration, ImuStream, WorldReferences,
                      write_imu_calibration, write_imu_csv, write_pose_csv)
from .tracks import TrackStream, write_frame_times, write_track_csv

MANIFEST = "manifest.txt"
MAG_INCLINATION = math.radians(64.0)

# world orientation of the body at zero pan/tilt/roll: optical axis -x_b
# looks along (1, 0, -1)/sqrt(2), i.e. 45 degrees downward
R_BASE = np.column_stack([np.array([-1.0, 0.0, 1.0]) / math.sqrt(2.0),
                          [0.0, 1.0, 0.0],
                          np.array([-1.0, 0.0, -1.0]) / math.sqrt(2.0)])


@dataclass(frozen=True)
class Scenario:
    """Everything needed to regenerate a synthetic run bit-exactly."""

    name: str = "default"
    seed: int = 0
    duration: float = 60.0
    imu_rate: float = 220.0
    video_rate: float = 60.0
    ir_rate: float = 20.0
    pivot: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    # trajectory: smooth random pan/tilt/roll knots plus depth ramp
    knot_spacing: float = 1.5
    pan_amplitude: float = 0.25
    tilt_amplitude: float = 0.2
    roll_amplitude: float = 0.15
    depth_start: float = 0.08
    depth_end: float = 0.08
    depth_wobble: float = 0.0
    sweep_time: float = -1.0  # negative disables the fast pan sweep
    sweep_duration: float = 1.0
    sweep_angle: float = 1.2
    dwell: float = 0.0  # >0 switches to dwell-and-move motion
    move_time: float = 0.3
    # scene
    n_landmarks: int = 4000
    shell_inner: float = 0.17
    shell_outer: float = 0.24
    cone_half_angle: float = math.radians(100.0)
    dynamic_fraction: float = 0.0
    dynamic_radius: float = 0.015
    dynamic_distance: float = 0.05
    dynamic_amplitude: float = 0.01
    dynamic_frequency: float = 0.3
    # noise
    sigma_gyro: float = 0.01  # rad/s per sample
    gyro_bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)  # optional stressor; the estimator has no bias state
    sigma_a: float = 0.01  # g
    sigma_m: float = 0.486  # uT
    sigma_px: float = 0.3
    sigma_rw: float = 0.05  # px per frame
    sigma_ir_rot: float = 0.0
    sigma_ir_trans: float = 0.0
    cross_match_rate: float = 0.05
    termination_rate: float = 0.002
    motion_accel: bool = True
    # injected IMU calibration errors
    accel_bias: Tuple[float, float, float] = (0.1, -0.05, 0.2)
    accel_scale: float = 1.03
    mag_bias: Tuple[float, float, float] = (5.0, -3.0, 8.0)
    mag_scale: float = 0.97
    # clock offsets added to each stream's timestamps
    imu_offset: float = 0.0
    video_offset: float = 0.0
    ir_offset: float = 0.0
    # stereo rig
    fx: float = 1000.0
    fy: float = 1000.0
    cx: float = 960.0
    cy: float = 540.0
    k1: float = -0.1
    k2: float = 0.02
    width: int = 1920
    height: int = 1080
    baseline: float = 0.005
    # simulated front-end
    detect_min: int = 100
    detect_target: int = 150
    max_flow: float = 25.0
    border: float = 10.0

    def __post_init__(self):
        if min(self.imu_rate, self.video_rate, self.ir_rate) <= 0:
            raise ValueError("sample rates must be positive")
        if not 0.0 <= self.dynamic_fraction < 1.0:
            raise ValueError("dynamic_fraction must be in [0, 1)")
        if self.duration <= 0:
            raise ValueError("duration must be positive")

    def noiseless(self) -> "Scenario":
        """Same trajectory and scene with every disturbance switched off."""
        return replace(self, sigma_gyro=0.0, gyro_bias=(0.0, 0.0, 0.0), sigma_a=0.0, sigma_m=0.0,
                       sigma_px=0.0, sigma_rw=0.0, sigma_ir_rot=0.0, sigma_ir_trans=0.0,
                       cross_match_rate=0.0, termination_rate=0.0, motion_accel=False,
                       dynamic_fraction=0.0)

    # manifest ------------------------------------------------------------
    def to_manifest(self) -> Dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                out[f.name] = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                out[f.name] = repr(v)
            else:
                out[f.name] = str(v)
        return out

    @classmethod
    def from_manifest(cls, items: Dict[str, str]) -> "Scenario":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name].strip()
            default = f.default
            if isinstance(default, bool):
                kw[f.name] = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kw[f.name] = int(raw)
            elif isinstance(default, float):
                kw[f.name] = float(raw)
            elif isinstance(default, tuple):
                kw[f.name] = tuple(float(x) for x in raw.split(","))
            else:
                kw[f.name] = raw
        return cls(**kw)


PRESETS: Dict[str, Scenario] = {
    "pure-rotation": Scenario(name="pure-rotation", seed=11, duration=20.0),
    "inward-motion": Scenario(name="inward-motion", seed=12, duration=20.0, depth_start=0.06,
                              depth_end=0.11, depth_wobble=0.004, pan_amplitude=0.15,
                              tilt_amplitude=0.12, roll_amplitude=0.1),
    "fast-sweep-occlusion": Scenario(name="fast-sweep-occlusion", seed=13, duration=20.0,
                                     sweep_time=8.0, sweep_duration=1.0, sweep_angle=1.2,
                                     pan_amplitude=0.15, tilt_amplitude=0.12, roll_amplitude=0.1,
                                     dynamic_fraction=0.04, max_flow=15.0),
    "calibration-wand": Scenario(name="calibration-wand", seed=14, duration=60.0, dwell=1.2,
                                 move_time=0.3, depth_start=0.0, depth_end=0.0,
                                 cone_half_angle=math.pi, sigma_a=0.01, sigma_m=0.486),
}


def preset(name: str, **overrides) -> Scenario:
    try:
        sc = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(sc, **overrides) if overrides else sc


# trajectory ---------------------------------------------------------------

def smootherstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * x * (x * (6.0 * x - 15.0) + 10.0)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(np.shape(a) + (3, 3))
    R[..., 0, 0] = 1.0
    R[..., 1, 1], R[..., 1, 2], R[..., 2, 1], R[..., 2, 2] = c, -s, s, c
    return R


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(np.shape(a) + (3, 3))
    R[..., 1, 1] = 1.0
    R[..., 0, 0], R[..., 0, 2], R[..., 2, 0], R[..., 2, 2] = c, s, -s, c
    return R


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    R = np.zeros(np.shape(a) + (3, 3))
    R[..., 2, 2] = 1.0
    R[..., 0, 0], R[..., 0, 1], R[..., 1, 0], R[..., 1, 1] = c, -s, s, c
    return R


@dataclass(eq=False)
class Profiles:
    """Smooth angle and depth profiles of the trajectory."""

    scenario: Scenario
    pan: CubicSpline
    tilt: CubicSpline
    roll: CubicSpline
    wobble: Optional[CubicSpline]

    def angles(self, t):
        sc = self.scenario
        t = np.asarray(t, dtype=float)
        pan, tilt, roll = self.pan(t), self.tilt(t), self.roll(t)
        if sc.sweep_time >= 0:
            pan = pan + sc.sweep_angle * smootherstep((t - sc.sweep_time) / sc.sweep_duration)
        return pan, tilt, roll

    def rotation_tc(self, t) -> np.ndarray:
        """Smooth T<-C rotation(s)."""
        pan, tilt, roll = self.angles(t)
        return R_BASE @ _ry(pan) @ _rz(tilt) @ _rx(roll)

    def depth(self, t):
        sc = self.scenario
        t = np.asarray(t, dtype=float)
        d = sc.depth_start + (sc.depth_end - sc.depth_start) * smootherstep(t / sc.duration)
        if self.wobble is not None:
            d = d + self.wobble(t)
        return d

    def center(self, t) -> np.ndarray:
        """Camera center in T: ``-depth * R_TC e_x``."""
        return -self.depth(t)[..., None] * self.rotation_tc(t)[..., :, 0]


def _knots(rng, duration, spacing, amplitude, n_extra=2):
    n = max(int(math.ceil(duration / spacing)) + n_extra, 4)
    tk = np.arange(n) * spacing - spacing
    vals = rng.uniform(-amplitude, amplitude, n)
    return CubicSpline(tk, vals, bc_type="natural")


def _dwell_spline(rng, sc: Scenario):
    """Piecewise-constant random orientations joined by smootherstep moves."""
    period = sc.dwell + sc.move_time
    n = int(math.ceil(sc.duration / period)) + 2
    targets = np.column_stack([rng.uniform(-math.pi, math.pi, n), rng.uniform(-1.3, 1.3, n),
                               rng.uniform(-math.pi, math.pi, n)])
    # dense sampling of the step profile, then an interpolating spline
    t = np.arange(0.0, n * period, 1.0 / (4.0 * sc.imu_rate))
    k = np.minimum((t // period).astype(int), n - 2)
    x = smootherstep((t - k * period - sc.dwell) / sc.move_time)
    vals = targets[k] + (targets[k + 1] - targets[k]) * x[:, None]
    return [_Lookup(t, vals[:, i]) for i in range(3)]


class _Lookup:
    """Linear interpolation of a densely sampled profile (spline stand-in)."""

    def __init__(self, t, v):
        self.t, self.v = t, v

    def __call__(self, x):
        return np.interp(x, self.t, self.v)


def make_profiles(sc: Scenario, rng: np.random.Generator) -> Profiles:
    if sc.dwell > 0:
        pan, tilt, roll = _dwell_spline(rng, sc)
    else:
        pan = _knots(rng, sc.duration, sc.knot_spacing, sc.pan_amplitude)
        tilt = _knots(rng, sc.duration, sc.knot_spacing, sc.tilt_amplitude)
        roll = _knots(rng, sc.duration, sc.knot_spacing, sc.roll_amplitude)
    wobble = None
    if sc.depth_wobble > 0:
        wobble = _knots(rng, sc.duration, 2.0 * sc.knot_spacing, sc.depth_wobble)
    return Profiles(sc, pan, tilt, roll, wobble)


# ground truth ---------------------------------------------------------------

@dataclass(eq=False)
class GroundTruth:
    """True trajectory, landmarks and stream offsets of one scenario."""

    scenario: Scenario
    profiles: Profiles
    tick_times: np.ndarray  # true IMU tick times, one more than the samples
    tick_rotations: np.ndarray  # T<-C at the ticks
    tick_rates: np.ndarray  # exact body rates held over each tick interval
    landmarks: np.ndarray  # static points in T
    dynamic_local: np.ndarray  # dynamic cluster points relative to its center
    offsets: Dict[str, float] = field(default_factory=dict)

    def rotation_tc(self, t: float) -> np.ndarray:
        dt = 1.0 / self.scenario.imu_rate
        j = int(np.clip(math.floor(t / dt + 1e-9), 0, len(self.tick_rates) - 1))
        tau = t - self.tick_times[j]
        if tau == 0.0:
            return self.tick_rotations[j]
        return self.tick_rotations[j] @ exp_so3(self.tick_rates[j] * tau)

    def pose(self, t: float) -> Transform:
        """Ground-truth ``C<-T`` at true time ``t``."""
        R = self.rotation_tc(t).T
        return Transform(R, np.array([float(self.profiles.depth(t)), 0.0, 0.0]), "C", "T")

    def poses(self, times) -> List[Transform]:
        return [self.pose(float(t)) for t in times]

    def dynamic_center(self, t: float) -> np.ndarray:
        sc = self.scenario
        # in front of the nominal camera center depth_start * d0
        d0 = -R_BASE[:, 0]
        c0 = (sc.depth_start + sc.dynamic_distance) * d0
        w = 2.0 * math.pi * sc.dynamic_frequency * t
        e1 = R_BASE[:, 1]
        e2 = R_BASE[:, 2]
        return c0 + sc.dynamic_amplitude * (math.sin(w) * e1 + math.sin(0.7 * w + 1.0) * e2)

    def dynamic_points(self, t: float) -> np.ndarray:
        if len(self.dynamic_local) == 0:
            return np.zeros((0, 3))
        R = exp_so3(np.array([0.0, 0.0, 0.4 * math.sin(2.0 * math.pi * 0.2 * t)]))
        return self.dynamic_local @ R.T + self.dynamic_center(t)

    @property
    def references(self) -> WorldReferences:
        return world_references()


def world_references() -> WorldReferences:
    g = np.array([0.0, 0.0, -GRAVITY])
    m = MAGNETIC_FIELD * np.array([math.cos(MAG_INCLINATION), 0.0, -math.sin(MAG_INCLINATION)])
    return WorldReferences(g, m)


def make_rig(sc: Scenario) -> StereoRig:
    intr = CameraIntrinsics(sc.fx, sc.fy, sc.cx, sc.cy, sc.k1, sc.k2, sc.width, sc.height)
    mount = Transform(np.column_stack([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]]),
                      np.zeros(3), "C", "C0")
    extrinsic = Transform(np.eye(3), np.array([sc.baseline, 0.0, 0.0]), "C0", "C1")
    return StereoRig(intr, intr, extrinsic, mount)


def true_calibration(sc: Scenario) -> ImuCalibration:
    return ImuCalibration(np.array(sc.accel_bias), sc.accel_scale, np.array(sc.mag_bias), sc.mag_scale,
                          sc.sigma_a, sc.sigma_m)


def _landmarks(sc: Scenario, rng) -> Tuple[np.ndarray, np.ndarray]:
    d0 = -R_BASE[:, 0]
    # uniform directions within a cone around d0
    n = sc.n_landmarks
    cos_min = math.cos(sc.cone_half_angle)
    z = rng.uniform(cos_min, 1.0, n)
    phi = rng.uniform(0.0, 2.0 * math.pi, n)
    s = np.sqrt(1.0 - z * z)
    local = np.column_stack([s * np.cos(phi), s * np.sin(phi), z])
    # frame with third axis d0
    e1 = R_BASE[:, 1]
    e2 = np.cross(d0, e1)
    dirs = local @ np.vstack([e1, e2, d0])
    radius = rng.uniform(sc.shell_inner, sc.shell_outer, n)
    static = dirs * radius[:, None]
    n_dyn = int(round(sc.dynamic_fraction * n))
    v = rng.normal(size=(n_dyn, 3))
    if n_dyn:
        v /= np.linalg.norm(v, axis=1, keepdims=True)
    return static, v * sc.dynamic_radius


# streams --------------------------------------------------------------------

@dataclass(eq=False)
class Simulation:
    scenario: Scenario
    truth: GroundTruth
    imu: ImuStream
    tracks: TrackStream
    ir_times: np.ndarray
    ir_poses: List[Transform]
    rig: StereoRig
    calibration: ImuCalibration
    references: WorldReferences
    # scene point followed by each track id in lens 0 / lens 1 (static
    # points first, then the dynamic cluster)
    track_point0: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    track_point1: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def frame_times_true(self) -> np.ndarray:
        return self.tracks.frame_times - self.scenario.video_offset

    def gt_poses_at_frames(self) -> List[Transform]:
        """Ground truth at the video frames, in the user frame."""
        return [self.to_user(T) for T in self.truth.poses(self.frame_times_true)]

    def to_user(self, T: Transform) -> Transform:
        """Re-express a ``C<-T`` pose in the tracker frame U where the pivot
        sits at ``scenario.pivot`` (identity for the default zero pivot)."""
        return to_user_frame(T, self.scenario.pivot)


def to_user_frame(T: Transform, pivot) -> Transform:
    p = np.asarray(pivot, dtype=float)
    return Transform(T.rotation, T.translation - T.rotation @ p, T.to_frame, T.from_frame)


def generate(sc: Scenario) -> Simulation:
    """Generate ground truth and every sensor stream of ``sc``."""
    rng = np.random.default_rng(sc.seed)
    rng_traj, rng_scene, rng_imu, rng_track, rng_ir = rng.spawn(5)
    profiles = make_profiles(sc, rng_traj)
    n_imu = int(round(sc.duration * sc.imu_rate))
    dt = 1.0 / sc.imu_rate
    ticks = np.arange(n_imu + 1) * dt
    Rt = profiles.rotation_tc(ticks)
    rates = np.array([log_so3(Rt[j].T @ Rt[j + 1]) / dt for j in range(n_imu)])
    static, dyn_local = _landmarks(sc, rng_scene)
    truth = GroundTruth(sc, profiles, ticks, Rt, rates, static, dyn_local,
                        {"imu": sc.imu_offset, "video": sc.video_offset, "ir": sc.ir_offset})
    refs = world_references()
    cal = true_calibration(sc)
    imu = _imu_stream(sc, truth, refs, rng_imu)
    rig = make_rig(sc)
    tracks, p0, p1 = _track_stream(sc, truth, rig, rng_track)
    ir_times, ir_poses = _ir_stream(sc, truth, rng_ir)
    return Simulation(sc, truth, imu, tracks, ir_times, ir_poses, rig, cal, refs, p0, p1)


def _imu_stream(sc: Scenario, truth: GroundTruth, refs: WorldReferences, rng) -> ImuStream:
    ticks = truth.tick_times[:-1]
    n = len(ticks)
    gyro = truth.tick_rates + np.asarray(sc.gyro_bias) + rng.normal(0.0, 1.0, (n, 3)) * sc.sigma_gyro
    R_ct = np.transpose(truth.tick_rotations[:-1], (0, 2, 1))
    acc_world = np.zeros((n, 3))
    if sc.motion_accel:
        h = 1e-3
        c = truth.profiles.center
        acc_world = (c(ticks + h) - 2.0 * c(ticks) + c(ticks - h)) / (h * h)
    f = np.einsum("nij,nj->ni", R_ct, acc_world - refs.gravity) / GRAVITY
    accel = f / sc.accel_scale + np.asarray(sc.accel_bias) + rng.normal(0.0, 1.0, (n, 3)) * sc.sigma_a
    m = np.einsum("nij,j->ni", R_ct, refs.magnetic)
    mag = m / sc.mag_scale + np.asarray(sc.mag_bias) + rng.normal(0.0, 1.0, (n, 3)) * sc.sigma_m
    return ImuStream(ticks + sc.imu_offset, gyro, accel, mag)


def _ir_stream(sc: Scenario, truth: GroundTruth, rng):
    n = int(round(sc.duration * sc.ir_rate))
    times = np.arange(n) / sc.ir_rate
    poses = []
    for t in times:
        T = truth.pose(float(t))
        if sc.sigma_ir_rot > 0 or sc.sigma_ir_trans > 0:
            T = Transform(exp_so3(rng.normal(0.0, sc.sigma_ir_rot, 3)) @ T.rotation,
                          T.translation + rng.normal(0.0, sc.sigma_ir_trans, 3), "C", "T")
        poses.append(to_user_frame(T, sc.pivot))
    return times + sc.ir_offset, poses


def _track_stream(sc: Scenario, truth: GroundTruth, rig: StereoRig, rng) -> TrackStream:
    n_frames = int(round(sc.duration * sc.video_rate))
    frame_times = np.arange(n_frames) / sc.video_rate
    lens_T = [rig.lens_from_body(0), rig.lens_from_body(1)]
    intr = rig.left
    n_static = len(truth.landmarks)
    ids = np.zeros(0, np.int64)
    i0 = np.zeros(0, np.int64)
    i1 = np.zeros(0, np.int64)
    drift0 = np.zeros((0, 2))
    drift1 = np.zeros((0, 2))
    last0 = np.zeros((0, 2))
    next_id = 0
    out_t, out_l, out_id, out_uv = [], [], [], []
    point0, point1 = [], []

    for t in frame_times:
        T = truth.pose(float(t))
        dyn = truth.dynamic_points(float(t))
        P = np.vstack([truth.landmarks, dyn])
        body = T.apply(P)
        cam_center = T.inverse().translation
        uv, vis = [], []
        for lens in (0, 1):
            x = lens_T[lens].apply(body)
            u, ok = project_points(x, intr)
            ok &= intr.in_image(np.nan_to_num(u, nan=-1e9), sc.border)
            if len(dyn):
                c_lens = lens_T[lens].apply(T.apply(truth.dynamic_center(float(t))))
                if c_lens[2] > 1e-6:
                    cu, _ = project_points(c_lens[None], intr)
                    rad = 1.05 * intr.fx * sc.dynamic_radius / c_lens[2]
                    inside = np.linalg.norm(np.nan_to_num(u - cu, nan=1e9), axis=1) < rad
                    behind = x[:, 2] > c_lens[2]
                    occl = inside & behind
                    occl[n_static:] = False
                    ok &= ~occl
                # only the visible hemisphere of the cluster is trackable
                normal = dyn - truth.dynamic_center(float(t))
                facing = np.einsum("ij,ij->i", cam_center - dyn, normal) > 0
                ok[n_static:] &= facing
            uv.append(u)
            vis.append(ok)

        # propagate existing tracks
        if len(ids):
            alive = vis[0][i0]
            cur = uv[0][i0]
            flow = np.linalg.norm(np.nan_to_num(cur - last0, nan=1e9), axis=1)
            alive &= flow <= sc.max_flow
            alive &= rng.random(len(ids)) >= sc.termination_rate
            ids, i0, i1 = ids[alive], i0[alive], i1[alive]
            drift0, drift1, last0 = drift0[alive], drift1[alive], uv[0][i0]
            drift0 = drift0 + rng.normal(0.0, 1.0, drift0.shape) * sc.sigma_rw
            drift1 = drift1 + rng.normal(0.0, 1.0, drift1.shape) * sc.sigma_rw

        # detect new tracks
        new_ids = np.zeros(0, np.int64)
        if len(ids) < sc.detect_min:
            taken = np.zeros(len(P), bool)
            taken[i0] = True
            cand = np.flatnonzero(vis[0] & vis[1] & ~taken)
            k = min(sc.detect_target - len(ids), len(cand))
            if k > 0:
                pick = rng.choice(cand, size=k, replace=False)
                pick.sort()
                partner = pick.copy()
                cross = rng.random(k) < sc.cross_match_rate
                pool = np.flatnonzero(vis[1])
                for j in np.flatnonzero(cross):
                    others = pool[pool != pick[j]]
                    if len(others):
                        partner[j] = others[rng.integers(len(others))]
                new_ids = np.arange(next_id, next_id + k)
                point0.append(pick)
                point1.append(partner)
                next_id += k
                ids = np.concatenate([ids, new_ids])
                i0 = np.concatenate([i0, pick])
                i1 = np.concatenate([i1, partner])
                drift0 = np.vstack([drift0, np.zeros((k, 2))])
                drift1 = np.vstack([drift1, np.zeros((k, 2))])
                last0 = np.vstack([last0, uv[0][pick]])

        if len(ids):
            m0 = uv[0][i0] + drift0 + rng.normal(0.0, 1.0, (len(ids), 2)) * sc.sigma_px
            noise1 = rng.normal(0.0, 1.0, (len(ids), 2)) * sc.sigma_px
            v1 = vis[1][i1]
            m1 = uv[1][i1] + drift1 + noise1
            stamp = float(t) + sc.video_offset
            out_t.append(np.full(len(ids), stamp))
            out_l.append(np.zeros(len(ids), np.int64))
            out_id.append(ids.copy())
            out_uv.append(m0)
            out_t.append(np.full(int(v1.sum()), stamp))
            out_l.append(np.ones(int(v1.sum()), np.int64))
            out_id.append(ids[v1])
            out_uv.append(m1[v1])

    p0 = np.concatenate(point0) if point0 else np.zeros(0, np.int64)
    p1 = np.concatenate(point1) if point1 else np.zeros(0, np.int64)
    if out_t:
        stream = TrackStream(np.concatenate(out_t), np.concatenate(out_l), np.concatenate(out_id),
                             np.vstack(out_uv), frame_times + sc.video_offset)
    else:
        stream = TrackStream(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros((0, 2)),
                             frame_times + sc.video_offset)
    return stream, p0, p1


# files ----------------------------------------------------------------------

FILES = {
    "imu": "imu.csv",
    "tracks": "tracks.csv",
    "frames": "frames.csv",
    "ir": "ir_poses.csv",
    "groundtruth": "groundtruth.csv",
    "calibration": "calibration.csv",
    "imu_calibration": "imu_calibration.csv",
}


def write_manifest(items: Dict[str, str], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v}\n")


def read_manifest(path) -> Dict[str, str]:
    out = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: line {lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def emit(sim: Simulation, directory) -> Dict[str, Path]:
    """Write every stream of ``sim`` plus a manifest into ``directory``."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {d}: {exc}") from exc
    paths = {k: d / v for k, v in FILES.items()}
    write_imu_csv(sim.imu, paths["imu"])
    write_track_csv(sim.tracks, paths["tracks"])
    write_frame_times(sim.tracks, paths["frames"])
    write_pose_csv(sim.ir_times, sim.ir_poses, paths["ir"])
    write_pose_csv(sim.tracks.frame_times, sim.gt_poses_at_frames(), paths["groundtruth"])
    write_calibration(sim.rig, paths["calibration"])
    write_imu_calibration(sim.calibration, paths["imu_calibration"])
    manifest = {"kind": "simulation"}
    manifest.update(sim.scenario.to_manifest())
    write_manifest(manifest, d / MANIFEST)
    paths["manifest"] = d / MANIFEST
    return paths


def scenario_from_directory(directory) -> Scenario:
    return Scenario.from_manifest(read_manifest(Path(directory) / MANIFEST))


def ground_truth_graph(sim: Simulation, frames=None, stride: int = 3):
    """Keyframe graph built from ground truth instead of the tracker.

    Keyframes sit on video frames ``frames`` (default every ``stride``-th,
    which coincide with IMU ticks at the default rates). Poses are the true
    poses, landmarks the true static points in their anchor frame, and
    observations every consistent track of a static point. Cross-matched
    tracks and dynamic points are left out. Used as an oracle for residual
    and optimizer checks.
    """
    from .odometry import Keyframe, KeyframeGraph
    from .residuals import Landmark, Observation
    from .sensors import correct_mag, gravity_in_body, preintegrate

    if frames is None:
        frames = range(0, len(sim.tracks), stride)
    gt = sim.gt_poses_at_frames()
    pivot = np.asarray(sim.scenario.pivot, dtype=float)
    n_static = len(sim.truth.landmarks)
    points = (sim.track_point0, sim.track_point1)
    keyframes: List = []
    landmarks: Dict[int, Landmark] = {}
    for n, f in enumerate(frames):
        ts = float(sim.tracks.frame_times[f])
        T = gt[f]
        obs = []
        for lens in (0, 1):
            ids, uv = sim.tracks.lens_rows(f, lens)
            for i, p in zip(ids, uv):
                i = int(i)
                pt = int(points[lens][i])
                if pt >= n_static or sim.track_point0[i] != sim.track_point1[i]:
                    continue
                if i not in landmarks:
                    landmarks[i] = Landmark(i, n, T.apply(sim.truth.landmarks[pt] + pivot))
                obs.append(Observation(i, n, lens, np.asarray(p, dtype=float)))
        j = sim.imu.nearest(ts)
        link = preintegrate(sim.imu, keyframes[-1].timestamp, ts) if keyframes else None
        keyframes.append(Keyframe(n, ts, int(f), T, obs, link,
                                  gravity_in_body(sim.imu.accel[j], sim.calibration),
                                  correct_mag(sim.imu.mag[j], sim.calibration)))
    return KeyframeGraph(keyframes, landmarks, sim.rig, sim.references, pivot_known=True)
