"""Independent oracles shared by the unit tests and the acceptance suite."""

import numpy as np

from pivotvio.camera import CameraIntrinsics, StereoRig
from pivotvio.geometry import Transform, exp_so3
from pivotvio.residuals import (KINDS, ReprojMeasurement, ResidualBlock, VectorMeasurement,
                                numeric_jacobians, residual_jacobians)
from pivotvio.sensors import GRAVITY, MAGNETIC_FIELD

MOUNT = Transform(np.column_stack([[0, 0, 1.0], [0, 1.0, 0], [-1.0, 0, 0]]), np.zeros(3), "C", "C0")


def test_rig(baseline=0.005) -> StereoRig:
    intr = CameraIntrinsics(1000.0, 1000.0, 960.0, 540.0, -0.1, 0.02)
    return StereoRig(intr, intr, Transform(exp_so3([0.002, -0.001, 0.003]), [baseline, 0, 0], "C0", "C1"),
                     MOUNT)


test_rig.__test__ = False


def random_pose(rng, scale=0.1) -> Transform:
    return Transform(exp_so3(rng.uniform(-np.pi, np.pi, 3) * 0.55), rng.normal(0, scale, 3), "C", "T")


def random_block(kind: str, rng, rig: StereoRig):
    """A block of ``kind`` with random measurement and a pose map that keeps
    every projected point in front of its lens."""
    T1 = random_pose(rng)
    if kind == "pivot":
        return ResidualBlock(kind, (0,)), {0: T1}
    if kind == "accel":
        g = rng.normal(size=3)
        m = VectorMeasurement(rng.normal(size=3) * GRAVITY, g / np.linalg.norm(g) * GRAVITY)
        return ResidualBlock(kind, (0,), m), {0: T1}
    if kind == "mag":
        b = rng.normal(size=3)
        m = VectorMeasurement(rng.normal(size=3) * 30, b / np.linalg.norm(b) * MAGNETIC_FIELD)
        return ResidualBlock(kind, (0,), m), {0: T1}
    if kind == "gyro":
        T2 = T1.retract(np.concatenate([rng.normal(0, 0.3, 3), rng.normal(0, 0.01, 3)]))
        return ResidualBlock(kind, (0, 1), exp_so3(rng.normal(0, 0.3, 3))), {0: T1, 1: T2}
    lens = int(rng.integers(2))
    # point in front of the observer's lens, expressed in the anchor body
    T_obs = T1
    T_anc = T_obs.retract(np.concatenate([rng.normal(0, 0.1, 3), rng.normal(0, 0.005, 3)]))
    x_lens = np.array([rng.uniform(-0.03, 0.03), rng.uniform(-0.02, 0.02), rng.uniform(0.05, 0.2)])
    x_body = rig.lens_from_body(lens).inverse().apply(x_lens)
    point = T_anc.apply(T_obs.inverse().apply(x_body))
    pixel = rng.uniform([0, 0], [1920, 1080])
    m = ReprojMeasurement(point, pixel, lens, rig)
    return ResidualBlock(kind, (0, 1), m), {0: T_obs, 1: T_anc}


def jacobian_errors(n: int = 1000, seed: int = 0, h: float = 1e-6):
    """Worst relative error between analytic and central-difference Jacobians
    per residual kind over ``n`` random configurations each."""
    rng = np.random.default_rng(seed)
    rig = test_rig()
    worst = {}
    for kind in KINDS:
        w = 0.0
        for _ in range(n):
            block, poses = random_block(kind, rng, rig)
            for Ja, Jn in zip(residual_jacobians(block, poses), numeric_jacobians(block, poses, h)):
                w = max(w, np.linalg.norm(Ja - Jn) / max(np.linalg.norm(Jn), 1e-12))
        worst[kind] = w
    return worst


def pnp_trial(rng, rig: StereoRig, n: int = 100, outlier_rate: float = 0.3, sigma_px: float = 1.0,
              init_rot: float = 0.035, init_trans: float = 0.002):
    """One synthetic PnP problem around a pivot-like camera pose.

    Returns ``(T_true, X, pixels, lens, init, outlier_mask)``. Outliers are
    replaced by uniformly random pixels.
    """
    from pivotvio.camera import project_points
    from pivotvio.geometry import PivotPose, expand_pivot

    T = expand_pivot(PivotPose(rng.uniform(0.05, 0.12), exp_so3(rng.normal(0, 1.0, 3))), "C", "T")
    lens = rng.integers(0, 2, n)
    x_lens = np.column_stack([rng.uniform(-0.6, 0.6, n), rng.uniform(-0.35, 0.35, n), np.ones(n)])
    x_lens *= rng.uniform(0.08, 0.2, n)[:, None]
    X = np.empty((n, 3))
    uv = np.empty((n, 2))
    for ln in (0, 1):
        m = lens == ln
        L = rig.lens_from_body(ln)
        X[m] = T.inverse().apply(L.inverse().apply(x_lens[m]))
        uv[m] = project_points(x_lens[m], rig.intrinsics(ln))[0]
    uv += rng.normal(0, sigma_px, uv.shape)
    out = rng.random(n) < outlier_rate
    uv[out] = rng.uniform([0, 0], [1920, 1080], (int(out.sum()), 2))
    xi = np.concatenate([rng.normal(0, 1, 3), rng.normal(0, 1, 3)])
    xi[:3] *= init_rot / np.linalg.norm(xi[:3])
    xi[3:] *= init_trans / np.linalg.norm(xi[3:])
    return T, X, uv, lens, T.retract(xi), out
