import math
from pathlib import Path

import numpy as np
import pytest

from pivotvio import simulator
from pivotvio.camera import (BehindCameraError, CalibrationParseError, CameraError, CameraIntrinsics,
                             DegenerateGeometryError, StereoRig, UndistortionError, epipolar_error,
                             essential_matrix, parse_calibration, project, project_jacobian, project_points,
                             triangulate, undistort_normalized, unproject, unproject_points,
                             write_calibration)
from pivotvio.geometry import Transform, exp_so3, hat

DATA = Path(__file__).resolve().parents[1] / "data"
INTR = CameraIntrinsics(1000.0, 1000.0, 960.0, 540.0, -0.1, 0.02)


def rig(baseline=0.005, rot=np.zeros(3)):
    mount = Transform(np.column_stack([[0, 0, 1.0], [0, 1.0, 0], [-1.0, 0, 0]]), np.zeros(3), "C", "C0")
    return StereoRig(INTR, INTR, Transform(exp_so3(rot), [baseline, 0, 0], "C0", "C1"), mount)


def test_project_examples():
    plain = CameraIntrinsics(400.0, 400.0, 320.0, 240.0, width=640, height=480)
    assert np.allclose(project([0, 0, 1], INTR), [960, 540])
    assert math.isclose(project([1, 0, 2], plain)[0], 520.0)
    with pytest.raises(BehindCameraError):
        project([0, 0, -1], INTR)


def test_project_matches_scalar_distortion_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.3, 0.3), 1.0]) * rng.uniform(0.05, 2.0)
        a, b = x[0] / x[2], x[1] / x[2]
        r2 = a * a + b * b
        s = 1 + INTR.k1 * r2 + INTR.k2 * r2 ** 2
        expect = (INTR.fx * a * s + INTR.cx, INTR.fy * b * s + INTR.cy)
        assert np.allclose(project(x, INTR), expect, atol=1e-9)


def test_project_points_flags_points_behind():
    uv, ok = project_points(np.array([[0, 0, 1.0], [0, 0, -1.0]]), INTR)
    assert ok.tolist() == [True, False] and np.isnan(uv[1]).all()


def test_project_jacobian_numeric():
    rng = np.random.default_rng(1)
    X = np.column_stack([rng.uniform(-0.05, 0.05, (20, 2)), rng.uniform(0.05, 0.2, 20)])
    J = project_jacobian(X, INTR)
    h = 1e-7
    for k in range(3):
        d = np.zeros(3)
        d[k] = h
        num = (project_points(X + d, INTR)[0] - project_points(X - d, INTR)[0]) / (2 * h)
        assert np.allclose(J[:, :, k], num, rtol=1e-6, atol=1e-3)


def test_unproject_examples():
    assert np.allclose(unproject([960, 540], INTR), [0, 0, 1])
    plain = CameraIntrinsics(800.0, 700.0, 960.0, 540.0)
    uv = np.array([1200.0, 300.0])
    closed = np.array([(uv[0] - 960) / 800, (uv[1] - 540) / 700, 1.0])
    assert np.array_equal(undistort_normalized(uv, plain), closed[:2])
    assert np.allclose(unproject(uv, plain), closed / np.linalg.norm(closed), atol=0)


@pytest.mark.parametrize("k1,k2", [(-0.3, -0.1), (-0.3, 0.1), (0.3, 0.1), (0.3, -0.1), (-0.1, 0.02)])
def test_round_trip_full_image(k1, k2):
    # focal length chosen so the whole image stays inside the invertible
    # radius of the strongest barrel distortion
    intr = CameraIntrinsics(1800.0, 1800.0, 960.0, 540.0, k1, k2)
    rng = np.random.default_rng(2)
    uv = np.column_stack([rng.uniform(0, 1919, 1000), rng.uniform(0, 1079, 1000)])
    b = unproject_points(uv, intr)
    for lam in (0.01, 1.0):
        back, ok = project_points(lam * b, intr)
        assert ok.all()
        assert np.abs(back - uv).max() < 1e-6
    single = np.array([unproject(p, intr) for p in uv[:50]])
    assert np.allclose(single, b[:50], atol=1e-12)


def test_undistortion_failure_is_reported():
    intr = CameraIntrinsics(300.0, 300.0, 960.0, 540.0, -0.3, -0.1)
    with pytest.raises(UndistortionError):
        undistort_normalized([1900.0, 1000.0], intr)


def test_essential_matrix_pure_translation():
    R = rig(baseline=1.0)
    assert np.allclose(essential_matrix(R), hat([1, 0, 0]))


def test_epipolar_consistent_pair_is_zero():
    R = rig(rot=np.array([0.01, -0.02, 0.005]))
    rng = np.random.default_rng(3)
    for _ in range(100):
        X0 = np.array([rng.uniform(-0.03, 0.03), rng.uniform(-0.02, 0.02), rng.uniform(0.05, 0.2)])
        X1 = R.extrinsic.inverse().apply(X0)
        e = epipolar_error(X0 / np.linalg.norm(X0), X1 / np.linalg.norm(X1), R)
        assert abs(e) < 1e-12


def test_epipolar_noise_is_zero_mean():
    R = rig()
    rng = np.random.default_rng(4)
    X0 = np.column_stack([rng.uniform(-0.03, 0.03, 10_000), rng.uniform(-0.02, 0.02, 10_000),
                          rng.uniform(0.05, 0.2, 10_000)])
    X1 = R.extrinsic.inverse().apply(X0)
    u0 = project_points(X0, INTR)[0] + rng.normal(0, 0.5, (10_000, 2))
    u1 = project_points(X1, INTR)[0] + rng.normal(0, 0.5, (10_000, 2))
    b0, b1 = unproject_points(u0, INTR), unproject_points(u1, INTR)
    e = np.einsum("ij,jk,ik->i", b0, essential_matrix(R), b1)
    assert abs(e.mean()) < 0.1 * e.std()


def test_epipolar_rejects_mismatched_simulator_pairs():
    sim = simulator.generate(simulator.preset("pure-rotation", duration=0.2).noiseless())
    R = sim.rig
    ids0, uv0 = sim.tracks.lens_rows(0, 0)
    ids1, uv1 = sim.tracks.lens_rows(0, 1)
    common, a, b = np.intersect1d(ids0, ids1, return_indices=True)
    rng = np.random.default_rng(5)
    perm = rng.permutation(len(b))
    mism = perm != np.arange(len(b))
    x0 = unproject_points(uv0[a][mism], R.left)
    x1 = unproject_points(uv1[b][perm][mism], R.right)
    e = np.abs(np.einsum("ij,jk,ik->i", x0, essential_matrix(R), x1))
    # threshold: about 4 sigma of the value produced by 0.5 px pixel noise
    # on a consistent pair (sigma ~ sqrt(2) * 0.5 / f)
    assert np.mean(e > 3e-3) >= 0.95


def test_triangulate_noiseless_recovers_point():
    R = rig()
    rng = np.random.default_rng(6)
    for _ in range(200):
        X0 = np.array([rng.uniform(-0.03, 0.03), rng.uniform(-0.02, 0.02), rng.uniform(0.05, 0.25)])
        X1 = R.extrinsic.inverse().apply(X0)
        P = triangulate(project(X0, INTR), project(X1, INTR), R)
        assert np.linalg.norm(P - X0) < 1e-6


def test_triangulate_degenerate_on_baseline_axis():
    R = rig()
    far = np.array([0.0, 0.0, 1e5])
    with pytest.raises(DegenerateGeometryError):
        triangulate(project(far, INTR), project(far - [0.005, 0, 0], INTR), R)


def test_triangulation_depth_error_regression():
    # 1 px noise, 10 cm depth, 5 mm baseline: first-order depth std is
    # z^2 * sqrt(2) * sigma / (f * b) = 2.8 mm; the median absolute error of
    # this seed is about 1.9 mm
    R = rig()
    rng = np.random.default_rng(7)
    errs = []
    for _ in range(2000):
        X0 = np.array([rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02), 0.1])
        X1 = R.extrinsic.inverse().apply(X0)
        u0 = project(X0, INTR) + rng.normal(0, 1.0, 2)
        u1 = project(X1, INTR) + rng.normal(0, 1.0, 2)
        try:
            errs.append(abs(triangulate(u0, u1, R)[2] - 0.1))
        except DegenerateGeometryError:
            pass
    med = float(np.median(errs))
    assert 1.0e-3 < med < 3.0e-3


def test_calibration_round_trip(tmp_path):
    R = rig(rot=np.array([0.001, 0.002, -0.003]))
    write_calibration(R, tmp_path / "cal.csv")
    P = parse_calibration(tmp_path / "cal.csv")
    assert P.left == R.left and P.right == R.right
    assert P.extrinsic.allclose(R.extrinsic, atol=0) and P.mount.allclose(R.mount, atol=0)


def test_calibration_missing_column_named(tmp_path):
    text = (DATA / "sample_calibration.csv").read_text().splitlines()
    (tmp_path / "bad.csv").write_text("\n".join(l for l in text if not l.startswith("fx0,")) + "\n")
    with pytest.raises(CalibrationParseError, match="f_x"):
        parse_calibration(tmp_path / "bad.csv")


def test_calibration_non_numeric_cell_named(tmp_path):
    text = (DATA / "sample_calibration.csv").read_text().replace("cy1,540.0", "cy1,abc")
    (tmp_path / "bad.csv").write_text(text)
    with pytest.raises(CalibrationParseError, match=r"row \d+ column 'cy1'"):
        parse_calibration(tmp_path / "bad.csv")


def test_sample_calibration_documented_values():
    R = parse_calibration(DATA / "sample_calibration.csv")
    assert (R.left.fx, R.left.fy, R.left.cx, R.left.cy) == (1000.0, 1000.0, 960.0, 540.0)
    assert (R.left.k1, R.left.k2) == (-0.1, 0.02)
    assert math.isclose(R.baseline, 0.005)
    # optical axis of the left lens is -x of the body
    assert np.allclose(R.mount.rotation @ [0, 0, 1], [-1, 0, 0])


def test_intrinsics_validation():
    with pytest.raises(CameraError):
        CameraIntrinsics(0.0, 1.0, 1.0, 1.0)
    with pytest.raises(CameraError):
        CameraIntrinsics(1.0, 1.0, 5000.0, 1.0)
    with pytest.raises(CameraError):
        StereoRig(INTR, INTR, Transform(), Transform())
