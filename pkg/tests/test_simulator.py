import math

import numpy as np
import pytest

from pivotvio import simulator
from pivotvio.camera import parse_calibration
from pivotvio.evaluation import graph_residuals
from pivotvio.residuals import r_pivot
from pivotvio.sensors import (correct_accel, integrate_gyro, read_imu_calibration, read_imu_csv,
                              read_pose_csv)
from pivotvio.simulator import Scenario, emit, generate, preset, scenario_from_directory
from pivotvio.tracks import read_track_csv

PRESETS = ["pure-rotation", "inward-motion", "fast-sweep-occlusion", "calibration-wand"]


def short(name, **kw):
    return preset(name, duration=3.0, **kw)


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario(imu_rate=0.0)
    with pytest.raises(ValueError):
        Scenario(dynamic_fraction=1.0)
    with pytest.raises(ValueError):
        preset("nope")


def test_default_sizes():
    sc = Scenario()
    assert round(sc.duration * sc.imu_rate) == 13200
    assert round(sc.duration * sc.video_rate) == 3600


def test_stream_sizes_short():
    sim = generate(short("pure-rotation"))
    assert len(sim.imu) == 660
    assert len(sim.tracks) == 180
    assert len(sim.ir_times) == 60


def test_deterministic():
    a = generate(short("fast-sweep-occlusion"))
    b = generate(short("fast-sweep-occlusion"))
    assert np.array_equal(a.imu.gyro, b.imu.gyro)
    assert np.array_equal(a.tracks.uv, b.tracks.uv)
    c = generate(short("fast-sweep-occlusion", seed=99))
    assert not np.array_equal(a.imu.gyro, c.imu.gyro)


@pytest.mark.parametrize("name", PRESETS)
def test_truth_satisfies_pivot_constraint(name):
    sim = generate(short(name))
    for T in sim.truth.poses(np.linspace(0, 3.0, 301)):
        assert np.max(np.abs(r_pivot(T))) < 1e-15


@pytest.mark.parametrize("name", PRESETS[:3])
def test_ground_truth_residuals_vanish(name):
    sim = generate(short(name).noiseless())
    res = graph_residuals(simulator.ground_truth_graph(sim))
    for kind, rows in res.items():
        assert len(rows) > 0
        assert max(np.max(np.abs(r)) for r in rows) < 1e-9, kind


def test_static_noiseless_streams_constant():
    sc = Scenario(duration=1.0, pan_amplitude=0.0, tilt_amplitude=0.0, roll_amplitude=0.0).noiseless()
    sim = generate(sc)
    assert np.ptp(sim.imu.gyro, axis=0).max() == 0.0
    assert np.ptp(sim.imu.accel, axis=0).max() < 1e-12
    assert np.ptp(sim.imu.mag, axis=0).max() < 1e-12
    first = dict(zip(*sim.tracks.lens_rows(0, 0)))
    last = dict(zip(*sim.tracks.lens_rows(len(sim.tracks) - 1, 0)))
    common = set(first) & set(last)
    assert len(common) > 50
    assert max(np.max(np.abs(first[i] - last[i])) for i in common) < 1e-9


def test_noiseless_gyro_reproduces_orientation():
    sim = generate(short("pure-rotation").noiseless())
    dt = 1.0 / sim.scenario.imu_rate
    pre = integrate_gyro(sim.imu.gyro, dt)
    R0 = sim.truth.pose(0.0).rotation
    R1 = sim.truth.pose(len(sim.imu) * dt).rotation
    # body delta rotation over the stream: R_TC(end) = R_TC(0) dR, with R = R_CT below
    E = R1 @ R0.T @ pre.delta_rotation
    assert np.linalg.norm(E - np.eye(3)) < 1e-6


def test_corrected_accel_is_gravity():
    sim = generate(preset("calibration-wand", duration=10.0))
    still = np.linalg.norm(sim.imu.gyro, axis=1) < 0.05
    g = np.linalg.norm(correct_accel(sim.imu.accel[still], sim.calibration), axis=1)
    assert abs(g.mean() - 1.0) < 3 * 0.01


def test_gyro_noise_variance():
    sc = Scenario(duration=60.0, n_landmarks=200)
    noisy = generate(sc)
    clean = generate(sc.noiseless())
    e = (noisy.imu.gyro - clean.imu.gyro).ravel()
    assert len(e) >= 10_000
    assert abs(e.var() / sc.sigma_gyro ** 2 - 1) < 0.2


def test_emit_round_trip(tmp_path):
    sim = generate(short("fast-sweep-occlusion"))
    paths = emit(sim, tmp_path)
    imu = read_imu_csv(paths["imu"])
    assert np.array_equal(imu.timestamps, sim.imu.timestamps)
    assert np.array_equal(imu.gyro, sim.imu.gyro)
    assert np.array_equal(imu.accel, sim.imu.accel)
    assert np.array_equal(imu.mag, sim.imu.mag)
    tr = read_track_csv(paths["tracks"], paths["frames"])
    assert np.array_equal(tr.uv, sim.tracks.uv)
    assert np.array_equal(tr.ids, sim.tracks.ids)
    assert np.array_equal(tr.frame_times, sim.tracks.frame_times)
    times, poses = read_pose_csv(paths["ir"])
    assert np.array_equal(times, sim.ir_times)
    assert all(np.array_equal(a.matrix(), b.matrix()) for a, b in zip(poses, sim.ir_poses))
    rig = parse_calibration(paths["calibration"])
    assert rig.baseline == pytest.approx(sim.rig.baseline, abs=1e-15)
    cal = read_imu_calibration(paths["imu_calibration"])
    assert np.array_equal(cal.accel_bias, sim.calibration.accel_bias)
    assert scenario_from_directory(tmp_path) == sim.scenario


def test_manifest_regenerates_identical_files(tmp_path):
    emit(generate(short("inward-motion")), tmp_path / "a")
    emit(generate(scenario_from_directory(tmp_path / "a")), tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_emit_reports_bad_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit(generate(Scenario(duration=0.5, n_landmarks=100)), blocker / "sub")
