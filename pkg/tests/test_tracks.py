import dataclasses

import numpy as np
import pytest

from pivotvio import simulator
from pivotvio.camera import project_points
from pivotvio.tracks import (StreamGapError, TrackStream, advance_tracks, first_frame, read_track_csv,
                             write_frame_times, write_track_csv)


def stream(times, rows):
    t, ln, ids, uv = zip(*rows)
    return TrackStream(np.array(t), np.array(ln), np.array(ids), np.array(uv), np.array(times))


def test_static_camera_zero_drift_identical_positions():
    rows = [(t, ln, i, (100.0 + i, 200.0)) for t in (0.0, 0.1, 0.2) for ln in (0, 1) for i in range(5)]
    s = stream([0.0, 0.1, 0.2], rows)
    f = first_frame(s)
    for _ in range(2):
        g = advance_tracks(f, s)
        for ln in (0, 1):
            assert np.array_equal(g.ids[ln], f.ids[ln]) and np.array_equal(g.uv[ln], f.uv[ln])
        f = g
    assert all(a == 2 for a in f.ages.values())


def test_missing_track_is_removed_and_dropped_ids_filtered():
    rows = [(0.0, 0, 1, (1.0, 1.0)), (0.0, 0, 2, (2.0, 2.0)), (0.0, 0, 3, (3.0, 3.0)),
            (0.1, 0, 1, (1.0, 1.0)), (0.1, 0, 3, (3.0, 3.0))]
    s = stream([0.0, 0.1], rows)
    f = advance_tracks(first_frame(s), s, drop={3})
    assert f.ids[0].tolist() == [1] and list(f.ages) == [1]


def test_stream_gap_error():
    s = stream([0.0, 1.0], [(0.0, 0, 1, (1.0, 1.0)), (1.0, 0, 1, (1.0, 1.0))])
    with pytest.raises(StreamGapError):
        advance_tracks(first_frame(s), s, max_gap=0.5)


def test_frames_without_tracks_are_kept(tmp_path):
    s = stream([0.0, 0.05, 0.1], [(0.0, 0, 1, (1.0, 1.0)), (0.1, 0, 1, (1.5, 1.0))])
    assert len(s) == 3 and len(s.rows(1)[1]) == 0
    write_track_csv(s, tmp_path / "t.csv")
    write_frame_times(s, tmp_path / "f.csv")
    back = read_track_csv(tmp_path / "t.csv", tmp_path / "f.csv")
    assert np.array_equal(back.frame_times, s.frame_times) and np.array_equal(back.uv, s.uv)


def test_read_track_csv_rejects_bad_header(tmp_path):
    (tmp_path / "t.csv").write_text("time,lens\n")
    with pytest.raises(ValueError):
        read_track_csv(tmp_path / "t.csv")


def test_out_of_frustum_landmark_removed():
    sim = simulator.generate(simulator.preset("pure-rotation", duration=2.0).noiseless())
    ids_seen = [set(sim.tracks.lens_rows(f, 0)[0].tolist()) for f in range(len(sim.tracks))]
    rig = sim.rig
    for f in range(1, len(sim.tracks)):
        lost = ids_seen[f - 1] - ids_seen[f]
        T = sim.truth.pose(float(sim.tracks.frame_times[f]))
        for i in lost:
            x = rig.lens_from_body(0).apply(T.apply(sim.truth.landmarks[sim.track_point0[i]]))
            uv, ok = project_points(x[None], rig.left)
            # a noiseless track only ends when its point leaves the image
            assert not (ok[0] and rig.left.in_image(uv, sim.scenario.border)[0])


def test_drift_variance_grows_linearly():
    sc = dataclasses.replace(simulator.preset("pure-rotation", duration=4.0).noiseless(), sigma_rw=0.2)
    sim = simulator.generate(sc)
    rig = sim.rig
    first_seen, err_by_age = {}, {}
    for f in range(len(sim.tracks)):
        ids, uv = sim.tracks.lens_rows(f, 0)
        T = sim.truth.pose(float(sim.tracks.frame_times[f]))
        X = rig.lens_from_body(0).apply(T.apply(sim.truth.landmarks[sim.track_point0[ids]]))
        true_uv, _ = project_points(X, rig.left)
        for i, e in zip(ids, uv - true_uv):
            age = f - first_seen.setdefault(int(i), f)
            err_by_age.setdefault(age, []).append(e)
    ages = np.array([a for a in sorted(err_by_age) if 5 <= a <= 60 and len(err_by_age[a]) >= 100])
    var = np.array([np.var(np.array(err_by_age[a])) for a in ages])
    slope, intercept = np.polyfit(ages, var, 1)
    # per-component variance of a random walk with 0.2 px steps: 0.04 k
    assert abs(slope - 0.04) < 0.01
    assert np.corrcoef(ages, var)[0, 1] > 0.95
