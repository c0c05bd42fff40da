"""Feature-track streams (simulated or read from a track CSV) and the
per-frame track state consumed by the odometry loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

TRACK_COLUMNS = ["timestamp_s", "lens", "landmark_id", "u", "v"]


class StreamGapError(RuntimeError):
    pass


@dataclass(eq=False)
class TrackStream:
    """Flat track table sorted by (time, lens, id).

    ``frame_times`` lists every video frame, including frames without tracks.
    """

    timestamps: np.ndarray
    lens: np.ndarray
    ids: np.ndarray
    uv: np.ndarray
    frame_times: Optional[np.ndarray] = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.lens = np.asarray(self.lens, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)
        order = np.lexsort((self.ids, self.lens, self.timestamps))
        if np.any(order != np.arange(len(order))):
            self.timestamps, self.lens = self.timestamps[order], self.lens[order]
            self.ids, self.uv = self.ids[order], self.uv[order]
        if self.frame_times is None:
            self.frame_times = np.unique(self.timestamps)
        self.frame_times = np.asarray(self.frame_times, dtype=float)
        self._starts = np.searchsorted(self.timestamps, self.frame_times, side="left")
        self._ends = np.searchsorted(self.timestamps, self.frame_times, side="right")

    def __len__(self) -> int:
        return len(self.frame_times)

    def rows(self, frame: int):
        s, e = self._starts[frame], self._ends[frame]
        return self.lens[s:e], self.ids[s:e], self.uv[s:e]

    def lens_rows(self, frame: int, lens: int):
        ln, ids, uv = self.rows(frame)
        m = ln == lens
        return ids[m], uv[m]

    def shifted(self, dt: float) -> "TrackStream":
        return TrackStream(self.timestamps + dt, self.lens, self.ids, self.uv, self.frame_times + dt)


@dataclass
class TrackFrame:
    """Track positions of one video frame.

    ``ages`` counts frames since each track was last observed at a keyframe
    (or since it appeared).
    """

    index: int
    timestamp: float
    ids: Dict[int, np.ndarray] = field(default_factory=dict)  # lens -> (n,)
    uv: Dict[int, np.ndarray] = field(default_factory=dict)  # lens -> (n, 2)
    ages: Dict[int, int] = field(default_factory=dict)

    def lookup(self, lens: int) -> Dict[int, np.ndarray]:
        return {int(i): p for i, p in zip(self.ids.get(lens, ()), self.uv.get(lens, ()))}

    def stereo_ids(self) -> np.ndarray:
        return np.intersect1d(self.ids.get(0, np.empty(0, np.int64)), self.ids.get(1, np.empty(0, np.int64)))

    def reset_ages(self, track_ids) -> None:
        for i in track_ids:
            if int(i) in self.ages:
                self.ages[int(i)] = 0


def first_frame(stream: TrackStream) -> TrackFrame:
    return _frame(stream, 0, {})


def _frame(stream: TrackStream, index: int, prev_ages: Dict[int, int]) -> TrackFrame:
    ln, ids, uv = stream.rows(index)
    frame = TrackFrame(index, float(stream.frame_times[index]))
    for lens in (0, 1):
        m = ln == lens
        frame.ids[lens] = ids[m]
        frame.uv[lens] = uv[m]
    present = np.union1d(frame.ids[0], frame.ids[1])
    frame.ages = {int(i): prev_ages.get(int(i), -1) + 1 for i in present}
    return frame


def advance_tracks(prev: TrackFrame, stream: TrackStream, max_gap: float = 0.5,
                   drop=frozenset()) -> TrackFrame:
    """Next frame of ``stream`` after ``prev``.

    Tracks missing from the new frame are terminated; ids in ``drop``
    (rejected as outliers) are filtered out. Raises :class:`StreamGapError`
    if consecutive frames are more than ``max_gap`` seconds apart.
    """
    index = prev.index + 1
    if index >= len(stream):
        raise IndexError("track stream exhausted")
    t = float(stream.frame_times[index])
    if t - prev.timestamp > max_gap:
        raise StreamGapError(f"track stream gap of {t - prev.timestamp:.3f} s at t={t:.3f}")
    frame = _frame(stream, index, prev.ages)
    if drop:
        for lens in (0, 1):
            keep = np.array([int(i) not in drop for i in frame.ids[lens]], dtype=bool)
            frame.ids[lens] = frame.ids[lens][keep]
            frame.uv[lens] = frame.uv[lens][keep]
        frame.ages = {i: a for i, a in frame.ages.items() if i not in drop}
    return frame


def write_track_csv(stream: TrackStream, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACK_COLUMNS)
        for t, ln, i, (u, v) in zip(stream.timestamps, stream.lens, stream.ids, stream.uv):
            w.writerow([repr(float(t)), int(ln), int(i), repr(float(u)), repr(float(v))])


def write_frame_times(stream: TrackStream, path) -> None:
    np.savetxt(path, stream.frame_times, fmt="%.17g", header="timestamp_s", comments="")


def read_track_csv(path, frame_times_path=None) -> TrackStream:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRACK_COLUMNS:
            raise ValueError(f"{path}: header must be {','.join(TRACK_COLUMNS)}")
        t, ln, ids, uv = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                t.append(float(row[0]))
                ln.append(int(row[1]))
                ids.append(int(row[2]))
                uv.append((float(row[3]), float(row[4])))
            except (ValueError, IndexError):
                raise ValueError(f"{path}: row {lineno}: malformed track row") from None
    frame_times = None
    if frame_times_path is not None and Path(frame_times_path).exists():
        frame_times = np.atleast_1d(np.loadtxt(frame_times_path, skiprows=1))
    return TrackStream(np.array(t), np.array(ln), np.array(ids), np.array(uv), frame_times)
