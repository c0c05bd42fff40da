"""IMU measurement models, sphere calibration, gyro preintegration and
time-offset estimation.

Accelerometer readings are in units of g (9.81 m/s^2), magnetometer readings
in microtesla. The IMU axes coincide with the camera body frame C.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .geometry import Transform, exp_so3, log_se3, normalize_rotation

log = logging.getLogger(__name__)

GRAVITY = 9.81  # m/s^2
MAGNETIC_FIELD = 48.6  # microtesla
IMU_COLUMNS = ["timestamp_s", "wx", "wy", "wz", "ax", "ay", "az", "mx", "my", "mz"]


class SensorError(ValueError):
    pass


class RankDeficiencyError(SensorError):
    pass


class NoOverlapError(SensorError):
    pass


class ImuSample(NamedTuple):
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray
    mag: np.ndarray


@dataclass(eq=False)
class ImuStream:
    """Column arrays of one IMU stream; timestamps strictly increasing."""

    timestamps: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray
    mag: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        self.mag = np.asarray(self.mag, dtype=float).reshape(-1, 3)
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise SensorError("IMU timestamps must be strictly increasing")
        self._period = float(np.median(np.diff(self.timestamps))) if len(self.timestamps) > 1 else 0.0

    def __len__(self) -> int:
        return len(self.timestamps)

    def __getitem__(self, i: int) -> ImuSample:
        return ImuSample(float(self.timestamps[i]), self.gyro[i], self.accel[i], self.mag[i])

    @property
    def period(self) -> float:
        return self._period

    def shifted(self, dt: float) -> "ImuStream":
        return ImuStream(self.timestamps + dt, self.gyro, self.accel, self.mag)

    def nearest(self, t: float) -> int:
        i = int(np.searchsorted(self.timestamps, t))
        if i <= 0:
            return 0
        if i >= len(self.timestamps):
            return len(self.timestamps) - 1
        return i if self.timestamps[i] - t < t - self.timestamps[i - 1] else i - 1


@dataclass(frozen=True)
class ImuCalibration:
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_scale: float = 1.0
    mag_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mag_scale: float = 1.0
    sigma_a: float = 0.0
    sigma_m: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "accel_bias", np.asarray(self.accel_bias, dtype=float).reshape(3))
        object.__setattr__(self, "mag_bias", np.asarray(self.mag_bias, dtype=float).reshape(3))
        if self.accel_scale <= 0 or self.mag_scale <= 0:
            raise SensorError("calibration scales must be positive")


@dataclass(frozen=True)
class WorldReferences:
    """Gravity (m/s^2) and magnetic field (uT) in the trocar frame T."""

    gravity: np.ndarray
    magnetic: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gravity, dtype=float).reshape(3)
        m = np.asarray(self.magnetic, dtype=float).reshape(3)
        object.__setattr__(self, "gravity", g / np.linalg.norm(g) * GRAVITY)
        object.__setattr__(self, "magnetic", m / np.linalg.norm(m) * MAGNETIC_FIELD)


@dataclass(frozen=True, eq=False)
class PreintegratedGyro:
    delta_rotation: np.ndarray
    t_start: float
    t_end: float
    count: int

    @property
    def span(self) -> float:
        return self.t_end - self.t_start


def correct_accel(accel, cal: ImuCalibration) -> np.ndarray:
    """Inverse of the accelerometer model: ``(a_meas - b_a) * d_a`` in g."""
    return (np.asarray(accel, dtype=float) - cal.accel_bias) * cal.accel_scale


def correct_mag(mag, cal: ImuCalibration) -> np.ndarray:
    return (np.asarray(mag, dtype=float) - cal.mag_bias) * cal.mag_scale


def gravity_in_body(accel, cal: ImuCalibration) -> np.ndarray:
    """Gravity vector in C (m/s^2) under the constant-velocity assumption.

    The accelerometer senses ``a - g``; with ``a = 0`` the gravity estimate is
    minus the corrected reading.
    """
    return -GRAVITY * correct_accel(accel, cal)


def fit_sphere_calibration(samples, radius: float, max_iter: int = 50) -> Tuple[np.ndarray, float, float]:
    """Fit ``|(s - b) d| = radius``.

    Returns ``(bias, scale, rms)`` where ``rms`` is the root-mean-square of
    ``|(s - b) d| - radius``.
    """
    S = np.asarray(samples, dtype=float).reshape(-1, 3)
    if len(S) < 10:
        raise RankDeficiencyError("sphere fit needs at least 10 samples")
    # algebraic init: |s|^2 = 2 s.c + k
    A = np.hstack([2.0 * S, np.ones((len(S), 1))])
    y = np.sum(S * S, axis=1)
    spread = np.linalg.svd(S - S.mean(axis=0), compute_uv=False)
    if spread[-1] <= 1e-9 * max(spread[0], 1e-300):
        raise RankDeficiencyError("samples are coplanar; sphere is not determined")
    sol, *_ = np.linalg.lstsq(A, y, rcond=None)
    b = sol[:3]
    r2 = sol[3] + b @ b
    if r2 <= 0:
        raise RankDeficiencyError("algebraic sphere fit failed")
    d = radius / np.sqrt(r2)

    # Gauss-Newton on x = (b, d)
    for _ in range(max_iter):
        diff = S - b
        n = np.linalg.norm(diff, axis=1)
        res = n * d - radius
        J = np.empty((len(S), 4))
        J[:, :3] = -d * diff / n[:, None]
        J[:, 3] = n
        step, *_ = np.linalg.lstsq(J, -res, rcond=None)
        b = b + step[:3]
        d = d + step[3]
        if np.linalg.norm(step) <= 1e-14 * (1.0 + np.linalg.norm(b) + abs(d)):
            break
    res = np.linalg.norm(S - b, axis=1) * d - radius
    return b, float(d), float(np.sqrt(np.mean(res * res)))


def static_mask(gyro: np.ndarray, threshold: float = 0.05) -> np.ndarray:
    """Samples where the gyro magnitude is below ``threshold`` rad/s."""
    return np.linalg.norm(np.asarray(gyro, dtype=float), axis=1) < threshold


def calibrate_imu(stream: ImuStream, static_threshold: float = 0.05) -> Tuple[ImuCalibration, dict]:
    """Sphere-fit accelerometer (quasi-static samples only) and magnetometer.

    The least-squares radius of noisy samples is inflated by about
    ``sigma^2 / r`` (isotropic noise adds to the norm on average), so the
    fitted scales are corrected by ``1 / (1 - (rms / r)^2)``.
    """
    mask = static_mask(stream.gyro, static_threshold)
    ba, da, rms_a = fit_sphere_calibration(stream.accel[mask], 1.0)
    bm, dm, rms_m = fit_sphere_calibration(stream.mag, MAGNETIC_FIELD)
    da /= 1.0 - rms_a ** 2
    dm /= 1.0 - (rms_m / MAGNETIC_FIELD) ** 2
    cal = ImuCalibration(ba, da, bm, dm, sigma_a=rms_a / da, sigma_m=rms_m / dm)
    info = {"n_accel": int(mask.sum()), "n_mag": len(stream), "rms_accel": rms_a, "rms_mag": rms_m}
    return cal, info


def integrate_gyro(samples, dt: float, t_start: float = 0.0) -> PreintegratedGyro:
    """Ordered product of ``Exp(w_i dt)`` over the samples (right-multiplied)."""
    W = np.asarray(samples, dtype=float).reshape(-1, 3)
    R = np.eye(3)
    for w in W:
        R = normalize_rotation(R @ exp_so3(w * dt))
    return PreintegratedGyro(R, t_start, t_start + len(W) * dt, len(W))


def preintegrate(stream: ImuStream, t1: float, t2: float) -> PreintegratedGyro:
    """Integrate a gyro stream between two arbitrary times.

    Each sample holds over ``[t_i, t_{i+1})``; partial intervals at either
    end contribute proportionally.
    """
    if t2 < t1:
        raise SensorError("preintegration span must be non-negative")
    ts = stream.timestamps
    if t2 == t1:
        return PreintegratedGyro(np.eye(3), t1, t2, 0)
    period = stream.period
    i0 = max(int(np.searchsorted(ts, t1, side="right")) - 1, 0)
    R = np.eye(3)
    count = 0
    i = i0
    while i < len(ts) and ts[i] < t2:
        start = max(ts[i], t1)
        end = min(ts[i + 1] if i + 1 < len(ts) else ts[i] + period, t2)
        if end > start:
            R = R @ exp_so3(stream.gyro[i] * (end - start))
            count += 1
        i += 1
    return PreintegratedGyro(normalize_rotation(R), t1, t2, count)


# twists and time offsets ---------------------------------------------------

def twist_from_trajectory(timestamps, poses: Sequence[Transform]) -> Tuple[np.ndarray, np.ndarray]:
    """Body-frame twists from consecutive poses.

    ``poses`` are camera poses C<-T. The relative motion between samples is
    ``T_i T_{i+1}^-1`` expressed in C at time i; each twist is stamped at the
    interval midpoint, making it a central difference.
    """
    ts = np.asarray(timestamps, dtype=float)
    if len(ts) < 2:
        raise SensorError("need at least two poses")
    dts = np.diff(ts)
    if np.any(dts <= 0):
        raise SensorError("duplicate or unordered timestamps")
    out = np.empty((len(ts) - 1, 6))
    for i in range(len(ts) - 1):
        # body motion of C between i and i+1: X_{C,i} = D X_{C,i+1}
        rel = poses[i] @ poses[i + 1].inverse()
        out[i] = log_se3(rel) / dts[i]
    return 0.5 * (ts[:-1] + ts[1:]), out


def gyro_twists(stream: ImuStream) -> Tuple[np.ndarray, np.ndarray]:
    """Angular-rate stream stamped at the middle of each sample's hold interval."""
    period = stream.period
    return stream.timestamps + 0.5 * period, stream.gyro.copy()


@dataclass
class TimeOffsetResult:
    offset: float
    grid: np.ndarray
    cost: np.ndarray
    reliable: bool


def estimate_time_offset(times_j, values_j, times_k, values_k,
                         search: Tuple[float, float, float] = (-0.5, 0.5, 0.001)) -> TimeOffsetResult:
    """Grid search for ``dt`` minimizing the mean of ``|xi_j(t_i + dt) - xi_k(t_i)|``.

    ``xi_j`` is linearly interpolated. Rows may be 3-vectors (angular rate)
    or full 6-vector twists; both streams must use the same layout. The mean
    over valid samples is used so candidates with different overlap are
    comparable. Ties go to the smallest ``|dt|``.

    Twists from differenced poses are interval means, so the finer stream is
    box-averaged over the coarser stream's median period before comparison.
    Without this, interpolating a noisy high-rate stream biases the minimum
    toward half-sample shifts, where interpolation averages the noise down.
    """
    tj = np.asarray(times_j, dtype=float)
    vj = np.asarray(values_j, dtype=float)
    tk = np.asarray(times_k, dtype=float)
    vk = np.asarray(values_k, dtype=float)
    if vj.ndim == 1:
        vj = vj[:, None]
    if vk.ndim == 1:
        vk = vk[:, None]
    lo, hi, step = search
    n = int(round((hi - lo) / step)) + 1
    grid = lo + step * np.arange(n)
    cost = np.full(n, np.inf)
    pj = float(np.median(np.diff(tj))) if len(tj) > 1 else 0.0
    pk = float(np.median(np.diff(tk))) if len(tk) > 1 else 0.0
    width_j = pk if pk > pj else 0.0
    if pj > pk:
        vk = _window_mean(tk, vk, tk, pj)
        keep = np.all(np.isfinite(vk), axis=1)
        tk, vk = tk[keep], vk[keep]
    for g, dt in enumerate(grid):
        q = tk + dt
        ok = (q - 0.5 * width_j >= tj[0]) & (q + 0.5 * width_j <= tj[-1])
        if not np.any(ok):
            continue
        if width_j > 0:
            interp = _window_mean(tj, vj, q[ok], width_j)
        else:
            interp = np.column_stack([np.interp(q[ok], tj, vj[:, c]) for c in range(vj.shape[1])])
        cost[g] = np.mean(np.linalg.norm(interp - vk[ok], axis=1))
    finite = np.isfinite(cost)
    if not np.any(finite):
        raise NoOverlapError("streams do not overlap for any candidate offset")
    best = np.min(cost[finite])
    ties = np.flatnonzero(finite & (cost <= best))
    idx = ties[np.argmin(np.abs(grid[ties]))]
    fc = cost[finite]
    reliable = bool((fc.max() - fc.min()) >= 0.05 * fc.mean())
    if not reliable:
        log.warning("time-offset cost curve is flat; estimate unreliable")
    return TimeOffsetResult(float(grid[idx]), grid, cost, reliable)


def _window_mean(t, v, q, width: float) -> np.ndarray:
    """Mean of the linear interpolant of ``v(t)`` over ``[q - w/2, q + w/2]``;
    NaN where the window leaves the sampled range."""
    if len(t) < 2:
        return np.full((len(q), v.shape[1]), np.nan)
    dt = np.diff(t)
    cum = np.vstack([np.zeros((1, v.shape[1])), np.cumsum(0.5 * (v[1:] + v[:-1]) * dt[:, None], axis=0)])

    def integral(x):
        i = np.clip(np.searchsorted(t, x, side="right") - 1, 0, len(t) - 2)
        h = (x - t[i])[:, None]
        slope = (v[i + 1] - v[i]) / dt[i][:, None]
        return cum[i] + v[i] * h + 0.5 * slope * h * h

    a, b = q - 0.5 * width, q + 0.5 * width
    out = (integral(b) - integral(a)) / width
    out[(a < t[0]) | (b > t[-1])] = np.nan
    return out


# CSV i/o ------------------------------------------------------------------

def write_imu_csv(stream: ImuStream, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(IMU_COLUMNS)
        for i in range(len(stream)):
            w.writerow([repr(float(stream.timestamps[i]))]
                       + [repr(float(v)) for v in stream.gyro[i]]
                       + [repr(float(v)) for v in stream.accel[i]]
                       + [repr(float(v)) for v in stream.mag[i]])


def read_imu_csv(path) -> ImuStream:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != IMU_COLUMNS:
            raise SensorError(f"{path}: header must be {','.join(IMU_COLUMNS)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise SensorError(f"{path}: row {lineno}: non-numeric value") from None
    data = np.array(rows, dtype=float).reshape(-1, 10)
    return ImuStream(data[:, 0], data[:, 1:4], data[:, 4:7], data[:, 7:10])


POSE_COLUMNS = ["timestamp_s"] + [f"T{r}{c}" for r in range(3) for c in range(4)]


def write_pose_csv(timestamps, poses: Sequence[Transform], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(POSE_COLUMNS)
        for t, T in zip(timestamps, poses):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in T.row_major()])


def read_pose_csv(path, to_frame: Optional[str] = "C", from_frame: Optional[str] = "T"
                  ) -> Tuple[np.ndarray, List[Transform]]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        header = next(reader, None)
        if header is None or len(header) != 13:
            raise SensorError(f"{path}: expected timestamp_s plus 12 transform columns")
        ts, poses = [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise SensorError(f"{path}: row {lineno}: non-numeric value") from None
            ts.append(vals[0])
            poses.append(Transform.from_row_major(vals[1:], to_frame, from_frame))
    return np.array(ts), poses


def write_imu_calibration(cal: ImuCalibration, path) -> None:
    from .camera import write_key_value_csv
    write_key_value_csv([("b_a", cal.accel_bias), ("d_a", cal.accel_scale),
                         ("b_m", cal.mag_bias), ("d_m", cal.mag_scale),
                         ("sigma_a", cal.sigma_a), ("sigma_m", cal.sigma_m)], path)


def read_imu_calibration(path) -> ImuCalibration:
    from .camera import read_key_value_csv
    kv = read_key_value_csv(path)
    try:
        def vec(k, n):
            vals = [float(x) for x in kv[k][:n]]
            if len(vals) != n:
                raise SensorError(f"{path}: '{k}' needs {n} values")
            return vals
        return ImuCalibration(vec("b_a", 3), vec("d_a", 1)[0], vec("b_m", 3), vec("d_m", 1)[0],
                              vec("sigma_a", 1)[0], vec("sigma_m", 1)[0])
    except KeyError as exc:
        raise SensorError(f"{path}: missing key {exc}") from None
    except ValueError as exc:
        raise SensorError(f"{path}: {exc}") from None
