"""Stereo pinhole camera with two-term radial distortion.

Distortion acts on normalized coordinates::

    x_n = (x/z, y/z),  r2 = |x_n|^2,  x_d = x_n * (1 + k1 r2 + k2 r2^2)
    u = f_x x_d + c_x,  v = f_y y_d + c_y
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Tuple

import numpy as np

from .geometry import Transform, hat

DEFAULT_EPIPOLAR_THRESHOLD = 1e-2
MIN_TRIANGULATION_ANGLE = math.radians(0.1)


class CameraError(ValueError):
    pass


class BehindCameraError(CameraError):
    pass


class UndistortionError(CameraError):
    pass


class DegenerateGeometryError(CameraError):
    pass


class CalibrationParseError(CameraError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    width: int = 1920
    height: int = 1080

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise CameraError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise CameraError("optical center outside the image")

    def in_image(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return ((uv[..., 0] >= margin) & (uv[..., 0] <= self.width - 1 - margin)
                & (uv[..., 1] >= margin) & (uv[..., 1] <= self.height - 1 - margin))


@dataclass(frozen=True, eq=False)
class StereoRig:
    """Two lenses plus ``extrinsic`` (C0<-C1) and ``mount`` (C<-C0)."""

    left: CameraIntrinsics
    right: CameraIntrinsics
    extrinsic: Transform
    mount: Transform

    def __post_init__(self):
        if np.linalg.norm(self.extrinsic.translation) <= 0:
            raise CameraError("stereo baseline must be non-zero")

    def intrinsics(self, lens: int) -> CameraIntrinsics:
        return self.left if lens == 0 else self.right

    def lens_from_body(self, lens: int) -> Transform:
        """Transform C_lens <- C."""
        c0_from_c = self.mount.inverse()
        if lens == 0:
            return c0_from_c
        return self.extrinsic.inverse() @ c0_from_c

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(self.extrinsic.translation))


def _distortion_factor(r2, intr: CameraIntrinsics):
    return 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2


def project(x, intr: CameraIntrinsics) -> np.ndarray:
    """Project a lens-frame point to distorted pixel coordinates."""
    x = np.asarray(x, dtype=float).reshape(3)
    if x[2] <= 0.0:
        raise BehindCameraError(f"point {x.tolist()} is behind the lens")
    xn = x[:2] / x[2]
    r2 = xn @ xn
    xd = xn * _distortion_factor(r2, intr)
    return np.array([intr.fx * xd[0] + intr.cx, intr.fy * xd[1] + intr.cy])


def project_points(X: np.ndarray, intr: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (..., 3) points.

    Returns ``(uv, valid)``; rows behind the lens get NaN pixels.
    """
    X = np.asarray(X, dtype=float)
    z = X[..., 2]
    valid = z > 1e-9
    zs = np.where(valid, z, 1.0)
    xn = X[..., :2] / zs[..., None]
    r2 = np.sum(xn * xn, axis=-1)
    xd = xn * _distortion_factor(r2, intr)[..., None]
    uv = np.stack([intr.fx * xd[..., 0] + intr.cx, intr.fy * xd[..., 1] + intr.cy], axis=-1)
    uv[~valid] = np.nan
    return uv, valid


def project_jacobian(X: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """d(pixel)/d(point) for (..., 3) lens-frame points, shape (..., 2, 3)."""
    X = np.asarray(X, dtype=float)
    x, y, z = X[..., 0], X[..., 1], X[..., 2]
    iz = 1.0 / z
    xn, yn = x * iz, y * iz
    r2 = xn * xn + yn * yn
    s = _distortion_factor(r2, intr)
    ds = 2.0 * (intr.k1 + 2.0 * intr.k2 * r2)  # d s / d r2 times 2
    # d(xd)/d(xn) = s I + ds * xn xn^T
    D00 = s + ds * xn * xn
    D01 = ds * xn * yn
    D11 = s + ds * yn * yn
    # d(xn)/dX
    shape = X.shape[:-1] + (2, 3)
    N = np.zeros(shape)
    N[..., 0, 0] = iz
    N[..., 0, 2] = -xn * iz
    N[..., 1, 1] = iz
    N[..., 1, 2] = -yn * iz
    J = np.empty(shape)
    J[..., 0, :] = intr.fx * (D00[..., None] * N[..., 0, :] + D01[..., None] * N[..., 1, :])
    J[..., 1, :] = intr.fy * (D01[..., None] * N[..., 0, :] + D11[..., None] * N[..., 1, :])
    return J


def undistort_normalized(uv, intr: CameraIntrinsics, max_iter: int = 20, tol: float = 1e-14) -> np.ndarray:
    """Normalized undistorted coordinates of a pixel (Newton on the radius)."""
    uv = np.asarray(uv, dtype=float).reshape(2)
    xd = np.array([(uv[0] - intr.cx) / intr.fx, (uv[1] - intr.cy) / intr.fy])
    rd = math.hypot(xd[0], xd[1])
    if rd == 0.0 or (intr.k1 == 0.0 and intr.k2 == 0.0):
        return xd
    r = rd
    for _ in range(max_iter):
        r2 = r * r
        f = r * (1.0 + intr.k1 * r2 + intr.k2 * r2 * r2) - rd
        df = 1.0 + 3.0 * intr.k1 * r2 + 5.0 * intr.k2 * r2 * r2
        if df <= 0.0:
            break
        step = f / df
        r -= step
        if abs(step) <= tol * max(1.0, r):
            return xd * (r / rd)
    raise UndistortionError(f"undistortion did not converge for pixel {uv.tolist()}")


def unproject(uv, intr: CameraIntrinsics) -> np.ndarray:
    """Unit bearing in the lens frame."""
    xn = undistort_normalized(uv, intr)
    b = np.array([xn[0], xn[1], 1.0])
    return b / np.linalg.norm(b)


def unproject_points(uv: np.ndarray, intr: CameraIntrinsics, max_iter: int = 20) -> np.ndarray:
    """Vectorized :func:`unproject` for (N, 2) pixels."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    xd = np.stack([(uv[:, 0] - intr.cx) / intr.fx, (uv[:, 1] - intr.cy) / intr.fy], axis=1)
    rd = np.linalg.norm(xd, axis=1)
    r = rd.copy()
    if intr.k1 != 0.0 or intr.k2 != 0.0:
        for _ in range(max_iter):
            r2 = r * r
            f = r * (1.0 + intr.k1 * r2 + intr.k2 * r2 * r2) - rd
            df = 1.0 + 3.0 * intr.k1 * r2 + 5.0 * intr.k2 * r2 * r2
            step = f / df
            r = r - step
            if np.all(np.abs(step) <= 1e-14 * np.maximum(1.0, r)):
                break
        else:
            raise UndistortionError("undistortion did not converge")
    scale = np.where(rd > 0, r / np.where(rd > 0, rd, 1.0), 1.0)
    xn = xd * scale[:, None]
    b = np.hstack([xn, np.ones((len(xn), 1))])
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def essential_matrix(rig: StereoRig) -> np.ndarray:
    """``hat(t/|t|) R`` for the C0<-C1 extrinsic; unit baseline keeps the
    epipolar value dimensionless (roughly the angle to the epipolar plane)."""
    t = rig.extrinsic.translation
    return hat(t / np.linalg.norm(t)) @ rig.extrinsic.rotation


def epipolar_error(x0, x1, rig: StereoRig) -> float:
    """Bilinear epipolar value ``x0^T E x1`` for unit bearings."""
    return float(np.asarray(x0, dtype=float) @ essential_matrix(rig) @ np.asarray(x1, dtype=float))


def triangulate(u0, u1, rig: StereoRig) -> np.ndarray:
    """Triangulate a stereo pair; returns the point in the left-lens frame C0."""
    b0 = unproject(u0, rig.left)
    return triangulate_bearings(b0, unproject(u1, rig.right), rig)


def triangulate_bearings(b0, b1, rig: StereoRig) -> np.ndarray:
    R, t = rig.extrinsic.rotation, rig.extrinsic.translation
    d0 = np.asarray(b0, dtype=float)
    d1 = R @ np.asarray(b1, dtype=float)
    cosang = float(d0 @ d1) / (np.linalg.norm(d0) * np.linalg.norm(d1))
    if math.acos(min(1.0, max(-1.0, cosang))) < MIN_TRIANGULATION_ANGLE:
        raise DegenerateGeometryError("stereo rays are nearly parallel")
    # lambda0 d0 - lambda1 d1 = t in the least-squares sense
    A = np.stack([d0, -d1], axis=1)
    lam, *_ = np.linalg.lstsq(A, t, rcond=None)
    if np.linalg.cond(A) > 1e8:
        # midpoint fallback from the closed-form closest points
        w0 = -t
        a, b, c = d0 @ d0, d0 @ d1, d1 @ d1
        d, e = d0 @ w0, d1 @ w0
        den = a * c - b * b
        lam = np.array([(b * e - c * d) / den, (a * e - b * d) / den])
    p0 = lam[0] * d0
    p1 = t + lam[1] * d1
    return 0.5 * (p0 + p1)


# calibration file ---------------------------------------------------------

_PARAM_NAMES = {"fx": "f_x", "fy": "f_y", "cx": "c_x", "cy": "c_y", "k1": "k_1", "k2": "k_2",
                "width": "width", "height": "height"}


def _lens_keys(lens: int) -> Dict[str, str]:
    return {
        "fx": f"fx{lens}", "fy": f"fy{lens}", "cx": f"cx{lens}", "cy": f"cy{lens}",
        "k1": f"k1_{lens}", "k2": f"k2_{lens}", "width": f"width{lens}", "height": f"height{lens}",
    }


def write_calibration(rig: StereoRig, path) -> None:
    """Write the key,value calibration CSV (transforms as 12 row-major values)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for lens, intr in ((0, rig.left), (1, rig.right)):
            keys = _lens_keys(lens)
            for attr in ("fx", "fy", "cx", "cy", "k1", "k2", "width", "height"):
                w.writerow([keys[attr], repr(getattr(intr, attr))])
        w.writerow(["T_C0C1"] + [repr(float(v)) for v in rig.extrinsic.row_major()])
        w.writerow(["T_CC0"] + [repr(float(v)) for v in rig.mount.row_major()])


def _read_key_values(path) -> Dict[str, Tuple[int, list]]:
    rows: Dict[str, Tuple[int, list]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header_seen = False
        for lineno, row in enumerate(reader, start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            if not header_seen:
                if [c.strip() for c in row[:2]] != ["key", "value"]:
                    raise CalibrationParseError(f"{path}: row {lineno}: expected header 'key,value'")
                header_seen = True
                continue
            rows[row[0].strip()] = (lineno, [c.strip() for c in row[1:]])
    if not header_seen:
        raise CalibrationParseError(f"{path}: empty calibration file")
    return rows


def _number(rows, key: str, path, count: int = 1, label: str = ""):
    if key not in rows:
        what = f" ({label})" if label else ""
        raise CalibrationParseError(f"{path}: missing column '{key}'{what}")
    lineno, cells = rows[key]
    if len(cells) < count:
        raise CalibrationParseError(f"{path}: row {lineno} column '{key}': expected {count} values")
    try:
        vals = [float(c) for c in cells[:count]]
    except ValueError:
        raise CalibrationParseError(f"{path}: row {lineno} column '{key}': non-numeric value") from None
    return vals[0] if count == 1 else vals


def parse_calibration(path) -> StereoRig:
    rows = _read_key_values(path)
    lenses = []
    for lens in (0, 1):
        keys = _lens_keys(lens)
        vals = {attr: _number(rows, key, path, label=f"{_PARAM_NAMES[attr]} of lens {lens}")
                for attr, key in keys.items()
                if attr not in ("width", "height") or key in rows}
        kw = dict(fx=vals["fx"], fy=vals["fy"], cx=vals["cx"], cy=vals["cy"], k1=vals["k1"], k2=vals["k2"])
        if "width" in vals:
            kw["width"] = int(vals["width"])
        if "height" in vals:
            kw["height"] = int(vals["height"])
        lenses.append(CameraIntrinsics(**kw))
    extrinsic = Transform.from_row_major(_number(rows, "T_C0C1", path, 12), "C0", "C1")
    mount = Transform.from_row_major(_number(rows, "T_CC0", path, 12), "C", "C0")
    return StereoRig(lenses[0], lenses[1], extrinsic, mount)


def read_key_value_csv(path) -> Dict[str, list]:
    """Generic key,value reader shared with the IMU calibration file."""
    return {k: v for k, (_, v) in _read_key_values(path).items()}


def write_key_value_csv(items: Iterable[Tuple[str, Iterable[float]]], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for key, vals in items:
            w.writerow([key] + [repr(float(v)) for v in np.atleast_1d(vals)])
