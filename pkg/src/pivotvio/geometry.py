"""SO(3)/SE(3) Lie-group helpers.

Twists are ordered ``[omega, upsilon]`` (rotation first). Poses are
:class:`Transform` objects mapping points from their ``from_frame`` into
their ``to_frame`` by left multiplication, e.g. the camera pose ``C<-T``
maps trocar (world) coordinates into camera coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

# Below this angle Rodrigues and the Jacobians switch to Taylor expansions.
SMALL_ANGLE = 1e-6
# cos(theta) below this value uses the axis-extraction branch of the log map.
NEAR_PI_COS = -0.99


class FrameMismatchError(ValueError):
    """Raised when transforms with incompatible frame tags are combined."""


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix with ``hat(v) @ w == cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(M: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hat` (uses the antisymmetric part of ``M``)."""
    M = np.asarray(M, dtype=float)
    return 0.5 * np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])


def exp_so3(omega) -> np.ndarray:
    """Rodrigues formula."""
    w = np.asarray(omega, dtype=float).reshape(3)
    theta = math.sqrt(w @ w)
    W = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def log_so3(R: np.ndarray, full_output: bool = False):
    """Rotation vector of ``R`` with norm in ``[0, pi]``.

    With ``full_output=True`` returns ``(omega, at_pi)`` where ``at_pi``
    flags that the angle is pi to working precision and the axis sign was
    chosen by convention (largest-magnitude component positive).
    """
    R = np.asarray(R, dtype=float)
    v = vee(R)  # sin(theta) * axis
    s = math.sqrt(v @ v)
    c = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    c = min(1.0, max(-1.0, c))
    at_pi = False
    if c > NEAR_PI_COS:
        theta = math.atan2(s, c)
        if theta < SMALL_ANGLE:
            omega = v * (1.0 + theta * theta / 6.0)
        else:
            omega = v * (theta / s)
    else:
        theta = math.atan2(s, c)
        # (R + R^T)/2 - cos I = (1 - cos) n n^T
        B = 0.5 * (R + R.T) - c * np.eye(3)
        k = int(np.argmax(np.diag(B)))
        n = B[:, k] / math.sqrt(B[k, k] * (1.0 - c))
        n /= np.linalg.norm(n)
        if s > 1e-12:
            if n @ v < 0.0:
                n = -n
        else:
            at_pi = True
            j = int(np.argmax(np.abs(n)))
            if n[j] < 0.0:
                n = -n
        omega = theta * n
    if full_output:
        return omega, at_pi
    return omega


def left_jacobian_so3(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float).reshape(3)
    theta = math.sqrt(w @ w)
    W = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + (W @ W) / 6.0
    t2 = theta * theta
    return (np.eye(3) + (1.0 - math.cos(theta)) / t2 * W
            + (theta - math.sin(theta)) / (t2 * theta) * (W @ W))


def left_jacobian_inv_so3(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float).reshape(3)
    theta = math.sqrt(w @ w)
    W = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + (W @ W) / 12.0
    coef = (1.0 / (theta * theta)
            - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta)))
    return np.eye(3) - 0.5 * W + coef * (W @ W)


def right_jacobian_so3(omega) -> np.ndarray:
    return left_jacobian_so3(-np.asarray(omega, dtype=float))


def right_jacobian_inv_so3(omega) -> np.ndarray:
    return left_jacobian_inv_so3(-np.asarray(omega, dtype=float))


def normalize_rotation(R: np.ndarray) -> np.ndarray:
    """Project a nearly orthonormal matrix back onto SO(3).

    One Newton-Schulz step; enough to cancel the drift of a single
    floating-point product.
    """
    R = np.asarray(R, dtype=float)
    return 1.5 * R - 0.5 * (R @ R.T @ R)


def _check_frames(left_from: Optional[str], right_to: Optional[str]) -> None:
    if left_from is not None and right_to is not None and left_from != right_to:
        raise FrameMismatchError(f"cannot compose ...<-{left_from} with {right_to}<-...")


@dataclass(frozen=True, eq=False)
class Transform:
    """Rigid transform ``to_frame <- from_frame``.

    Frame tags are optional labels. They are only checked when Python runs
    with assertions enabled (the ``__debug__`` default).
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    to_frame: Optional[str] = None
    from_frame: Optional[str] = None

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, to_frame: Optional[str] = None, from_frame: Optional[str] = None) -> "Transform":
        return cls(np.eye(3), np.zeros(3), to_frame, from_frame)

    @classmethod
    def from_matrix(cls, M, to_frame=None, from_frame=None) -> "Transform":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3], to_frame, from_frame)

    @classmethod
    def from_row_major(cls, values, to_frame=None, from_frame=None) -> "Transform":
        """Build from the 12 row-major entries of the top 3x4 block."""
        M = np.asarray(values, dtype=float).reshape(3, 4)
        return cls(M[:, :3], M[:, 3], to_frame, from_frame)

    def row_major(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]]).reshape(12)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "Transform":
        Rt = self.rotation.T
        return Transform(Rt, -Rt @ self.translation, self.from_frame, self.to_frame)

    def compose(self, other: "Transform") -> "Transform":
        if __debug__:
            _check_frames(self.from_frame, other.to_frame)
        R = normalize_rotation(self.rotation @ other.rotation)
        t = self.rotation @ other.translation + self.translation
        return Transform(R, t, self.to_frame, other.from_frame)

    def apply(self, points) -> np.ndarray:
        """Map a point (3,) or points (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other):
        if isinstance(other, Transform):
            return self.compose(other)
        return self.apply(other)

    def retract(self, xi) -> "Transform":
        """Right-multiplied perturbation ``self * Exp(xi)``."""
        d = exp_se3(xi)
        R = normalize_rotation(self.rotation @ d.rotation)
        t = self.rotation @ d.translation + self.translation
        return Transform(R, t, self.to_frame, self.from_frame)

    def with_frames(self, to_frame: Optional[str], from_frame: Optional[str]) -> "Transform":
        return Transform(self.rotation, self.translation, to_frame, from_frame)

    def allclose(self, other: "Transform", atol: float = 1e-9) -> bool:
        return (np.allclose(self.rotation, other.rotation, atol=atol)
                and np.allclose(self.translation, other.translation, atol=atol))

    def __repr__(self) -> str:
        tag = ""
        if self.to_frame or self.from_frame:
            tag = f", {self.to_frame}<-{self.from_frame}"
        w = log_so3(self.rotation)
        return f"Transform(rotvec={np.round(w, 6).tolist()}, t={np.round(self.translation, 6).tolist()}{tag})"


def exp_se3(xi) -> Transform:
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, upsilon = xi[:3], xi[3:]
    return Transform(exp_so3(omega), left_jacobian_so3(omega) @ upsilon)


def log_se3(T: Transform) -> np.ndarray:
    omega = log_so3(T.rotation)
    upsilon = left_jacobian_inv_so3(omega) @ T.translation
    return np.concatenate([omega, upsilon])


def ominus(T1: Transform, T2: Transform) -> np.ndarray:
    """Tangent difference ``Log(T1^-1 T2)``; both must carry the same frame tags."""
    if __debug__ and (T1.to_frame, T1.from_frame) != (T2.to_frame, T2.from_frame):
        if None not in (T1.to_frame, T2.to_frame, T1.from_frame, T2.from_frame):
            raise FrameMismatchError(
                f"ominus of {T1.to_frame}<-{T1.from_frame} and {T2.to_frame}<-{T2.from_frame}")
    Rt = T1.rotation.T
    rel = Transform(Rt @ T2.rotation, Rt @ (T2.translation - T1.translation))
    return log_se3(rel)


def rotation_angle(R: np.ndarray) -> float:
    return float(np.linalg.norm(log_so3(R)))


def rotation_distance(R1: np.ndarray, R2: np.ndarray) -> float:
    """Geodesic angle between two rotations."""
    return rotation_angle(np.asarray(R1).T @ np.asarray(R2))


@dataclass(frozen=True, eq=False)
class PivotPose:
    """Four-DoF pose about the pivot: rotation, then shift along camera x."""

    depth: float
    rotation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "depth", float(self.depth))
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=float).reshape(3, 3))


def expand_pivot(p: PivotPose, to_frame: Optional[str] = None, from_frame: Optional[str] = None) -> Transform:
    """``Trans(depth * e_x) * Rot(R)``."""
    return Transform(p.rotation, np.array([p.depth, 0.0, 0.0]), to_frame, from_frame)


def extract_pivot(T: Transform) -> Tuple[PivotPose, np.ndarray]:
    """Split ``T`` into its pivot pose and the off-axis translation ``(t_y, t_z)``."""
    t = T.translation
    return PivotPose(t[0], T.rotation), np.array([t[1], t[2]])


def exp_so3_batch(W) -> np.ndarray:
    """Vectorized Rodrigues for (n, 3) rotation vectors; returns (n, 3, 3)."""
    W = np.asarray(W, dtype=float).reshape(-1, 3)
    theta = np.linalg.norm(W, axis=1)
    small = theta < SMALL_ANGLE
    ts = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(ts) / ts)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(ts)) / (ts * ts))
    K = np.zeros((len(W), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -W[:, 2], W[:, 1]
    K[:, 1, 0], K[:, 1, 2] = W[:, 2], -W[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -W[:, 1], W[:, 0]
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def exp_se3_batch(xi) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`exp_se3`; returns rotations (n,3,3) and translations (n,3)."""
    xi = np.asarray(xi, dtype=float).reshape(-1, 6)
    W, U = xi[:, :3], xi[:, 3:]
    theta = np.linalg.norm(W, axis=1)
    small = theta < SMALL_ANGLE
    ts = np.where(small, 1.0, theta)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(ts)) / (ts * ts))
    c = np.where(small, 1.0 / 6.0 - theta ** 2 / 120.0, (ts - np.sin(ts)) / (ts ** 3))
    cross1 = np.cross(W, U)
    cross2 = np.cross(W, cross1)
    t = U + b[:, None] * cross1 + c[:, None] * cross2
    return exp_so3_batch(W), t
