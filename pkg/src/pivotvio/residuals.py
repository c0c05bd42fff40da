"""Residuals on camera poses C<-T, their analytic Jacobians, robust loss
and per-kind weighting.

All Jacobians are taken with respect to a right-multiplied twist
perturbation ``T * Exp(xi)`` with ``xi = [omega, upsilon]``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .camera import BehindCameraError, StereoRig, project, project_jacobian, project_points
from .geometry import Transform, extract_pivot, hat, log_so3, right_jacobian_inv_so3
from .sensors import GRAVITY, WorldReferences

KINDS = ("pivot", "accel", "mag", "reproj", "gyro")
DIMS = {"pivot": 2, "accel": 3, "mag": 3, "reproj": 2, "gyro": 3}
UNITS = {"pivot": "m", "accel": "m/s^2", "mag": "uT", "reproj": "px", "gyro": "rad"}
DEFAULT_HUBER_DELTA = 1.345
# robustifier per kind: only reprojections see outliers
ROBUST_KINDS = frozenset({"reproj"})


class DegenerateStatisticError(ValueError):
    pass


@dataclass
class Landmark:
    """Point stored in the body frame C of its anchor keyframe."""

    id: int
    anchor: int
    position: np.ndarray


@dataclass
class Observation:
    landmark: int
    keyframe: int
    lens: int
    pixel: np.ndarray


@dataclass(frozen=True, eq=False)
class VectorMeasurement:
    """Direction measurement in C paired with its world reference in T."""

    measured: np.ndarray
    reference: np.ndarray


@dataclass(frozen=True, eq=False)
class ReprojMeasurement:
    point: np.ndarray  # landmark in the anchor body frame
    pixel: np.ndarray
    lens: int
    rig: StereoRig
    landmark: int = -1


@dataclass(eq=False)
class ResidualBlock:
    """One residual term.

    ``pose_ids`` holds one keyframe id (pivot/accel/mag), ``(observer,
    anchor)`` for reproj, or ``(first, second)`` for gyro.
    ``huber_delta=None`` means plain least squares.
    """

    kind: str
    pose_ids: Tuple[int, ...]
    measurement: object = None
    alpha: float = 1.0
    huber_delta: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown residual kind {self.kind!r}")
        n = 2 if self.kind in ("reproj", "gyro") else 1
        if len(self.pose_ids) != n:
            raise ValueError(f"{self.kind} block needs {n} pose ids, got {self.pose_ids}")


# residual functions -------------------------------------------------------

def r_pivot(T: Transform) -> np.ndarray:
    return extract_pivot(T)[1]


def r_accel(T: Transform, gravity_meas, refs: WorldReferences) -> np.ndarray:
    return np.asarray(gravity_meas, dtype=float) - T.rotation @ refs.gravity


def r_mag(T: Transform, mag_meas, refs: WorldReferences) -> np.ndarray:
    return np.asarray(mag_meas, dtype=float) - T.rotation @ refs.magnetic


def r_reproj(T_obs: Transform, T_anchor_inv: Transform, point, pixel, rig: StereoRig, lens: int) -> np.ndarray:
    """Pixel error of an anchored landmark seen from ``T_obs``.

    ``T_anchor_inv`` is the anchor pose inverted (T<-C at anchor time).
    Raises :class:`BehindCameraError` if the point is behind the lens.
    """
    x_body = T_obs.apply(T_anchor_inv.apply(point))
    x_lens = rig.lens_from_body(lens).apply(x_body)
    return project(x_lens, rig.intrinsics(lens)) - np.asarray(pixel, dtype=float)


def r_gyro(T1: Transform, T2: Transform, delta_rotation) -> np.ndarray:
    """``R_TC2 (-) R_TC1 dR`` on SO(3), written with the C<-T rotations."""
    E = T2.rotation @ T1.rotation.T @ np.asarray(delta_rotation, dtype=float)
    return log_so3(E)


# loss ----------------------------------------------------------------------

def huber(x: float, delta: float) -> float:
    x = abs(x)
    if x <= delta:
        return 0.5 * x * x
    return delta * (x - 0.5 * delta)


def robust_cost(x: float, delta: Optional[float]) -> float:
    """``rho(x)`` with ``delta=None`` meaning ``x^2/2``."""
    if delta is None:
        return 0.5 * x * x
    return huber(x, delta)


def robust_weight(x: float, delta: Optional[float]) -> float:
    """IRLS weight ``rho'(x)/x``."""
    if delta is None or x <= delta:
        return 1.0
    return delta / x


# weighting -----------------------------------------------------------------

@dataclass
class KindStats:
    mean: float
    var: float
    unit: str
    count: int

    def __post_init__(self):
        if self.var < 0:
            raise ValueError("variance must be non-negative")


@dataclass
class ResidualStatistics:
    per_kind: Dict[str, KindStats] = field(default_factory=dict)

    def __getitem__(self, kind: str) -> KindStats:
        return self.per_kind[kind]

    def __contains__(self, kind: str) -> bool:
        return kind in self.per_kind

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "E", "Var", "N", "unit"])
            for kind in KINDS:
                if kind in self.per_kind:
                    s = self.per_kind[kind]
                    w.writerow([kind, repr(s.mean), repr(s.var), s.count, s.unit])

    @classmethod
    def from_csv(cls, path) -> "ResidualStatistics":
        out = {}
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(r for r in fh if not r.startswith("#")):
                out[row["kind"]] = KindStats(float(row["E"]), float(row["Var"]), row["unit"], int(row["N"]))
        return cls(out)

    @classmethod
    def from_residuals(cls, residuals: Mapping[str, Sequence[np.ndarray]]) -> "ResidualStatistics":
        """Mean and variance over all components of each kind's residuals."""
        out = {}
        for kind, rows in residuals.items():
            if len(rows) == 0:
                continue
            vals = np.concatenate([np.ravel(r) for r in rows])
            out[kind] = KindStats(float(vals.mean()), float(vals.var()), UNITS[kind], len(rows))
        return cls(out)


# Reference statistics of the recorded clinical run, in the units printed
# there: pixel, rad, cm, g (9.81 m/s^2), uT.
REFERENCE_TABLE = {
    "reproj": (1.6263, 9.3767, "px"),
    "gyro": (0.0003, 0.0051, "rad"),
    "pivot": (0.0511, 0.4374, "cm"),
    "accel": (0.0235, 0.0405, "g"),
    "mag": (-0.2730, 4.2801, "uT"),
}
_TO_SI = {"px": 1.0, "rad": 1.0, "cm": 0.01, "g": GRAVITY, "uT": 1.0}


def reference_statistics() -> ResidualStatistics:
    """Reference table converted to SI units (variance scales with the square)."""
    out = {}
    for kind, (mean, var, unit) in REFERENCE_TABLE.items():
        k = _TO_SI[unit]
        out[kind] = KindStats(mean * k, var * k * k, UNITS[kind], 1)
    return ResidualStatistics(out)


def scale_factor(kind: str, stats: ResidualStatistics, beta: float, count: float = 1) -> float:
    """``alpha = beta / (count * sqrt(Var))``; ``count`` is the number of
    residuals of this kind sharing the keyframe (any real >= 1)."""
    var = stats[kind].var
    if not var > 0:
        raise DegenerateStatisticError(f"variance of {kind} residuals is {var}")
    if count < 1:
        raise ValueError("count must be >= 1")
    return beta / (count * math.sqrt(var))


def default_betas(gamma: float) -> Dict[str, float]:
    return {"pivot": 1.0, "accel": 1.0, "mag": 1.0, "gyro": gamma, "reproj": 1.0 - gamma}


# block evaluation ----------------------------------------------------------

def evaluate(block: ResidualBlock, poses: Mapping[int, Transform]) -> np.ndarray:
    kind, ids, m = block.kind, block.pose_ids, block.measurement
    if kind == "pivot":
        return r_pivot(poses[ids[0]])
    if kind in ("accel", "mag"):
        T = poses[ids[0]]
        return np.asarray(m.measured) - T.rotation @ m.reference
    if kind == "gyro":
        return r_gyro(poses[ids[0]], poses[ids[1]], m)
    return r_reproj(poses[ids[0]], poses[ids[1]].inverse(), m.point, m.pixel, m.rig, m.lens)


def residual_jacobians(block: ResidualBlock, poses: Mapping[int, Transform]) -> List[np.ndarray]:
    """Analytic Jacobians, one (dim x 6) matrix per entry of ``pose_ids``."""
    kind, ids, m = block.kind, block.pose_ids, block.measurement
    if kind == "pivot":
        R = poses[ids[0]].rotation
        J = np.zeros((2, 6))
        J[:, 3:] = R[1:3, :]
        return [J]
    if kind in ("accel", "mag"):
        R = poses[ids[0]].rotation
        J = np.zeros((3, 6))
        J[:, :3] = R @ hat(m.reference)
        return [J]
    if kind == "gyro":
        Q1, Q2 = poses[ids[0]].rotation, poses[ids[1]].rotation
        dR = np.asarray(m)
        r = log_so3(Q2 @ Q1.T @ dR)
        M = right_jacobian_inv_so3(r) @ dR.T @ Q1
        J1 = np.zeros((3, 6))
        J2 = np.zeros((3, 6))
        J1[:, :3] = -M
        J2[:, :3] = M
        return [J1, J2]
    T_o, T_a = poses[ids[0]], poses[ids[1]]
    p_w = T_a.inverse().apply(m.point)
    x_body = T_o.apply(p_w)
    lens_T = m.rig.lens_from_body(m.lens)
    x_lens = lens_T.apply(x_body)
    if x_lens[2] <= 0:
        raise BehindCameraError("landmark behind the lens")
    A = project_jacobian(x_lens, m.rig.intrinsics(m.lens)) @ lens_T.rotation @ T_o.rotation
    Ph = hat(p_w)
    J_o = np.hstack([-A @ Ph, A])
    J_a = np.hstack([A @ Ph, -A])
    return [J_o, J_a]


def reproj_batch(R_obs, t_obs, R_anc, t_anc, points, pixels, lens_R, lens_t, intr):
    """Vectorized reprojection residuals and Jacobians for one lens.

    Shapes: rotations (n,3,3), translations/points (n,3), pixels (n,2).
    Returns ``(r, J_obs, J_anchor, valid)``.
    """
    # world point p = R_a^T (x - t_a)
    p_w = np.einsum("nji,nj->ni", R_anc, points - t_anc)
    x_body = np.einsum("nij,nj->ni", R_obs, p_w) + t_obs
    x_lens = x_body @ lens_R.T + lens_t
    uv, valid = project_points(x_lens, intr)
    r = uv - pixels
    safe = np.where(valid[:, None], x_lens, np.array([0.0, 0.0, 1.0]))
    P = project_jacobian(safe, intr)  # (n,2,3)
    A = np.einsum("nij,jk,nkl->nil", P, lens_R, R_obs)  # (n,2,3)
    Ph = np.zeros((len(p_w), 3, 3))
    Ph[:, 0, 1], Ph[:, 0, 2] = -p_w[:, 2], p_w[:, 1]
    Ph[:, 1, 0], Ph[:, 1, 2] = p_w[:, 2], -p_w[:, 0]
    Ph[:, 2, 0], Ph[:, 2, 1] = -p_w[:, 1], p_w[:, 0]
    APh = np.einsum("nij,njk->nik", A, Ph)
    J_o = np.concatenate([-APh, A], axis=2)
    J_a = np.concatenate([APh, -A], axis=2)
    r[~valid] = 0.0
    J_o[~valid] = 0.0
    J_a[~valid] = 0.0
    return r, J_o, J_a, valid


def numeric_jacobians(block: ResidualBlock, poses: Mapping[int, Transform], h: float = 1e-6) -> List[np.ndarray]:
    """Central finite differences of :func:`evaluate` (test oracle)."""
    out = []
    for slot, pid in enumerate(block.pose_ids):
        J = np.zeros((DIMS[block.kind], 6))
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            rs = []
            for sign in (1.0, -1.0):
                Tp = poses[pid].retract(sign * e)
                if block.pose_ids.count(pid) > 1:
                    rs.append(_evaluate_slot(block, poses, slot, Tp))
                else:
                    perturbed = dict(poses)
                    perturbed[pid] = Tp
                    rs.append(evaluate(block, perturbed))
            J[:, k] = (rs[0] - rs[1]) / (2 * h)
        out.append(J)
    return out


def _evaluate_slot(block: ResidualBlock, poses, slot: int, T: Transform) -> np.ndarray:
    """Evaluate with only one role of a shared pose replaced."""
    roles = [poses[i] for i in block.pose_ids]
    roles[slot] = T
    m = block.measurement
    if block.kind == "gyro":
        return r_gyro(roles[0], roles[1], m)
    return r_reproj(roles[0], roles[1].inverse(), m.point, m.pixel, m.rig, m.lens)
