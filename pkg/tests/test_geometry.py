import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from pivotvio.geometry import (FrameMismatchError, PivotPose, Transform, exp_se3, exp_so3, exp_so3_batch,
                               exp_se3_batch, expand_pivot, extract_pivot, hat, left_jacobian_so3, log_se3,
                               log_so3, normalize_rotation, ominus, rotation_distance)

vec3 = st.lists(st.floats(-3.0, 3.0, allow_nan=False), min_size=3, max_size=3).map(np.array)


def random_rotvec(rng, n, max_angle=math.pi - 1e-3):
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    return axis * rng.uniform(0.0, max_angle, (n, 1))


def random_transform(rng, frames=(None, None)):
    return Transform(exp_so3(random_rotvec(rng, 1)[0]), rng.normal(size=3), *frames)


def series_exp(A, terms=20):
    out, term = np.eye(A.shape[0]), np.eye(A.shape[0])
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    return out


def test_hat_examples():
    assert np.array_equal(hat([0, 0, 0]), np.zeros((3, 3)))
    assert np.array_equal(hat([1, 0, 0]), [[0, 0, 0], [0, 0, -1], [0, 1, 0]])


@given(vec3, vec3)
def test_hat_is_cross_product(v, w):
    x = np.array([v[1] * w[2] - v[2] * w[1], v[2] * w[0] - v[0] * w[2], v[0] * w[1] - v[1] * w[0]])
    assert np.allclose(hat(v) @ w, x, atol=1e-12)
    assert np.allclose(hat(v), -hat(v).T)


def test_exp_so3_examples():
    assert np.array_equal(exp_so3([0, 0, 0]), np.eye(3))
    R = exp_so3([math.pi / 2, 0, 0])
    assert np.allclose(R @ [0, 1, 0], [0, 0, 1], atol=1e-15)


def test_exp_so3_matches_series():
    rng = np.random.default_rng(0)
    for w in random_rotvec(rng, 200, math.pi - 1e-6):
        assert np.allclose(exp_so3(w), series_exp(hat(w), 30), atol=1e-12)


def test_exp_so3_small_angle_branch():
    w = np.array([3e-7, -2e-7, 1e-7])
    assert np.allclose(exp_so3(w), scipy.linalg.expm(hat(w)), atol=1e-18)


def test_log_so3_examples():
    assert np.array_equal(log_so3(np.eye(3)), np.zeros(3))
    Rz = np.diag([-1.0, -1.0, 1.0])
    w, at_pi = log_so3(Rz, full_output=True)
    assert at_pi
    assert np.allclose(w, [0, 0, math.pi])
    assert np.allclose(exp_so3(w), Rz, atol=1e-12)


def test_log_so3_at_pi_tie_break_positive_largest_component():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = rng.normal(size=3)
        n /= np.linalg.norm(n)
        R = exp_so3(math.pi * n)
        w = log_so3(R)
        assert abs(np.linalg.norm(w) - math.pi) < 1e-9
        assert np.allclose(exp_so3(w), R, atol=1e-9)
        assert w[np.argmax(np.abs(w))] > 0


def test_exp_log_so3_round_trip_batch():
    rng = np.random.default_rng(2)
    W = random_rotvec(rng, 10_000)
    Rs = exp_so3_batch(W)
    err = max(np.abs(log_so3(R) - w).max() for R, w in zip(Rs, W))
    assert err < 1e-9


def test_exp_se3_examples():
    T = exp_se3(np.zeros(6))
    assert np.array_equal(T.rotation, np.eye(3)) and np.array_equal(T.translation, np.zeros(3))
    T = exp_se3([0, 0, 0, 1, 2, 3])
    assert np.allclose(T.rotation, np.eye(3)) and np.allclose(T.translation, [1, 2, 3])


def _twist_matrix(xi):
    M = np.zeros((4, 4))
    M[:3, :3] = hat(xi[:3])
    M[:3, 3] = xi[3:]
    return M


def test_exp_se3_matches_matrix_exponential():
    rng = np.random.default_rng(3)
    for _ in range(200):
        xi = np.concatenate([random_rotvec(rng, 1)[0], rng.normal(size=3)])
        assert np.allclose(exp_se3(xi).matrix(), scipy.linalg.expm(_twist_matrix(xi)), atol=1e-12)


def test_se3_round_trip_and_batch():
    rng = np.random.default_rng(4)
    xis = np.hstack([random_rotvec(rng, 2000), rng.normal(size=(2000, 3))])
    R, t = exp_se3_batch(xis)
    for k, xi in enumerate(xis):
        T = exp_se3(xi)
        assert np.allclose(T.rotation, R[k], atol=1e-12) and np.allclose(T.translation, t[k], atol=1e-12)
        assert np.allclose(log_se3(T), xi, atol=1e-9)


def test_left_jacobian_is_derivative_of_exp():
    rng = np.random.default_rng(5)
    w = random_rotvec(rng, 1, 2.0)[0]
    J = left_jacobian_so3(w)
    h = 1e-6
    for i in range(3):
        d = np.zeros(3)
        d[i] = h
        num = log_so3(exp_so3(w + d) @ exp_so3(w).T) / h
        assert np.allclose(num, J[:, i], atol=1e-5)


def test_ominus_examples_and_identity():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        T1, T2 = random_transform(rng), random_transform(rng)
        assert np.allclose(ominus(T1, T1), 0.0, atol=1e-12)
        rel = T1.inverse() @ T2
        assert exp_se3(ominus(T1, T2)).allclose(rel, atol=1e-9)
    xi = np.array([0.1, -0.2, 0.3, 1.0, 2.0, 3.0])
    assert np.allclose(ominus(Transform.identity(), exp_se3(xi)), xi, atol=1e-12)


def test_ominus_rejects_frame_mismatch():
    A = Transform.identity("C", "T")
    B = Transform.identity("C", "W")
    with pytest.raises(FrameMismatchError):
        ominus(A, B)


def test_compose_frame_tags():
    a = Transform.identity("A", "B")
    b = Transform.identity("B", "C")
    assert (a @ b).to_frame == "A" and (a @ b).from_frame == "C"
    with pytest.raises(FrameMismatchError):
        b @ a


def test_group_axioms():
    rng = np.random.default_rng(7)
    for _ in range(500):
        A, B, C = (random_transform(rng) for _ in range(3))
        assert ((A @ B) @ C).allclose(A @ (B @ C), atol=1e-10)
        assert (A.inverse() @ A).allclose(Transform.identity(), atol=1e-10)


def test_transform_preserves_distances():
    rng = np.random.default_rng(8)
    T = random_transform(rng)
    P = rng.normal(size=(50, 3))
    Q = T.apply(P)
    assert np.allclose(np.linalg.norm(P[1:] - P[:-1], axis=1), np.linalg.norm(Q[1:] - Q[:-1], axis=1))


def test_retract_is_right_perturbation():
    rng = np.random.default_rng(9)
    T = random_transform(rng)
    xi = rng.normal(size=6) * 0.3
    assert T.retract(xi).allclose(T @ exp_se3(xi), atol=1e-12)


def test_row_major_round_trip():
    rng = np.random.default_rng(10)
    T = random_transform(rng)
    assert Transform.from_row_major(T.row_major()).allclose(T, atol=0)


def test_pivot_examples():
    T = expand_pivot(PivotPose(0.1, np.eye(3)))
    assert np.allclose(T.translation, [0.1, 0, 0])
    p, off = extract_pivot(T)
    assert p.depth == 0.1 and np.array_equal(off, [0, 0])
    _, off = extract_pivot(Transform(np.eye(3), [0.1, 0.02, -0.01]))
    assert np.allclose(off, [0.02, -0.01])


def test_pivot_round_trip_exact():
    rng = np.random.default_rng(11)
    for _ in range(100):
        p = PivotPose(rng.uniform(-0.2, 0.2), exp_so3(random_rotvec(rng, 1)[0]))
        q, off = extract_pivot(expand_pivot(p))
        assert q.depth == p.depth and np.array_equal(q.rotation, p.rotation)
        assert np.array_equal(off, [0.0, 0.0])


@pytest.mark.slow
def test_normalization_bounds_drift_over_many_compositions():
    rng = np.random.default_rng(12)
    Q = exp_so3_batch(random_rotvec(rng, 1_000_000))
    R = np.eye(3)
    for q in Q:
        R = normalize_rotation(R @ q)
    assert np.linalg.norm(R @ R.T - np.eye(3)) < 1e-9
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


def test_rotation_distance_symmetric():
    rng = np.random.default_rng(13)
    A, B = (exp_so3(w) for w in random_rotvec(rng, 2))
    assert math.isclose(rotation_distance(A, B), rotation_distance(B, A), abs_tol=1e-12)
    assert rotation_distance(A, A) < 1e-7
