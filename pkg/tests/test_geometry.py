import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from springcam import geometry as geo

finite3 = st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3).map(np.array)


def series_exp(A, terms=60):
    """Term-by-term power series of the matrix exponential."""
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for n in range(1, terms):
        term = term @ A / n
        out = out + term
    return out


def twist_matrix(xi):
    M = np.zeros((4, 4))
    M[:3, :3] = geo.hat(xi[:3])
    M[:3, 3] = xi[3:]
    return M


def test_rot_exp_zero_is_identity():
    assert np.array_equal(geo.rot_exp(np.zeros(3)), np.eye(3))


def test_rot_exp_quarter_turn_about_x():
    R = geo.rot_exp(np.array([np.pi / 2, 0, 0]))
    np.testing.assert_allclose(R @ [0, 1, 0], [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(R, series_exp(geo.hat([np.pi / 2, 0, 0])), atol=1e-14)


def test_rot_exp_tiny_angle_branch():
    R = geo.rot_exp(np.array([1e-10, 0, 0]))
    assert np.abs(R - np.eye(3)).max() < 1e-9
    assert np.abs(R - np.eye(3)).max() <= 1e-10 + 1e-16
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-15)


def test_rot_exp_rejects_nonfinite():
    with pytest.raises(ValueError):
        geo.rot_exp(np.array([np.nan, 0, 0]))


def test_rot_log_identity_and_round_trip():
    assert np.array_equal(geo.rot_log(np.eye(3)), np.zeros(3))
    v = np.array([0.3, -0.2, 0.1])
    np.testing.assert_allclose(geo.rot_log(geo.rot_exp(v)), v, atol=1e-10)


def test_rot_log_half_turn():
    R = np.diag([1.0, -1.0, -1.0])  # pi about x
    # trace-based oracle: angle from the trace, axis from R + I
    angle = np.arccos((np.trace(R) - 1) / 2)
    axis = (R + np.eye(3))[:, 0]
    axis /= np.linalg.norm(axis)
    v = geo.rot_log(R)
    assert np.isclose(np.linalg.norm(v), angle)
    np.testing.assert_allclose(np.abs(v), np.pi * np.abs(axis), atol=1e-12)
    np.testing.assert_allclose(geo.rot_exp(v), R, atol=1e-12)


def test_rot_log_rejects_non_rotation():
    with pytest.raises(ValueError):
        geo.rot_log(np.diag([1.0, 1.0, 1.01]))
    with pytest.raises(ValueError):
        geo.rot_log(np.diag([1.0, 1.0, -1.0]))


@settings(max_examples=200, deadline=None)
@given(finite3)
def test_rot_exp_is_orthonormal(v):
    R = geo.rot_exp(v)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9
    w = geo.rot_log(R)
    assert np.linalg.norm(w) <= np.pi + 1e-12
    np.testing.assert_allclose(geo.rot_exp(w), R, atol=1e-9)


def test_se3_exp_examples():
    np.testing.assert_array_equal(geo.se3_exp(np.zeros(6)), np.eye(4))
    T = geo.se3_exp(np.array([0, 0, 0, 1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(T[:3, :3], np.eye(3))
    np.testing.assert_allclose(T[:3, 3], [1, 2, 3])
    xi = np.array([0, 0, np.pi / 2, 1.0, 0, 0])
    np.testing.assert_allclose(geo.se3_exp(xi), expm(twist_matrix(xi)), atol=1e-12)


def test_se3_log_exp_round_trip_bulk():
    rng = np.random.default_rng(0)
    n = 10_000
    axis = rng.standard_normal((n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.uniform(0, np.pi - 0.1, n)
    xi = np.concatenate([axis * angle[:, None], rng.uniform(-5, 5, (n, 3))], axis=1)
    back = geo.se3_log(geo.se3_exp(xi))
    assert np.abs(back - xi).max() < 1e-8


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=6, max_size=6).map(np.array))
def test_se3_exp_matches_matrix_exponential(xi):
    np.testing.assert_allclose(geo.se3_exp(xi), expm(twist_matrix(xi)), atol=1e-12)


def _random_pose(rng):
    return geo.Pose(geo.random_rotation(rng), rng.standard_normal(3))


def test_compose_and_inverse():
    rng = np.random.default_rng(1)
    A, B, C = (_random_pose(rng) for _ in range(3))
    ident = geo.Pose.identity()
    np.testing.assert_allclose(geo.compose(ident, B).matrix, B.matrix)
    np.testing.assert_allclose(geo.inverse(geo.inverse(A)).matrix, A.matrix, atol=1e-12)
    np.testing.assert_allclose(geo.compose(A, geo.inverse(A)).matrix, np.eye(4), atol=1e-9)
    left = geo.compose(geo.compose(A, B), C).matrix
    right = geo.compose(A, geo.compose(B, C)).matrix
    np.testing.assert_allclose(left, right, atol=1e-12)


def test_compose_axis_aligned_quarter_turns():
    Rx = geo.rot_exp(np.array([np.pi / 2, 0, 0]))
    Rz = geo.rot_exp(np.array([0, 0, np.pi / 2]))
    A = geo.Pose(Rx, [1.0, 0, 0])
    B = geo.Pose(Rz, [0, 2.0, 0])
    np.testing.assert_allclose(geo.compose(A, B).matrix, A.matrix @ B.matrix, atol=1e-15)


def test_compose_associative_random_triples():
    rng = np.random.default_rng(2)
    T = geo.make_pose(geo.random_rotation(rng, 300), rng.standard_normal((300, 3)))
    a, b, c = T[:100], T[100:200], T[200:]
    np.testing.assert_allclose((a @ b) @ c, a @ (b @ c), atol=1e-12)


def test_pose_rejects_bad_rotation():
    with pytest.raises(ValueError):
        geo.Pose(np.eye(3) * 1.1, np.zeros(3))
    with pytest.raises(ValueError):
        geo.Pose(np.eye(3), [np.inf, 0, 0])


def test_quaternion_round_trip():
    rng = np.random.default_rng(3)
    R = geo.random_rotation(rng, 50)
    q = geo.rot_to_quat(R)
    np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0)
    np.testing.assert_allclose(geo.quat_to_rot(q), R, atol=1e-12)
    # (x, y, z, w) order: a quarter turn about z
    q = geo.rot_to_quat(geo.rot_exp(np.array([0, 0, np.pi / 2])))
    np.testing.assert_allclose(q, [0, 0, np.sqrt(0.5), np.sqrt(0.5)], atol=1e-15)


def test_jacobians_against_finite_differences():
    rng = np.random.default_rng(4)
    xi = rng.standard_normal(6) * 0.7
    h = 1e-6
    Jr = np.zeros((6, 6))
    Jl = np.zeros((6, 6))
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        Jr[:, i] = (geo.se3_log(geo.se3_exp(xi) @ geo.se3_exp(e))
                    - geo.se3_log(geo.se3_exp(xi) @ geo.se3_exp(-e))) / (2 * h)
        Jl[:, i] = (geo.se3_log(geo.se3_exp(e) @ geo.se3_exp(xi))
                    - geo.se3_log(geo.se3_exp(-e) @ geo.se3_exp(xi))) / (2 * h)
    np.testing.assert_allclose(geo.se3_right_jacobian_inv(xi), Jr, atol=1e-7)
    np.testing.assert_allclose(geo.se3_left_jacobian_inv(xi), Jl, atol=1e-7)
    np.testing.assert_allclose(geo.se3_left_jacobian(xi) @ Jl, np.eye(6), atol=1e-7)


def test_adjoint_moves_twists():
    rng = np.random.default_rng(5)
    T = geo.make_pose(geo.random_rotation(rng), rng.standard_normal(3))
    xi = rng.standard_normal(6)
    np.testing.assert_allclose(T @ geo.se3_exp(xi) @ geo.se3_inv(T),
                               geo.se3_exp(geo.se3_adjoint(T) @ xi), atol=1e-12)


def test_rotation_between():
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal(3), rng.standard_normal(3)
    R = geo.rotation_between(a, b)
    np.testing.assert_allclose(R @ (a / np.linalg.norm(a)), b / np.linalg.norm(b), atol=1e-12)
    R = geo.rotation_between(a, -a)
    np.testing.assert_allclose(R @ a, -a, atol=1e-12)
