import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from springcam import geometry as geo
from springcam.metrics import ape, associate, gravity_error, scale_error, umeyama

vec3 = st.lists(st.floats(-10, 10), min_size=3, max_size=3).map(np.array).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


@pytest.fixture
def track():
    rng = np.random.default_rng(0)
    return np.cumsum(rng.standard_normal((200, 3)) * 0.05, axis=0)


def test_ape_identical(track):
    assert ape(track, track, "none").mean == 0.0
    s = ape(track, track)  # the alignment itself rounds
    assert max(s.mean, s.median, s.std) < 1e-12


def test_ape_sim3_absorbs_scale(track):
    s = ape(2.0 * track, track, "sim3_align")
    assert s.max < 1e-9
    assert abs(s.scale - 0.5) < 1e-12


def test_ape_without_alignment(track):
    s = ape(track + [1.0, 0, 0], track, "none")
    assert abs(s.mean - 1) < 1e-12 and abs(s.median - 1) < 1e-12 and s.std < 1e-12


def test_se3_alignment_ignores_rigid_motion(track):
    rng = np.random.default_rng(1)
    noisy = track + rng.standard_normal(track.shape) * 0.01
    R, t = geo.random_rotation(rng), rng.standard_normal(3)
    a = ape(noisy, track)
    b = ape(noisy @ R.T + t, track)
    assert abs(a.mean - b.mean) < 1e-9 and abs(a.std - b.std) < 1e-9
    # rigid alignment must not absorb scale
    assert ape(2.0 * track, track).mean > 0.01


def test_umeyama_recovers_similarity(track):
    rng = np.random.default_rng(2)
    R, t = geo.random_rotation(rng), rng.standard_normal(3)
    s, R_, t_ = umeyama(track, 0.3 * track @ R.T + t, with_scale=True)
    assert abs(s - 0.3) < 1e-12
    np.testing.assert_allclose(R_, R, atol=1e-10)
    np.testing.assert_allclose(t_, t, atol=1e-10)


def test_ape_accepts_poses_and_timestamps(track):
    T = geo.make_pose(np.tile(np.eye(3), (200, 1, 1)), track)
    t = np.arange(200) / 100.0
    s = ape(T[::2], T, "none", t_est=t[::2] + 1e-4, t_gt=t)
    assert s.n == 100 and s.max == 0.0
    i, j = associate(np.array([0.0, 0.5, 10.0]), t)
    assert i.tolist() == [0, 1] and j.tolist() == [0, 50]


def test_ape_errors(track):
    with pytest.raises(ValueError, match="mode"):
        ape(track, track, "affine")
    with pytest.raises(ValueError, match="three"):
        ape(track[:2], track[:2])
    with pytest.raises(ValueError):
        ape(track[:10], track)


def test_scale_error_examples():
    assert scale_error(0.251, 0.251) == 0.0
    assert abs(scale_error(0.183, 0.251) - 0.271) < 5e-4
    # the published 0.246 differs from 0.247 only through rounding of the inputs
    assert abs(scale_error(0.308, 0.247) - 0.247) < 5e-4
    assert abs(scale_error(0.308, 0.247) - 0.246) < 2e-3
    with pytest.raises(ValueError):
        scale_error(0.2, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0.01, 100))
def test_scale_error_is_scale_covariant(a, b, c):
    assert abs(scale_error(c * a, c * b) - scale_error(a, b)) <= 1e-9 * max(1.0, scale_error(a, b))


def test_gravity_error_examples():
    g = np.array([0.0, -1.0, 0.0])
    assert gravity_error(g, 3 * g) == 0.0
    assert abs(gravity_error(g, [1.0, 0, 0]) - 90.0) < 1e-12
    # oracle: rotate g by exactly 2 degrees about z
    tilted = geo.rot_exp(np.array([0, 0, np.radians(2.0)])) @ g
    np.testing.assert_allclose(tilted, [np.sin(np.radians(2)), -np.cos(np.radians(2)), 0], atol=1e-15)
    assert abs(gravity_error(g, tilted) - 2.0) < 1e-6
    assert abs(gravity_error(g, -g) - 180.0) < 1e-12
    with pytest.raises(ValueError):
        gravity_error(g, np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(vec3, vec3, st.floats(0.1, 10))
def test_gravity_error_symmetry_and_scaling(a, b, c):
    e = gravity_error(a, b)
    assert 0.0 <= e <= 180.0
    assert abs(gravity_error(b, a) - e) < 1e-9
    assert abs(gravity_error(c * a, b) - e) < 1e-9
