import numpy as np
import pytest
from dataclasses import replace

from springcam import geometry as geo
from springcam import estimator as est
from springcam import spline as spl
from springcam.dfn import DeformationNet, SpringLawNet
from springcam.dynamics import SpringParams, gen_pattern, simulate
from springcam.experiment import evaluate_sim
from springcam.metrics import gravity_error

# undamped, isotropic mount: the spring law is then an exact network
EXACT = replace(SpringParams(), damping=0.0, c_theta=0.0, inertia=(1e-3, 1e-3, 1e-3))


@pytest.fixture(scope="module")
def problem():
    seq = simulate(gen_pattern("D", 8.0, seed=3, strict_duration=False), EXACT, duration=8.0)
    vo = est.exact_track(seq.t, seq.camera.T, seq.camera.acc, seq.camera.alpha,
                         scale=1.0, rotation=np.eye(3))
    return seq, vo, SpringLawNet(EXACT)


@pytest.fixture(scope="module")
def initial(problem):
    seq, vo, net = problem
    return est.initialize(vo, net, seq.gravity, EXACT, report=True)


def truth(seq):
    return est.EstimatorState(1.0, np.eye(3), seq.base_spline)


EXACT_CFG = est.SolverConfig(rate=None)  # residuals at the exact VO samples


def gravity_angle_deg(R):
    g = np.array([0.0, -1.0, 0.0])
    return gravity_error(R.T @ g, g)


def perturbed(seq, d_scale=1.10, d_rot_deg=5.0, d_knot=0.02):
    rng = np.random.default_rng(21)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    R = geo.rot_exp(np.radians(d_rot_deg) * axis)
    ctrl = seq.base_spline.control.copy()
    shift = rng.standard_normal((len(ctrl), 3))
    ctrl[:, :3, 3] += d_knot * shift / np.linalg.norm(shift, axis=1, keepdims=True)
    return est.EstimatorState(d_scale, R, seq.base_spline.with_control(ctrl))


def test_true_state_has_zero_residual(problem):
    seq, vo, net = problem
    st = truth(seq)
    s = est.residual_samples(vo, None, st.base.domain)
    assert np.abs(est.residual(st, s, net, seq.gravity)).max() < 1e-5


def test_scale_scan_has_one_interior_minimum(initial):
    _, rep = initial
    i = int(np.argmin(rep.cost))
    assert 0 < i < len(rep.cost) - 1
    assert np.all(np.diff(rep.cost[:i + 1]) < 0)
    assert np.all(np.diff(rep.cost[i:]) > 0)
    assert abs(np.exp(rep.grid[i]) - 1.0) < 0.25


def test_initialization_then_solve(problem, initial):
    seq, vo, net = problem
    state, _ = initial
    assert 0.5 < state.scale < 2.0
    one = est.solve(vo, net, seq.gravity, state, est.SolverConfig(max_iters=1))
    assert abs(one.state.scale - 1.0) < 0.05
    sol = est.solve(vo, net, seq.gravity, state)
    assert sol.converged
    assert abs(sol.state.scale - 1.0) < 0.005
    assert gravity_angle_deg(sol.state.R) < 0.5


def test_solve_from_perturbed_truth(problem):
    seq, vo, net = problem
    sol = est.solve(vo, net, seq.gravity, perturbed(seq), EXACT_CFG)
    assert sol.converged
    assert abs(sol.state.scale - 1.0) < 0.005
    assert gravity_angle_deg(sol.state.R) < 0.5
    assert np.all(np.diff(sol.cost) <= 0)


def test_truth_is_a_fixed_point(problem):
    seq, vo, net = problem
    sol = est.solve(vo, net, seq.gravity, truth(seq), EXACT_CFG)
    assert abs(sol.state.scale - 1.0) <= 1e-9
    first = est.solve(vo, net, seq.gravity, perturbed(seq), EXACT_CFG)
    again = est.solve(vo, net, seq.gravity, first.state, EXACT_CFG)
    assert abs(again.state.scale - first.state.scale) <= 1e-9 * first.state.scale


def test_yaw_about_gravity_is_unobservable(problem):
    seq, _, net = problem
    yawed = seq.transformed(geo.Pose(geo.rot_exp(np.array([0.0, 0.7, 0.0])), [0.3, 0.0, -0.2]))
    out = []
    for s in (seq, yawed):
        vo = est.perturb(s.t, s.camera.T, est.PerturbConfig(noise=0.01, seed=9))
        sol = est.solve(vo, net, s.gravity, params=EXACT)
        out.append(evaluate_sim(s, vo, sol))
    assert abs(out[0]["err_lambda"] - out[1]["err_lambda"]) < 1e-6
    assert abs(out[0]["err_g"] - out[1]["err_g"]) < 1e-6


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(0)
    net = DeformationNet.init((16, 16), seed=1)
    t = np.linspace(0, 1.0, 40)
    cam = spl.SplineTrajectory(4, 0.1, 0.0, geo.se3_exp(rng.normal(size=(13, 6)) * 0.3))
    vo = est.fit_track(t, cam.evaluate(t), 0.1)
    base = spl.SplineTrajectory(4, 0.5, 0.0, geo.se3_exp(rng.normal(size=(5, 6)) * 0.2))
    st = est.EstimatorState(0.7, geo.random_rotation(rng), base)
    s = est.residual_samples(vo, None, base.domain)
    r, J = est.residual_jacobian(st, s, net)
    np.testing.assert_allclose(r, est.residual(st, s, net), atol=1e-12)
    n = J.shape[-1]
    h = 1e-6
    Jn = np.zeros_like(J)
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        Jn[:, :, i] = (est.residual(st.retract(e), s, net) - est.residual(st.retract(-e), s, net)) / (2 * h)
    assert np.abs(J - Jn).max() < 1e-5 * max(1.0, np.abs(Jn).max())


def test_jacobian_with_camera_path_matches_finite_differences():
    rng = np.random.default_rng(1)
    net = DeformationNet.init((16, 16), seed=2)
    t = np.linspace(0, 1.0, 40)
    cam = spl.SplineTrajectory(4, 0.1, 0.0, geo.se3_exp(rng.normal(size=(13, 6)) * 0.3))
    vo = est.fit_track(t, cam.evaluate(t), 0.1)
    base = spl.SplineTrajectory(4, 0.5, 0.0, geo.se3_exp(rng.normal(size=(5, 6)) * 0.2))
    path = est.camera_path(vo, 0.2).retract(rng.normal(size=6 * 8) * 0.01)
    st = est.EstimatorState(0.7, geo.random_rotation(rng), base, rng.normal(size=3), path)
    s = est.residual_samples(vo, 30.0, base.domain)
    r, J = est.residual_jacobian(st, s, net)
    assert J.shape[-1] == 4 + 6 * 5 + 6 * 8
    np.testing.assert_allclose(r, est.residual(st, s, net), atol=1e-12)
    n = J.shape[-1]
    h = 1e-6
    Jn = np.zeros_like(J)
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        Jn[:, :, i] = (est.residual(st.retract(e), s, net) - est.residual(st.retract(-e), s, net)) / (2 * h)
    assert np.abs(J - Jn).max() < 1e-5 * max(1.0, np.abs(Jn).max())


def test_pose_rows_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    t = np.linspace(0, 1.0, 40)
    cam = spl.SplineTrajectory(4, 0.1, 0.0, geo.se3_exp(rng.normal(size=(13, 6)) * 0.3))
    vo = est.fit_track(t, cam.evaluate(t), 0.1)
    path = est.camera_path(vo, 0.2).retract(rng.normal(size=6 * 8) * 0.05)
    rows = est._PoseRows(vo, path)
    J = rows.jacobian(path, 10 + path.n_params).toarray()
    assert np.all(J[:, :10] == 0)
    h = 1e-6
    for i in range(path.n_params):
        e = np.zeros(path.n_params)
        e[i] = h
        fd = (rows.residual(path.retract(e)) - rows.residual(path.retract(-e))).ravel() / (2 * h)
        assert np.abs(J[:, 10 + i] - fd).max() < 1e-6


def test_static_track_is_rejected():
    t = np.arange(0, 5, 1 / 60)
    T = np.tile(np.eye(4), (len(t), 1, 1))
    T[:, :3, 3] = [0.1, 0.2, 0.3]
    vo = est.exact_track(t, T, np.zeros((len(t), 3)), np.zeros((len(t), 3)))
    with pytest.raises(est.InitializationError, match="static"):
        est.initialize(vo, SpringLawNet(EXACT))


def test_camera_pose_opt_example():
    state = est.EstimatorState(2.0, geo.rot_exp(np.array([0, 0, np.pi / 2])),
                               spl.SplineTrajectory(4, 1.0, 0.0, np.tile(np.eye(4), (4, 1, 1))))
    T = geo.make_pose(np.eye(3), [1.0, 0, 0])
    out = est.camera_pose_opt(state, T)
    np.testing.assert_allclose(out[:3, 3], [0, 2.0, 0], atol=1e-15)
    np.testing.assert_allclose(out[:3, :3], state.R)


@pytest.fixture(scope="module")
def metric_track():
    t = np.arange(1000) / 100.0
    rng = np.random.default_rng(2)
    ctrl = geo.se3_exp(rng.normal(size=(14, 6)) * 0.2)
    T = spl.SplineTrajectory(4, 1.0, 0.0, ctrl).evaluate(t)
    return t, T


def increments(T, vo):
    return geo.se3_log(geo.se3_inv(T) @ vo.T)


def test_perturb_identity(metric_track):
    t, T = metric_track
    vo = est.perturb(t, T, est.PerturbConfig(scale=1.0, rotation=(0, 0, 0), knot_dt=0.5))
    np.testing.assert_allclose(vo.T, T, atol=1e-12)
    assert len(vo.outliers) == 0


def test_perturb_noise_level(metric_track):
    t, T = metric_track
    cfg = est.PerturbConfig(noise=0.03, scale=1.0, rotation=(0, 0, 0), seed=4, knot_dt=0.5)
    d = increments(T, est.perturb(t, T, cfg))
    assert abs(d[:, :3].std() / 0.03 - 1) < 0.2
    c = T[:, :3, 3] - T[:, :3, 3].mean(0)
    diag = np.linalg.norm(np.ptp(c @ np.linalg.svd(c, full_matrices=False)[2].T, axis=0))
    assert abs(d[:, 3:].std() / (0.03 * diag) - 1) < 0.2
    # common random numbers: the draws scale with the amplitude
    d5 = increments(T, est.perturb(t, T, replace(cfg, noise=0.05)))
    np.testing.assert_allclose(d5[:, :3], d[:, :3] * 5 / 3, atol=1e-9)


def test_perturb_outliers_are_nested(metric_track):
    t, T = metric_track
    cfg = est.PerturbConfig(outlier_ratio=0.05, scale=1.0, rotation=(0, 0, 0), seed=5, knot_dt=0.5)
    a = est.perturb(t, T, cfg)
    b = est.perturb(t, T, replace(cfg, outlier_ratio=0.01))
    assert len(a.outliers) == 50 and len(b.outliers) == 10
    assert set(b.outliers) <= set(a.outliers)
    d = np.linalg.norm(increments(T, a)[:, :3], axis=1)
    np.testing.assert_allclose(d[a.outliers], 0.2, atol=1e-12)
    assert np.abs(np.delete(d, a.outliers)).max() < 1e-12


def test_perturb_similarity(metric_track):
    t, T = metric_track
    vo = est.perturb(t, T, est.PerturbConfig(seed=6, knot_dt=0.5))
    assert 0.05 <= vo.scale <= 0.6
    back = est.camera_pose_opt(est.EstimatorState(vo.scale, vo.rotation, spl.SplineTrajectory(
        4, 1.0, 0.0, np.tile(np.eye(4), (4, 1, 1)))), vo.T)
    np.testing.assert_allclose(back, T, atol=1e-9)


def test_perturb_config_validation():
    with pytest.raises(ValueError):
        est.PerturbConfig(noise=-0.1)
    with pytest.raises(ValueError):
        est.PerturbConfig(outlier_ratio=0.7)
