import json

import numpy as np
import pytest
from dataclasses import replace

from springcam import geometry as geo
from springcam.dfn import (FORMAT, PROFILES, Dataset, DeformationNet, SpringLawNet, TrainConfig,
                           TrainingError, make_dataset, mean_l1, split_indices, train)
from springcam.dynamics import SpringParams, gen_pattern, simulate
from springcam.spline import SplineTrajectory


@pytest.fixture(scope="module")
def seq():
    return simulate(gen_pattern("D", 4.0, seed=11, strict_duration=False), duration=4.0)


def dataset(x, y):
    n = len(x)
    return Dataset(np.asarray(x, float), np.asarray(y, float), np.zeros(n, int), np.arange(n) / 360.0)


def fd_jacobian(f, x, h=1e-5):
    cols = []
    for i in range(x.shape[-1]):
        e = np.zeros(x.shape[-1])
        e[i] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def test_zero_weights_return_output_bias():
    net = DeformationNet.init((8, 8), seed=0)
    net.weights = [np.zeros_like(w) for w in net.weights]
    net.biases[-1] = np.arange(6.0)
    x = np.random.default_rng(0).standard_normal((5, 6))
    np.testing.assert_array_equal(net.forward(x), np.tile(np.arange(6.0), (5, 1)))
    np.testing.assert_array_equal(net.input_jacobian(x), 0.0)


def test_single_linear_layer():
    rng = np.random.default_rng(1)
    W, b = rng.standard_normal((6, 6)), rng.standard_normal(6)
    net = DeformationNet([W], [b])
    x = rng.standard_normal((4, 6))
    np.testing.assert_allclose(net.forward(x), x @ W.T + b, atol=1e-14)
    np.testing.assert_array_equal(net.input_jacobian(x), np.broadcast_to(W, (4, 6, 6)))


def test_input_jacobian_matches_finite_differences():
    net = DeformationNet.init((16, 16), seed=2)
    net.biases = [np.random.default_rng(3).standard_normal(b.shape) * 0.1 for b in net.biases]
    x = np.random.default_rng(4).standard_normal((20, 6))
    np.testing.assert_allclose(net.input_jacobian(x), fd_jacobian(net.forward, x), atol=1e-4)


def test_l1_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    net = DeformationNet.init((8,), seed=5)
    x, y = rng.standard_normal((10, 6)), rng.standard_normal((10, 6))
    _, gw, gb = net.l1_gradients(x, y)
    h = 1e-6
    for grads, params in ((gw, net.weights), (gb, net.biases)):
        for g, p in zip(grads, params):
            flat = p.reshape(-1)
            for j in range(0, flat.size, max(1, flat.size // 7)):
                old = flat[j]
                flat[j] = old + h
                up = net.l1_gradients(x, y)[0]
                flat[j] = old - h
                down = net.l1_gradients(x, y)[0]
                flat[j] = old
                assert abs((up - down) / (2 * h) - g.reshape(-1)[j]) < 1e-4


def test_layer_shape_validation():
    with pytest.raises(ValueError):
        DeformationNet([np.zeros((4, 6)), np.zeros((6, 5))], [np.zeros(4), np.zeros(6)])
    with pytest.raises(ValueError):
        DeformationNet([np.zeros((4, 6))], [np.zeros(3)])


def test_profiles():
    assert PROFILES["full"] == (384, 384, 384)
    assert DeformationNet.init(PROFILES["full"]).sizes == [6, 384, 384, 384, 6]


def test_json_round_trip(tmp_path):
    net = DeformationNet.init((5, 7), seed=6)
    net.save(tmp_path / "net.json")
    back = DeformationNet.load(tmp_path / "net.json")
    for a, b in zip(net.weights + net.biases, back.weights + back.biases):
        np.testing.assert_array_equal(a, b)
    d = net.to_dict()
    assert d["format"] == FORMAT
    with pytest.raises(ValueError, match="format"):
        DeformationNet.from_dict({**d, "format": "other"})
    d["layers"][0]["bias"][0] = float("nan")
    with pytest.raises(ValueError, match="finite"):
        DeformationNet.from_dict(json.loads(json.dumps(d)))


def test_labels_at_rest_are_gravity_in_camera_axes():
    base = spl_static()
    s = simulate(base, duration=2.0)
    data = make_dataset(s)
    Rc = s.camera.T[:, :3, :3]
    np.testing.assert_allclose(data.labels[:, :3], -np.einsum("nji,j->ni", Rc, s.gravity), atol=1e-9)
    np.testing.assert_allclose(data.labels[:, 3:], 0.0, atol=1e-9)
    np.testing.assert_allclose(data.inputs, geo.se3_log(s.relative_poses()), atol=1e-12)


def spl_static():
    return SplineTrajectory(4, 0.5, 0.0, np.tile(np.eye(4), (12, 1, 1)))


def test_labels_follow_the_mount_law():
    p = replace(SpringParams(), damping=0.0, c_theta=0.0, inertia=(1e-3, 1e-3, 1e-3))
    s = simulate(gen_pattern("C", 3.0, seed=12, strict_duration=False), p, duration=3.0)
    data = make_dataset(s)
    expect = SpringLawNet(p).forward(data.inputs)
    scale = np.abs(expect).max(0)
    assert np.all(np.abs(data.labels - expect) <= 1e-6 * scale + 1e-9)


def test_dataset_is_world_frame_invariant(seq):
    rng = np.random.default_rng(7)
    G = geo.Pose(geo.random_rotation(rng), rng.standard_normal(3))
    a, b = make_dataset(seq), make_dataset(seq.transformed(G))
    np.testing.assert_allclose(b.inputs, a.inputs, atol=1e-9)
    np.testing.assert_allclose(b.labels, a.labels, atol=1e-9)
    # the unnormalized variant keeps world axes and so moves with the frame
    raw = make_dataset(seq.transformed(G), normalize=False)
    assert np.abs(raw.labels[:, :3] - make_dataset(seq, normalize=False).labels[:, :3]).max() > 1e-3


def test_split_is_blockwise_and_disjoint():
    n = 3600
    data = dataset(np.zeros((n, 6)), np.zeros((n, 6)))
    s = split_indices(data, TrainConfig(block=360))
    allidx = np.concatenate([s.train, s.test, s.val])
    assert sorted(allidx.tolist()) == list(range(n))
    assert (len(s.train), len(s.test), len(s.val)) == (2520, 720, 360)
    for part in (s.train, s.test, s.val):
        assert len(np.unique(part // 360)) * 360 == len(part)


def test_memorizes_a_single_sample():
    x = np.tile([0.1, -0.2, 0.05, 0.01, -0.12, 0.0], (400, 1))
    y = np.tile([0.3, 9.7, -0.4, 1.0, 2.0, -3.0], (400, 1))
    res = train((16, 16), dataset(x, y), TrainConfig(lr=3e-3, epochs=200, batch=64, block=40))
    np.testing.assert_allclose(res.net.forward(x[:1])[0], y[0], atol=1e-3)
    assert res.train_l1[-1] < 1e-3


def test_learns_a_planted_linear_map():
    rng = np.random.default_rng(8)
    W = rng.standard_normal((6, 6))
    x = rng.standard_normal((4000, 6))
    data = dataset(x, x @ W.T)
    res = train((32, 32), data, TrainConfig.profile("tiny", epochs=300, block=100))
    xt = rng.standard_normal((500, 6))
    err = np.abs(res.net.forward(xt) - xt @ W.T).mean()
    assert err < 0.05 * np.abs(xt @ W.T).mean()


def test_training_is_reproducible(seq):
    data = make_dataset(seq)
    cfg = TrainConfig.profile("tiny", epochs=3, seed=4)
    a, b = train((8, 8), data, cfg), train((8, 8), data, cfg)
    for u, v in zip(a.net.weights + a.net.biases, b.net.weights + b.net.biases):
        np.testing.assert_array_equal(u, v)
    assert a.train_l1 == b.train_l1
    c = train((8, 8), data, replace(cfg, seed=5))
    assert not np.array_equal(a.net.weights[0], c.net.weights[0])


def test_loss_csv_has_one_row_per_epoch(seq):
    res = train((8,), make_dataset(seq), TrainConfig.profile("tiny", epochs=4, block=60))
    lines = res.loss_csv().strip().splitlines()
    assert lines[0] == "epoch,train_l1,val_l1"
    assert len(lines) == 5
    assert np.isclose(float(lines[-1].split(",")[1]), res.train_l1[-1])
    assert np.isclose(res.val_l1[-1], mean_l1(res.net, make_dataset(seq).subset(res.split.val)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_raises():
    x = np.random.default_rng(9).standard_normal((100, 6))
    y = np.zeros((100, 6))
    y[3, 0] = np.inf
    with pytest.raises(TrainingError, match="non-finite"):
        train((4,), dataset(x, y), TrainConfig(epochs=2, block=10))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(split=(0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        TrainConfig.profile("huge")
