import math

import numpy as np
import pytest

from fastcar.nn import (
    Adam,
    DenseNet,
    DivergenceError,
    Layer,
    PlateauScheduler,
    cross_entropy,
    load_checkpoint,
    loss_and_grads,
    minibatches,
    mse,
    save_checkpoint,
)


def _net(seed=0, d=5, hidden=(7, 6), heads=None):
    heads = heads or {"reg": 1, "cls": 3}
    return DenseNet.build(d, hidden, heads, np.random.default_rng(seed))


def _loop_forward(net, x):
    """Reference forward pass with explicit loops."""
    h = list(x)
    for layer in net.trunk:
        out = []
        for j in range(layer.fan_out):
            z = layer.bias[j]
            for i in range(layer.fan_in):
                z += layer.weight[j, i] * h[i]
            out.append(max(z, 0.0))
        h = out
    res = {}
    for name, layer in net.heads.items():
        res[name] = [
            layer.bias[j] + sum(layer.weight[j, i] * h[i] for i in range(layer.fan_in))
            for j in range(layer.fan_out)
        ]
    return res


def test_forward_matches_loops():
    net = _net()
    x = np.random.default_rng(1).normal(size=(4, 5))
    outs = net.forward(x)
    for row in range(4):
        ref = _loop_forward(net, x[row])
        for name in ref:
            np.testing.assert_allclose(outs[name][row], ref[name], rtol=1e-12, atol=1e-12)


def test_single_vector_forward():
    net = _net()
    x = np.arange(5.0)
    assert net.forward(x)["reg"].shape == (1, 1)


def test_dimension_mismatch():
    net = _net()
    with pytest.raises(ValueError, match="dimension 5"):
        net.forward(np.zeros((2, 4)))


def test_heads_must_match_trunk():
    rng = np.random.default_rng(0)
    trunk = [Layer(rng.normal(size=(4, 3)), np.zeros(4))]
    with pytest.raises(ValueError, match="head"):
        DenseNet(trunk, {"a": Layer(rng.normal(size=(1, 5)), np.zeros(1), "identity")})


def test_build_is_deterministic():
    a, b = _net(seed=4), _net(seed=4)
    for k, v in a.parameters().items():
        assert np.array_equal(v, b.parameters()[k])


def test_glorot_bounds():
    net = _net(hidden=(40,))
    w = net.trunk[0].weight
    assert np.abs(w).max() <= math.sqrt(6 / (5 + 40))
    assert np.all(net.trunk[0].bias == 0)


@pytest.mark.parametrize("weights", [(1.0, 0.0), (0.0, 1.0), (0.7, 1.3)])
def test_gradients_match_finite_differences(weights):
    rng = np.random.default_rng(2)
    net = _net(seed=3, hidden=(6, 5, 4))
    x = rng.normal(size=(9, 5))
    targets = {"reg": rng.normal(size=9), "cls": rng.integers(0, 3, 9)}
    spec = {"reg": ("mse", weights[0]), "cls": ("ce", weights[1])}
    _, grads, _ = loss_and_grads(net, x, targets, spec)
    h = 1e-5
    worst = 0.0
    for name, p in net.parameters().items():
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = loss_and_grads(net, x, targets, spec)[0]
            p[idx] = orig - h
            down = loss_and_grads(net, x, targets, spec)[0]
            p[idx] = orig
            num = (up - down) / (2 * h)
            denom = max(abs(num), abs(grads[name][idx]), 1e-8)
            worst = max(worst, abs(num - grads[name][idx]) / denom if denom > 1e-6 else abs(num - grads[name][idx]))
    assert worst < 1e-4


def test_missing_head_gets_zero_grads():
    net = _net()
    _, grads, _ = loss_and_grads(net, np.ones((2, 5)), {"reg": np.zeros(2)}, {"reg": ("mse", 1.0)})
    assert not grads["head.cls.weight"].any()


def test_nonfinite_loss_raises():
    net = _net()
    with pytest.raises(DivergenceError):
        loss_and_grads(net, np.ones((2, 5)), {"reg": np.array([np.inf, 0.0])}, {"reg": ("mse", 1.0)})


def test_unknown_loss_kind():
    with pytest.raises(ValueError, match="unknown loss"):
        loss_and_grads(_net(), np.ones((1, 5)), {"reg": [0.0]}, {"reg": ("huber", 1.0)})


# losses ---------------------------------------------------------------------------

def test_uniform_cross_entropy():
    assert cross_entropy(np.zeros(6), 2) == pytest.approx(math.log(6))


def test_cross_entropy_stable_for_large_logits():
    assert cross_entropy(np.array([[1000.0, 0.0]]), [0]) == pytest.approx(0.0, abs=1e-12)


def test_mse_of_collapsed_band():
    rng = np.random.default_rng(0)
    truth = rng.uniform(179, 1146, 500)
    preds = rng.uniform(600, 620, 500)
    expected = sum((p - t) ** 2 for p, t in zip(preds, truth)) / 500
    assert mse(preds, truth) == pytest.approx(expected)
    assert 1e4 < mse(preds, truth) < 1e6


# Adam ---------------------------------------------------------------------------------

def test_adam_first_step_by_hand():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -0.25])}
    Adam(lr=0.1, weight_decay=0.0).step(p, g)
    # m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    expected = np.array([1.0, -2.0]) - 0.1 * np.array([0.5, -0.25]) / (np.array([0.5, 0.25]) + 1e-8)
    np.testing.assert_allclose(p["w"], expected, rtol=1e-14)


def test_weight_decay_only():
    p = {"w": np.array([3.0, -1.0])}
    Adam(lr=1e-3, weight_decay=1e-4).step(p, {"w": np.zeros(2)})
    np.testing.assert_allclose(p["w"], np.array([3.0, -1.0]) * (1 - 1e-7), rtol=1e-15)


def test_zero_lr_is_noop():
    p = {"w": np.array([3.0, -1.0])}
    Adam(lr=0.0).step(p, {"w": np.array([5.0, 5.0])})
    assert np.array_equal(p["w"], [3.0, -1.0])


def test_adam_rejects_mismatch():
    with pytest.raises(ValueError):
        Adam().step({"w": np.zeros(2)}, {"v": np.zeros(2)})
    with pytest.raises(ValueError, match="shape"):
        Adam().step({"w": np.zeros(2)}, {"w": np.zeros(3)})


def test_adam_reduces_quadratic():
    p = {"w": np.array([4.0])}
    opt = Adam(lr=0.1, weight_decay=0.0)
    for _ in range(200):
        opt.step(p, {"w": 2 * p["w"]})
    assert abs(p["w"][0]) < 0.1


# scheduler --------------------------------------------------------------------------------

def test_scheduler_flat_metric():
    s = PlateauScheduler(factor=0.1, patience=5)
    lr = 1e-3
    lrs = []
    for _ in range(8):
        lr = s.step(1.0, lr)
        lrs.append(lr)
    # first call improves on inf; five stale epochs tolerated; the sixth drops
    assert lrs[:6] == [1e-3] * 6
    assert lrs[6] == pytest.approx(1e-4)


def test_scheduler_improving_metric_never_drops():
    s = PlateauScheduler(patience=0)
    lr = 1.0
    for m in np.linspace(10, 1, 50):
        lr = s.step(m, lr)
    assert lr == 1.0


def test_scheduler_min_lr():
    s = PlateauScheduler(factor=0.5, patience=0, min_lr=0.3)
    lr = 1.0
    for _ in range(10):
        lr = s.step(5.0, lr)
    assert lr == 0.3


@pytest.mark.parametrize("kw", [{"factor": 1.0}, {"factor": 0.0}, {"patience": -1}])
def test_scheduler_validation(kw):
    with pytest.raises(ValueError):
        PlateauScheduler(**kw)


# batches / checkpoints ----------------------------------------------------------------------

def test_minibatches_cover_once():
    batches = list(minibatches(10, 3, np.random.default_rng(0)))
    assert [len(b) for b in batches] == [3, 3, 3, 1]
    assert sorted(np.concatenate(batches)) == list(range(10))


def test_checkpoint_round_trip(tmp_path):
    net = _net()
    opt = Adam(lr=0.01)
    x = np.random.default_rng(0).normal(size=(3, 5))
    _, grads, _ = loss_and_grads(net, x, {"reg": np.zeros(3)}, {"reg": ("mse", 1.0)})
    opt.step(net.parameters(), grads)
    sched = PlateauScheduler(patience=3)
    sched.step(0.5, opt.lr)
    path = tmp_path / "c.npz"
    save_checkpoint(path, net, opt, sched, {"note": "x"})
    net2, opt2, sched2, extra = load_checkpoint(path)
    for k, v in net.parameters().items():
        assert np.array_equal(v, net2.parameters()[k])
    assert opt2.step_count == 1 and opt2.lr == 0.01
    for k in opt.m:
        assert np.array_equal(opt.m[k], opt2.m[k])
        assert np.array_equal(opt.v[k], opt2.v[k])
    assert sched2 == sched
    assert extra == {"note": "x"}
    for k, v in net.forward(x).items():
        assert np.array_equal(v, net2.forward(x)[k])


def test_checkpoint_version_check(tmp_path):
    path = tmp_path / "c.npz"
    save_checkpoint(path, _net())
    with np.load(path) as z:
        arrays = dict(z)
    arrays["meta"] = np.frombuffer(b'{"version": "other"}', dtype=np.uint8)
    np.savez(path, **arrays)
    with pytest.raises(ValueError, match="unsupported"):
        load_checkpoint(path)
