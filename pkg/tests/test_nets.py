import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wmtract import autograd as ag
from wmtract.errors import ShapeError, SpecError
from wmtract.nets import LossSpec, NetworkSpec, build_network, expected_param_count, loss_wce, loss_wip


def test_param_count_by_hand():
    spec = NetworkSpec("unet", in_channels=6, levels=1, base_channels=4)
    # two blocks: (6*4*27 + 4 bias + 4 gamma + 4 beta + 4 slopes), (4*4*27 + 16); head 4 + 1
    hand = (648 + 16) + (432 + 16) + 5
    assert hand == 1117
    assert build_network(spec).num_params() == hand == expected_param_count(spec)


@pytest.mark.parametrize("arch", ["unet", "vnet"])
@pytest.mark.parametrize("levels", [1, 2, 3])
def test_param_count_closed_form(arch, levels):
    spec = NetworkSpec(arch, 3, levels, 4)
    assert build_network(spec).num_params() == expected_param_count(spec)


@pytest.mark.parametrize("arch", ["unet", "vnet"])
def test_output_contract(arch, rng):
    net = build_network(NetworkSpec(arch, 6, 2, 4), seed=1)
    x = rng.standard_normal((2, 6, 8, 4, 6)).astype(np.float32)
    p = net.forward(x)
    assert p.shape == (2, 1, 8, 4, 6) and p.dtype == np.float32
    assert np.all((p > 0) & (p < 1))
    p_eval = net.forward(x, training=False)
    assert p_eval.shape == p.shape


def test_96x64x64_roi_builds():
    net = build_network(NetworkSpec("unet", 6, 3, 16))
    net.check_input((1, 6, 96, 64, 64))


def test_indivisible_axis_named():
    net = build_network(NetworkSpec("unet", 6, 3, 2))
    with pytest.raises(ShapeError, match="axis Y"):
        net.check_input((1, 6, 8, 6, 8))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 5, 8, 8, 8), np.float32))


def test_spec_validation():
    with pytest.raises(SpecError):
        NetworkSpec("resnet")
    with pytest.raises(SpecError):
        NetworkSpec(levels=0)
    with pytest.raises(SpecError):
        LossSpec("dice")
    with pytest.raises(SpecError):
        LossSpec(weight=0.5)


@pytest.mark.parametrize("arch", ["unet", "vnet"])
def test_batch_permutation(arch, rng):
    net = build_network(NetworkSpec(arch, 2, 2, 3), seed=3)
    x = rng.standard_normal((3, 2, 4, 4, 4)).astype(np.float32)
    perm = [2, 0, 1]
    a = net.forward(x, training=False)
    b = net.forward(x[perm], training=False)
    np.testing.assert_allclose(b, a[perm], rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("arch", ["unet", "vnet"])
def test_network_gradient(arch, rng):
    net = build_network(NetworkSpec(arch, 2, 2, 2), seed=5, dtype=np.float64)
    x = rng.standard_normal((2, 2, 4, 4, 4))
    r = (rng.random((2, 1, 4, 4, 4)) > 0.5).astype(float)
    params = net.params()
    names = ["enc0.conv1.w", "head.w", f"up0.w", "enc1.bn1.gamma"]
    names = [n for n in names if n in params]
    assert names
    sizes = [params[n].size for n in names]

    def f(theta):
        off = 0
        for n, s in zip(names, sizes):
            params[n][...] = theta[off : off + s].reshape(params[n].shape)
            off += s
        net.zero_grad()
        loss, dp = loss_wce(net.forward(x), r, 3.0)
        net.backward(dp)
        g = net.grads()
        return loss, np.concatenate([g[n].ravel() for n in names])

    theta0 = np.concatenate([params[n].ravel() for n in names])
    assert ag.finite_diff_check(f, theta0) < 1e-4


def test_loss_wip_examples():
    r = np.array([1.0, 0, 1, 0, 0])
    assert loss_wip(r.copy(), r, 1.0)[0] == -1
    loss, _ = loss_wip(np.array([0.8, 0.3]), np.array([1.0, 0.0]), 3.0)
    assert abs(loss - (-1.55)) < 1e-12
    assert loss_wip(np.ones(4), np.ones(4), 3.0)[0] == -3
    with pytest.raises(ShapeError):
        loss_wip(np.ones(3), np.ones(4), 1.0)


@pytest.mark.parametrize("w", [1, 3, 5, 10, 100])
def test_loss_wip_foreground_gradient_exact(w, rng):
    p = rng.random(50)
    r = (rng.random(50) > 0.4).astype(float)
    _, g = loss_wip(p, r, float(w))
    assert np.all(g[r == 1] == -w / 50)
    assert np.all(g[r == 0] == 1 / 50)


@given(st.lists(st.booleans(), min_size=1, max_size=30), st.lists(st.booleans(), min_size=30, max_size=30))
def test_loss_wip_equals_minus_accuracy(ref, pred):
    r = np.array(ref, float)
    p = np.array(pred[: len(ref)], float)
    assert loss_wip(p, r, 1.0)[0] == pytest.approx(-np.mean(p == r), abs=1e-12)


def test_loss_wce_examples():
    assert abs(loss_wce(np.array([0.5, 0.5]), np.array([1.0, 0.0]), 1.0)[0] - math.log(2)) < 1e-12
    assert loss_wce(np.array([1.0, 0.0]), np.array([1.0, 0.0]), 3.0)[0] < 1e-6
    loss, g = loss_wce(np.array([0.0, 0.5]), np.array([1.0, 0.0]), 2.0)
    assert np.isfinite(loss) and np.all(np.isfinite(g))
    assert loss == pytest.approx((-2 * math.log(1e-7) - math.log(0.5)) / 2, rel=1e-9)


@pytest.mark.parametrize("fn", [loss_wip, loss_wce])
def test_loss_gradients_fd(fn, rng):
    r = (rng.random(12) > 0.5).astype(float)
    p0 = rng.uniform(0.1, 0.9, 12)
    assert ag.finite_diff_check(lambda p: fn(p, r, 5.0), p0) < 1e-4


def test_loss_spec_dispatch():
    p, r = np.array([0.8, 0.3]), np.array([1.0, 0.0])
    assert LossSpec("wip", 3)(p, r)[0] == loss_wip(p, r, 3)[0]
    assert LossSpec("wce", 3)(p, r)[0] == loss_wce(p, r, 3)[0]


def test_state_dict_roundtrip(tmp_path):
    spec = NetworkSpec("vnet", 2, 2, 2)
    a, b = build_network(spec, seed=1), build_network(spec, seed=2)
    a.forward(np.ones((2, 2, 4, 4, 4), np.float32))  # moves running stats
    ag.save_params(tmp_path / "a.wmtp", a.state_dict())
    b.load_state_dict(ag.load_params(tmp_path / "a.wmtp"))
    x = np.random.default_rng(0).standard_normal((1, 2, 4, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(a.forward(x, False), b.forward(x, False))
    with pytest.raises(ShapeError):
        build_network(NetworkSpec("unet", 2, 2, 2)).load_state_dict(a.state_dict())
