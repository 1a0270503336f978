import numpy as np
import pytest

from wmtract import autograd as ag
from wmtract import kernels
from wmtract.errors import NumericError, ShapeError
from wmtract.gradcheck import OPERATORS, TOL, run_gradchecks

BACKENDS = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    old = kernels.backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(old)


def naive_conv(x, w, b, stride, padding):
    """Six nested loops over output voxels and kernel taps."""
    nb, cin, *sp = x.shape
    cout, _, k = w.shape[:3]
    outs, pads = ag.conv_geometry(sp, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple(pads))
    y = np.zeros((nb, cout, *outs))
    for i in range(outs[0]):
        for j in range(outs[1]):
            for l in range(outs[2]):
                for a in range(k):
                    for c in range(k):
                        for d in range(k):
                            v = xp[:, :, i * stride + a, j * stride + c, l * stride + d]
                            y[:, :, i, j, l] += v @ w[:, :, a, c, d].T
    return y + (0 if b is None else b.reshape(1, -1, 1, 1, 1))


def test_conv_identity_and_zero(backend, rng):
    x = rng.standard_normal((2, 1, 4, 5, 3)).astype(np.float32)
    y = ag.conv3d(x, np.ones((1, 1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
    np.testing.assert_array_equal(y, x)
    z = ag.conv3d(x, np.zeros((2, 1, 3, 3, 3), np.float32), np.zeros(2, np.float32))
    assert z.shape == (2, 2, 4, 5, 3) and not z.any()


def test_conv_ones_center_and_corner(backend):
    y = ag.conv3d(np.ones((1, 1, 3, 3, 3)), np.ones((1, 1, 3, 3, 3)))
    assert y[0, 0, 1, 1, 1] == 27
    for c in [(0, 0, 0), (2, 2, 2), (0, 2, 0), (2, 0, 2)]:
        assert y[(0, 0) + c] == 8
    np.testing.assert_array_equal(y, naive_conv(np.ones((1, 1, 3, 3, 3)), np.ones((1, 1, 3, 3, 3)), None, 1, "same"))


@pytest.mark.parametrize("stride,padding,shape", [(1, "same", (5, 4, 6)), (2, "same", (5, 4, 6)), (1, "valid", (5, 4, 6)), (2, "valid", (7, 5, 6))])
def test_conv_matches_loop_oracle(backend, rng, stride, padding, shape):
    x = rng.standard_normal((2, 3) + shape)
    w = rng.standard_normal((4, 3, 3, 3, 3))
    b = rng.standard_normal(4)
    y = ag.conv3d(x, w, b, stride, padding)
    np.testing.assert_allclose(y, naive_conv(x, w, b, stride, padding), atol=1e-12)
    if padding == "same":
        assert y.shape[2:] == tuple(-(-n // stride) for n in shape)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        ag.conv3d(np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 3, 3, 3)))
    with pytest.raises(ShapeError):
        ag.conv3d(np.zeros((1, 1, 2, 4, 4)), np.zeros((1, 1, 3, 3, 3)), padding="valid")


def test_conv_workers_bit_identical(monkeypatch, rng):
    monkeypatch.setattr(ag, "BLOCK_BYTES", 4096)  # force many blocks
    x = rng.standard_normal((2, 3, 9, 6, 7)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3, 3)).astype(np.float32)
    y1 = ag.conv3d(x, w)
    for n in (2, 3, 5):
        assert np.array_equal(ag.conv3d(x, w, workers=n), y1)


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
def test_backends_bitwise_equal(rng):
    x = rng.standard_normal((2, 3, 6, 5, 7)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3, 3)).astype(np.float32)
    dy = rng.standard_normal((2, 4, 3, 3, 4)).astype(np.float32)
    out = {}
    old = kernels.backend()
    try:
        for name in ("numba", "numpy"):
            kernels.set_backend(name)
            out[name] = (ag.conv3d(x, w, stride=2), *ag.conv3d_backward(dy, x, w, stride=2), *ag.maxpool3d(x[:, :, :6, :4, :6]))
    finally:
        kernels.set_backend(old)
    for a, b in zip(out["numba"], out["numpy"]):
        assert np.array_equal(a, b)


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


def test_conv_transpose_examples():
    x = np.zeros((1, 1, 2, 2, 2))
    x[0, 0, 1, 0, 1] = 3.5
    y = ag.conv_transpose3d(x, np.ones((1, 1, 2, 2, 2)))
    assert np.all(y[0, 0, 2:4, 0:2, 2:4] == 3.5) and y.sum() == 8 * 3.5
    assert not ag.conv_transpose3d(np.zeros((2, 3, 4, 4, 4)), np.ones((3, 5, 2, 2, 2))).any()
    assert ag.conv_transpose3d(np.zeros((2, 3, 4, 4, 4)), np.ones((3, 5, 2, 2, 2))).shape == (2, 5, 8, 8, 8)
    with pytest.raises(ShapeError):
        ag.conv_transpose3d(np.zeros((1, 2, 2, 2, 2)), np.ones((3, 1, 2, 2, 2)))


def test_conv_transpose_is_adjoint(rng):
    for _ in range(5):
        w = rng.standard_normal((3, 2, 2, 2, 2))  # (Cin of convT, Cout of convT)
        x = rng.standard_normal((2, 2, 8, 6, 4))  # conv input with 2 channels
        y = rng.standard_normal((2, 3, 4, 3, 2))
        # conv(., w) maps 2 -> 3 channels when w is read as (Cout=3, Cin=2)
        lhs = np.vdot(ag.conv3d(x, w, stride=2, padding="valid"), y)
        rhs = np.vdot(x, ag.conv_transpose3d(y, w))
        assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), 1)


def test_maxpool_examples(backend):
    x = np.zeros((1, 1, 2, 2, 2), np.float32)
    x.flat[:4] = [1, 5, 3, 2]
    y, _ = ag.maxpool3d(x)
    assert y.shape == (1, 1, 1, 1, 1) and y.item() == 5
    assert ag.maxpool3d(np.zeros((2, 3, 8, 8, 8), np.float32))[0].shape == (2, 3, 4, 4, 4)


def test_maxpool_ties_first_index(backend):
    x = np.ones((1, 2, 4, 4, 4), np.float32)
    y, arg = ag.maxpool3d(x)
    assert np.all(y == 1)
    dx = ag.maxpool3d_backward(np.ones_like(y), arg, x.shape)
    assert dx.sum() == y.size
    assert np.all(dx[:, :, ::2, ::2, ::2] == 1)


def test_maxpool_backward_routes_to_max(backend, rng):
    x = rng.standard_normal((2, 2, 4, 6, 4)).astype(np.float32)
    y, arg = ag.maxpool3d(x)
    dy = rng.standard_normal(y.shape).astype(np.float32)
    dx = ag.maxpool3d_backward(dy, arg, x.shape)
    blocks = x.reshape(2, 2, 2, 2, 3, 2, 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(2, 2, 2, 3, 2, 8)
    np.testing.assert_array_equal(y, blocks.max(-1))
    dblocks = dx.reshape(2, 2, 2, 2, 3, 2, 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(2, 2, 2, 3, 2, 8)
    idx = blocks.argmax(-1)
    np.testing.assert_array_equal(np.take_along_axis(dblocks, idx[..., None], -1)[..., 0], dy)
    assert np.count_nonzero(dx) == np.count_nonzero(dy)


def test_batchnorm_examples():
    c = np.zeros(1)
    x = np.full((2, 1, 2, 2, 2), 7.0)
    y, _ = ag.batchnorm3d(x, np.ones(1), np.zeros(1), c.copy(), np.ones(1), True)
    assert not y.any()
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1, 1)
    y, _ = ag.batchnorm3d(x, np.ones(1), np.zeros(1), c.copy(), np.ones(1), True, eps=0.0)
    np.testing.assert_allclose(y.ravel(), [-1, 1])
    y, _ = ag.batchnorm3d(x, np.zeros(1), np.full(1, 0.3), c.copy(), np.ones(1), True)
    assert np.all(y == 0.3)
    with pytest.raises(ValueError):
        ag.batchnorm3d(np.ones((1, 1, 1, 1, 1)), np.ones(1), np.zeros(1), c.copy(), np.ones(1), True)


def test_batchnorm_running_stats_and_eval():
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1, 1)
    rm, rv = np.zeros(1), np.ones(1)
    ag.batchnorm3d(x, np.ones(1), np.zeros(1), rm, rv, True)
    assert rm[0] == pytest.approx(0.1 * 2)
    assert rv[0] == pytest.approx(0.9 + 0.1 * 2)  # unbiased batch variance 2
    y, cache = ag.batchnorm3d(x, np.ones(1), np.zeros(1), rm, rv, False)
    assert cache is None
    np.testing.assert_allclose(y.ravel(), (x.ravel() - rm[0]) / np.sqrt(rv[0] + 1e-5))


def test_prelu_sigmoid_examples():
    a = np.array([0.25])
    x = np.array([2.0, -2.0]).reshape(1, 1, 2, 1, 1)
    np.testing.assert_array_equal(ag.prelu(x, a).ravel(), [2, -0.5])
    assert ag.prelu(np.full((1, 1, 1, 1, 1), -5.0), np.zeros(1)).item() == 0
    s = ag.sigmoid(np.array([0.0, 50.0, -100.0, 100.0]))
    assert s[0] == 0.5 and abs(s[1] - 1) < 1e-12 and np.all(np.isfinite(s)) and s[2] > 0
    assert ag.sigmoid_backward(np.ones(1), ag.sigmoid(np.zeros(1)))[0] == 0.25


def test_concat_and_residual(rng):
    x1 = rng.standard_normal((2, 2, 3, 3, 3))
    x2 = rng.standard_normal((2, 3, 3, 3, 3))
    np.testing.assert_array_equal(ag.concat_channels(x1, np.zeros((2, 0, 3, 3, 3))), x1)
    c = ag.concat_channels(x1, x2)
    assert c.shape == (2, 5, 3, 3, 3)
    np.testing.assert_array_equal(c[:, 2], x2[:, 0])
    d1, d2 = ag.concat_channels_backward(c, 2)
    np.testing.assert_array_equal(d1, x1)
    np.testing.assert_array_equal(d2, x2)
    with pytest.raises(ShapeError):
        ag.concat_channels(x1, np.zeros((2, 1, 3, 3, 4)))
    np.testing.assert_array_equal(ag.residual_add(x1, np.zeros_like(x1)), x1)
    assert not ag.residual_add(x1, -x1).any()
    with pytest.raises(ShapeError):
        ag.residual_add(x1, x2)


def test_finite_diff_check_examples(rng):
    c = rng.standard_normal(7)
    assert ag.finite_diff_check(lambda t: (c @ t, c), rng.standard_normal(7)) < 1e-10
    assert ag.finite_diff_check(lambda t: (3.0, np.zeros_like(t)), np.ones(4)) == 0.0
    x = rng.standard_normal((2, 2, 5, 5, 5))
    w0 = rng.standard_normal((1, 2, 3, 3, 3)) * 0.2

    def f(theta):
        w = theta.reshape(w0.shape)
        y = ag.sigmoid(ag.conv3d(x, w))
        dy = ag.sigmoid_backward(np.ones_like(y), y)
        return y.sum(), ag.conv3d_backward(dy, x, w)[1]

    assert ag.finite_diff_check(f, w0.ravel()) < 1e-4
    with pytest.raises(NumericError):
        ag.finite_diff_check(lambda t: (np.nan, t), np.ones(2))
    # wrong gradient is detected
    assert ag.finite_diff_check(lambda t: (t @ t, t), np.ones(3)) > 0.3


def test_gradchecks_fast_subset():
    errs = run_gradchecks(range(3), operators=list(OPERATORS))
    assert set(errs) == set(OPERATORS)
    assert max(errs.values()) < TOL


def test_layers_match_functions(rng):
    conv = ag.Conv3d(2, 3, rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, 2, 4, 4, 4))
    y = conv.forward(x)
    np.testing.assert_array_equal(y, ag.conv3d(x, conv.params["w"], conv.params["b"]))
    conv.backward(np.ones_like(y))
    assert set(conv.grads) == set(conv.params)
    conv.zero_grad()
    assert all(not g.any() for g in conv.grads.values())


def test_checkpoint_roundtrip(tmp_path, rng):
    blocks = {"a.w": rng.standard_normal((2, 3, 3)).astype(np.float32), "scalar": np.float32(2.5), "é": np.zeros(0, np.float32)}
    p = tmp_path / "x.wmtp"
    ag.save_params(p, blocks)
    back = ag.load_params(p)
    assert list(back) == list(blocks)
    for k in blocks:
        np.testing.assert_array_equal(back[k], blocks[k])
    raw = p.read_bytes()
    assert raw[:4] == b"WMTP" and raw[4:12] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    ag.save_params(tmp_path / "y.wmtp", back)
    assert (tmp_path / "y.wmtp").read_bytes() == raw
    (tmp_path / "t.wmtp").write_bytes(raw[:-8])
    with pytest.raises(IOError):
        ag.load_params(tmp_path / "t.wmtp")
    (tmp_path / "bad").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        ag.load_params(tmp_path / "bad")


@pytest.mark.parametrize("flag,expected", [("0", "numpy"), ("off", "numpy"), ("1", "numba" if kernels.HAVE_NUMBA else "numpy")])
def test_env_flag_selects_backend(flag, expected):
    import os
    import subprocess
    import sys

    env = {**os.environ, "WMTRACT_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c", "from wmtract import kernels; print(kernels.backend())"], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == expected
