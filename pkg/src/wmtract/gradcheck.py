"""Per-operator finite-difference checks on small random problems.

Each case draws a random shape (B <= 2, C <= 3, spatial <= 6), builds the
scalar f = sum(op(inputs) * R) for a fixed random projection R, and checks
the analytic gradient of every input and parameter at once. Inputs to the
non-smooth operators (PReLU, max pool) are drawn away from their kinks so a
step of h cannot cross one.
"""
from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

from . import autograd as ag
from .nets import loss_wce, loss_wip

TOL = 1e-4


def _spatial(rng, lo=2, hi=6, even=False):
    dims = rng.integers(lo, hi + 1, 3)
    if even:
        dims = dims - dims % 2
    return tuple(int(d) for d in dims)


def _separated(rng, shape, gap=0.05):
    """Distinct values at least ``gap`` apart, nowhere near zero."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) + 1) * gap * rng.choice([-1.0, 1.0], n)
    return vals.reshape(shape)


def _check(inputs: dict, forward: Callable, backward: Callable, rng, h) -> float:
    names = list(inputs)
    shapes = [inputs[k].shape for k in names]
    sizes = [int(np.prod(s)) for s in shapes]
    proj = None

    def unpack(theta):
        out, pos = {}, 0
        for k, s, n in zip(names, shapes, sizes):
            out[k] = theta[pos : pos + n].reshape(s)
            pos += n
        return out

    def f(theta):
        nonlocal proj
        vals = unpack(theta)
        y, ctx = forward(vals)
        if proj is None:
            proj = rng.standard_normal(y.shape)
        grads = backward(vals, ctx, proj)
        return float((y * proj).sum()), np.concatenate([np.asarray(grads[k]).ravel() for k in names])

    theta = np.concatenate([np.asarray(inputs[k], dtype=np.float64).ravel() for k in names])
    return ag.finite_diff_check(f, theta, h)


def _conv_case(stride, padding):
    def case(rng, h):
        b, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = 3
        sp = _spatial(rng, 3 if padding == "valid" else 2)
        inputs = {
            "x": rng.standard_normal((b, cin) + sp),
            "w": rng.standard_normal((cout, cin, k, k, k)) * 0.3,
            "b": rng.standard_normal(cout),
        }

        def fwd(v):
            return ag.conv3d(v["x"], v["w"], v["b"], stride, padding), None

        def bwd(v, _, dy):
            dx, dw, db = ag.conv3d_backward(dy, v["x"], v["w"], stride, padding)
            return {"x": dx, "w": dw, "b": db}

        return _check(inputs, fwd, bwd, rng, h)

    return case


def _convT_case(rng, h):
    b, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    sp = _spatial(rng, 1, 3)
    inputs = {"x": rng.standard_normal((b, cin) + sp), "w": rng.standard_normal((cin, cout, 2, 2, 2))}

    def bwd(v, _, dy):
        dx, dw = ag.conv_transpose3d_backward(dy, v["x"], v["w"])
        return {"x": dx, "w": dw}

    return _check(inputs, lambda v: (ag.conv_transpose3d(v["x"], v["w"]), None), bwd, rng, h)


def _pool_case(rng, h):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4))) + _spatial(rng, 2, 6, even=True)
    inputs = {"x": _separated(rng, shape)}

    def fwd(v):
        y, arg = ag.maxpool3d(v["x"])
        return y, arg

    def bwd(v, arg, dy):
        return {"x": ag.maxpool3d_backward(dy, arg, v["x"].shape)}

    return _check(inputs, fwd, bwd, rng, h)


def _bn_case(rng, h):
    c = int(rng.integers(1, 4))
    shape = (int(rng.integers(1, 3)), c) + _spatial(rng)
    inputs = {
        "x": rng.standard_normal(shape) * 2 + 1,
        "gamma": rng.standard_normal(c),
        "beta": rng.standard_normal(c),
    }

    def fwd(v):
        return ag.batchnorm3d(v["x"], v["gamma"], v["beta"], np.zeros(c), np.ones(c), training=True)

    def bwd(v, cache, dy):
        dx, dg, db = ag.batchnorm3d_backward(dy, cache)
        return {"x": dx, "gamma": dg, "beta": db}

    return _check(inputs, fwd, bwd, rng, h)


def _prelu_case(rng, h):
    c = int(rng.integers(1, 4))
    shape = (int(rng.integers(1, 3)), c) + _spatial(rng)
    inputs = {"x": _separated(rng, shape, 0.01), "a": rng.uniform(0.05, 0.5, c)}

    def bwd(v, _, dy):
        dx, da = ag.prelu_backward(dy, v["x"], v["a"])
        return {"x": dx, "a": da}

    return _check(inputs, lambda v: (ag.prelu(v["x"], v["a"]), None), bwd, rng, h)


def _sigmoid_case(rng, h):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4))) + _spatial(rng)
    inputs = {"x": rng.standard_normal(shape) * 3}

    def fwd(v):
        y = ag.sigmoid(v["x"])
        return y, y

    return _check(inputs, fwd, lambda v, y, dy: {"x": ag.sigmoid_backward(dy, y)}, rng, h)


def _concat_case(rng, h):
    b, sp = int(rng.integers(1, 3)), _spatial(rng)
    c1 = int(rng.integers(1, 4))
    inputs = {"x1": rng.standard_normal((b, c1) + sp), "x2": rng.standard_normal((b, int(rng.integers(1, 4))) + sp)}

    def bwd(v, _, dy):
        d1, d2 = ag.concat_channels_backward(dy, c1)
        return {"x1": d1, "x2": d2}

    return _check(inputs, lambda v: (ag.concat_channels(v["x1"], v["x2"]), None), bwd, rng, h)


def _residual_case(rng, h):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4))) + _spatial(rng)
    inputs = {"x": rng.standard_normal(shape), "y": rng.standard_normal(shape)}
    return _check(inputs, lambda v: (ag.residual_add(v["x"], v["y"]), None), lambda v, _, dy: {"x": dy, "y": dy}, rng, h)


def _loss_case(fn):
    def case(rng, h):
        shape = (int(rng.integers(1, 3)), 1) + _spatial(rng)
        p = rng.uniform(0.05, 0.95, shape)
        r = (rng.random(shape) < 0.3).astype(np.float64)
        w = float(rng.choice([1.0, 3.0, 5.0, 10.0, 100.0]))
        return ag.finite_diff_check(lambda theta: fn(theta.reshape(shape), r, w), p, h)

    return case


OPERATORS: dict[str, Callable] = {
    "conv3d_s1_same": _conv_case(1, "same"),
    "conv3d_s2_same": _conv_case(2, "same"),
    "conv3d_s1_valid": _conv_case(1, "valid"),
    "conv_transpose3d": _convT_case,
    "maxpool3d": _pool_case,
    "batchnorm3d": _bn_case,
    "prelu": _prelu_case,
    "sigmoid": _sigmoid_case,
    "concat_channels": _concat_case,
    "residual_add": _residual_case,
    "loss_wip": _loss_case(loss_wip),
    "loss_wce": _loss_case(loss_wce),
}


def run_gradchecks(seeds=range(20), h: float = 1e-5, operators=None) -> dict[str, float]:
    """Worst relative error per operator over the given seeds (float64)."""
    names = operators or list(OPERATORS)
    out = {}
    for name in names:
        worst = 0.0
        for seed in seeds:
            worst = max(worst, OPERATORS[name](np.random.default_rng([seed, zlib.crc32(name.encode())]), h))
        out[name] = worst
    return out
