"""Reverse-mode operators for volumetric networks.

Each operator is a forward function plus a matching backward function taking
the upstream gradient. Layer classes wrap them, own their parameters and cache
what backward needs. Arrays are (B, C, X, Y, Z); compute runs in the dtype of
the input (float32 for training, float64 for gradient checks).

Convolution is cross-correlation (no kernel flip). Same-padding pads with
zeros and puts the odd extra voxel on the high side.
"""
from __future__ import annotations

import io
import os
import struct
from typing import Callable, Mapping

import numpy as np

from . import kernels
from .errors import NumericError, ShapeError

# target size of one im2col block; keeps the column buffer cache-resident-ish
BLOCK_BYTES = 8 << 20


# --------------------------------------------------------------------- conv3d


def _same_pads(n: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


def conv_geometry(in_shape, k: int, stride: int, padding: str):
    """Output spatial dims and (lo, hi) pads per axis."""
    outs, pads = [], []
    for n in in_shape:
        if padding == "same":
            o, lo, hi = _same_pads(n, k, stride)
        elif padding == "valid":
            if n < k:
                raise ShapeError(f"spatial dim {n} smaller than kernel {k} with valid padding")
            o, lo, hi = (n - k) // stride + 1, 0, 0
        else:
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        outs.append(o)
        pads.append((lo, hi))
    return tuple(outs), pads


def _block_planes(ck: int, nb: int, ny: int, nz: int, nx: int, itemsize: int) -> int:
    # depends on shapes only, so the block decomposition (and every bit of the
    # result) is the same however blocks are spread over workers
    per_plane = ck * nb * ny * nz * itemsize
    return max(1, min(nx, BLOCK_BYTES // max(per_plane, 1)))


def _check_conv(x, w):
    if x.ndim != 5:
        raise ShapeError(f"expected (B, C, X, Y, Z) input, got shape {x.shape}")
    if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ShapeError(f"expected cubic kernel (Cout, Cin, k, k, k), got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel expects {w.shape[1]} input channels, input has {x.shape[1]}")


def _pad_cl(x, pads):
    """Zero-padded channels-last copy of a (B, C, X, Y, Z) array."""
    nb, nc, *sp = x.shape
    out = np.zeros((nb, *(n + lo + hi for n, (lo, hi) in zip(sp, pads)), nc), dtype=x.dtype)
    (lx, _), (ly, _), (lz, _) = pads
    out[:, lx : lx + sp[0], ly : ly + sp[1], lz : lz + sp[2]] = x.transpose(0, 2, 3, 4, 1)
    return out


def _kernel_rows(w):
    """(Cout, Cin, k, k, k) -> (k^3*Cin, Cout) in column-buffer order."""
    return np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0).reshape(-1, w.shape[0]))


def conv3d(x, w, b=None, stride: int = 1, padding: str = "same", workers: int = 1):
    """3D cross-correlation.

    Args:
        x: (B, Cin, X, Y, Z) input.
        w: (Cout, Cin, k, k, k) kernel.
        b: optional (Cout,) bias.
        stride: 1 or 2 (any positive integer works).
        padding: "same" (output = ceil(input / stride)) or "valid".
        workers: threads sharing the blocks of output x-planes.
    """
    _check_conv(x, w)
    nb, _, *sp = x.shape
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    (ox, oy, oz), pads = conv_geometry(sp, k, stride, padding)
    xpad = _pad_cl(x, pads)
    ck = cin * k**3
    w2t = _kernel_rows(w)
    y = np.empty((nb, cout, ox, oy, oz), dtype=x.dtype)
    step = _block_planes(ck, nb, oy, oz, ox, x.dtype.itemsize)

    def run(x0):
        nx = min(step, ox - x0)
        cols = np.empty((nb, nx, oy, oz, ck), dtype=x.dtype)
        kernels.im2col(xpad, cols, x0, k, stride)
        out = cols.reshape(-1, ck) @ w2t
        y[:, :, x0 : x0 + nx] = out.reshape(nb, nx, oy, oz, cout).transpose(0, 4, 1, 2, 3)

    starts = range(0, ox, step)
    if workers > 1 and len(starts) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, starts))
    else:
        for x0 in starts:
            run(x0)
    if b is not None:
        y += b.reshape(1, -1, 1, 1, 1).astype(x.dtype)
    return y


def conv3d_backward(dy, x, w, stride: int = 1, padding: str = "same", need_dx: bool = True):
    """Gradients (dx, dw, db) of ``conv3d`` given upstream ``dy``."""
    nb, _, *sp = x.shape
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    (ox, oy, oz), pads = conv_geometry(sp, k, stride, padding)
    if dy.shape != (nb, cout, ox, oy, oz):
        raise ShapeError(f"upstream gradient shape {dy.shape} does not match output {(nb, cout, ox, oy, oz)}")
    xpad = _pad_cl(x, pads)
    dxpad = np.zeros_like(xpad) if need_dx else None
    ck = cin * k**3
    w2 = _kernel_rows(w).T
    dw2t = np.zeros((ck, cout), dtype=x.dtype)
    step = _block_planes(ck, nb, oy, oz, ox, x.dtype.itemsize)
    for x0 in range(0, ox, step):
        nx = min(step, ox - x0)
        cols = np.empty((nb, nx, oy, oz, ck), dtype=x.dtype)
        kernels.im2col(xpad, cols, x0, k, stride)
        g = np.ascontiguousarray(dy[:, :, x0 : x0 + nx].transpose(0, 2, 3, 4, 1)).reshape(-1, cout)
        dw2t += cols.reshape(-1, ck).T @ g
        if need_dx:
            dcols = (g @ w2).reshape(nb, nx, oy, oz, ck)
            kernels.col2im(dcols, dxpad, x0, k, stride)
    dx = None
    if need_dx:
        (lx, _), (ly, _), (lz, _) = pads
        dx = np.ascontiguousarray(dxpad[:, lx : lx + sp[0], ly : ly + sp[1], lz : lz + sp[2]].transpose(0, 4, 1, 2, 3))
    db = dy.sum(axis=(0, 2, 3, 4))
    dw = dw2t.reshape(k, k, k, cin, cout).transpose(4, 3, 0, 1, 2)
    return dx, np.ascontiguousarray(dw), db


# ------------------------------------------------------------ conv transpose


def conv_transpose3d(x, w, stride: int = 2):
    """Stride-2 transposed convolution with a (Cin, Cout, 2, 2, 2) kernel.

    Output spatial dims are twice the input; this is the adjoint of
    ``conv3d(., w, stride=2, padding="valid")`` for the same kernel array.
    """
    if stride != 2 or w.shape[2:] != (2, 2, 2):
        raise ValueError("conv_transpose3d supports a 2x2x2 kernel with stride 2")
    if x.ndim != 5 or w.shape[0] != x.shape[1]:
        raise ShapeError(f"kernel expects {w.shape[0]} input channels, input shape {x.shape}")
    nb, _, nx, ny, nz = x.shape
    cout = w.shape[1]
    t = np.tensordot(w, x, axes=([0], [1]))  # (Cout, 2, 2, 2, B, X, Y, Z)
    y = t.transpose(4, 0, 5, 1, 6, 2, 7, 3).reshape(nb, cout, 2 * nx, 2 * ny, 2 * nz)
    return np.ascontiguousarray(y)


def conv_transpose3d_backward(dy, x, w):
    nb, _, nx, ny, nz = x.shape
    cout = w.shape[1]
    dyr = dy.reshape(nb, cout, nx, 2, ny, 2, nz, 2)
    dx = np.tensordot(dyr, w, axes=([1, 3, 5, 7], [1, 2, 3, 4]))  # (B, X, Y, Z, Cin)
    dx = np.ascontiguousarray(dx.transpose(0, 4, 1, 2, 3))
    dw = np.tensordot(x, dyr, axes=([0, 2, 3, 4], [0, 2, 4, 6]))  # (Cin, Cout, 2, 2, 2)
    return dx, dw


# -------------------------------------------------------------------- pooling


def maxpool3d(x):
    """2x2x2 max pool with stride 2. Returns (out, argmax) for backward."""
    if min(x.shape[2:]) < 2:
        raise ShapeError(f"max pool needs spatial dims >= 2, got {x.shape[2:]}")
    return kernels.maxpool2(x)


def maxpool3d_backward(dy, arg, in_shape):
    """Route each gradient to its window's argmax (ties: lowest linear index)."""
    return kernels.maxpool2_backward(dy, arg, in_shape)


# ------------------------------------------------------------------ batchnorm


def batchnorm3d(x, gamma, beta, running_mean, running_var, training: bool, eps=1e-5, momentum=0.9):
    """Per-channel normalisation. Updates running stats in place in training.

    Returns (y, cache); cache is None in eval mode.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm parameters do not match {c} channels")
    shape = (1, c, 1, 1, 1)
    if training:
        n = x.size // c
        if n < 2:
            raise ValueError("batchnorm in training mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3, 4))
        xc = x - mean.reshape(shape)
        var = (xc * xc).mean(axis=(0, 2, 3, 4))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(shape).astype(x.dtype)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var * (n / (n - 1))
        cache = (xhat, inv, gamma)
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean.reshape(shape).astype(x.dtype)) * inv.reshape(shape).astype(x.dtype)
        cache = None
    y = xhat * gamma.reshape(shape).astype(x.dtype) + beta.reshape(shape).astype(x.dtype)
    return y, cache


def batchnorm3d_backward(dy, cache):
    xhat, inv, gamma = cache
    c = dy.shape[1]
    shape = (1, c, 1, 1, 1)
    axes = (0, 2, 3, 4)
    dbeta = dy.sum(axis=axes)
    dgamma = (dy * xhat).sum(axis=axes)
    n = dy.size // c
    dxhat = dy * gamma.reshape(shape).astype(dy.dtype)
    dx = (inv / n).reshape(shape).astype(dy.dtype) * (
        n * dxhat - dxhat.sum(axis=axes).reshape(shape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- activations


def prelu(x, a):
    """x for x > 0, a_c * x otherwise (one slope per channel)."""
    if a.shape != (x.shape[1],):
        raise ShapeError(f"prelu has {a.size} slopes for {x.shape[1]} channels")
    return np.where(x > 0, x, x * a.reshape(1, -1, 1, 1, 1).astype(x.dtype))


def prelu_backward(dy, x, a):
    pos = x > 0
    dx = np.where(pos, dy, dy * a.reshape(1, -1, 1, 1, 1).astype(dy.dtype))
    da = np.where(pos, 0, dy * x).sum(axis=(0, 2, 3, 4))
    return dx, da


def sigmoid(x):
    """Numerically stable logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy, y):
    return dy * y * (1 - y)


def concat_channels(x1, x2):
    if x1.shape[0] != x2.shape[0] or x1.shape[2:] != x2.shape[2:]:
        raise ShapeError(f"cannot concatenate {x1.shape} and {x2.shape} along channels")
    return np.concatenate([x1, x2], axis=1)


def concat_channels_backward(dy, c1: int):
    return dy[:, :c1], dy[:, c1:]


def residual_add(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"residual operands differ: {x.shape} vs {y.shape}")
    return x + y


# --------------------------------------------------------------------- layers


class Layer:
    """A node with named parameters, their gradients and a forward cache."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        self.zero_grad()
        return self


class Conv3d(Layer):
    def __init__(self, cin, cout, k=3, stride=1, padding="same", rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = cin * k**3
        # He-normal init for PReLU-family activations
        self.params["w"] = (rng.standard_normal((cout, cin, k, k, k)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["b"] = np.zeros(cout, dtype=dtype)
        self.stride, self.padding = stride, padding
        self.zero_grad()

    def forward(self, x, training=True):
        self._x = x
        return conv3d(x, self.params["w"], self.params["b"], self.stride, self.padding)

    def backward(self, dy, need_dx=True):
        dx, dw, db = conv3d_backward(dy, self._x, self.params["w"], self.stride, self.padding, need_dx)
        self.grads["w"] += dw
        self.grads["b"] += db
        self._x = None
        return dx


class ConvTranspose3d(Layer):
    def __init__(self, cin, cout, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.params["w"] = (rng.standard_normal((cin, cout, 2, 2, 2)) * np.sqrt(2.0 / cin)).astype(dtype)
        self.zero_grad()

    def forward(self, x, training=True):
        self._x = x
        return conv_transpose3d(x, self.params["w"])

    def backward(self, dy):
        dx, dw = conv_transpose3d_backward(dy, self._x, self.params["w"])
        self.grads["w"] += dw
        self._x = None
        return dx


class MaxPool3d(Layer):
    def forward(self, x, training=True):
        y, self._arg = maxpool3d(x)
        self._shape = x.shape
        return y

    def backward(self, dy):
        return maxpool3d_backward(dy, self._arg, self._shape)


class BatchNorm3d(Layer):
    def __init__(self, c, eps=1e-5, momentum=0.9, dtype=np.float32):
        super().__init__()
        self.params["gamma"] = np.ones(c, dtype=dtype)
        self.params["beta"] = np.zeros(c, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(c, dtype=dtype)
        self.buffers["running_var"] = np.ones(c, dtype=dtype)
        self.eps, self.momentum = eps, momentum
        self.zero_grad()

    def forward(self, x, training=True):
        y, self._cache = batchnorm3d(
            x,
            self.params["gamma"],
            self.params["beta"],
            self.buffers["running_mean"],
            self.buffers["running_var"],
            training,
            self.eps,
            self.momentum,
        )
        return y

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("batchnorm backward needs a training-mode forward")
        dx, dg, dbeta = batchnorm3d_backward(dy, self._cache)
        self.grads["gamma"] += dg
        self.grads["beta"] += dbeta
        self._cache = None
        return dx


class PReLU(Layer):
    def __init__(self, c, init=0.25, dtype=np.float32):
        super().__init__()
        self.params["a"] = np.full(c, init, dtype=dtype)
        self.zero_grad()

    def forward(self, x, training=True):
        self._x = x
        return prelu(x, self.params["a"])

    def backward(self, dy):
        dx, da = prelu_backward(dy, self._x, self.params["a"])
        self.grads["a"] += da
        self._x = None
        return dx


class Sigmoid(Layer):
    def forward(self, x, training=True):
        self._y = sigmoid(x)
        return self._y

    def backward(self, dy):
        return sigmoid_backward(dy, self._y)


# ------------------------------------------------------- gradient verification


def finite_diff_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], params, h: float = 1e-5) -> float:
    """Compare analytic and central-difference gradients of a scalar function.

    Args:
        f: maps a flat float64 parameter vector to (value, analytic gradient).
        params: starting parameter vector.
        h: finite-difference step.

    Returns:
        max_i |analytic_i - numeric_i| / max(1e-8, |analytic_i| + |numeric_i|)
    """
    theta = np.array(params, dtype=np.float64).reshape(-1)
    value, grad = f(theta.copy())
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericError("non-finite value or gradient at the base point")
    if grad.shape != theta.shape:
        raise ShapeError(f"gradient has {grad.size} entries for {theta.size} parameters")
    worst = 0.0
    for i in range(theta.size):
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        fp, fm = f(tp)[0], f(tm)[0]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value perturbing parameter {i}")
        num = (fp - fm) / (2 * h)
        err = abs(grad[i] - num) / max(1e-8, abs(grad[i]) + abs(num))
        worst = max(worst, err)
    return worst


# ----------------------------------------------------------- checkpoint files

MAGIC = b"WMTP"
VERSION = 1


def save_params(path: str | os.PathLike, blocks: Mapping[str, np.ndarray]) -> None:
    """Write named arrays in the checkpoint layout.

    Layout (little-endian): magic "WMTP", uint32 version, uint32 block count,
    then per block: uint32 name length, UTF-8 name, uint32 rank, rank x uint32
    shape, float32 payload in C order.
    """
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blocks)))
    for name, arr in blocks.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_params(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    try:
        return _parse_blocks(raw, count)
    except (struct.error, UnicodeDecodeError) as exc:
        raise IOError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc


def _parse_blocks(raw: bytes, count: int) -> dict[str, np.ndarray]:
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        if pos + 4 * size > len(raw):
            raise struct.error(f"block {name!r} runs past the end")
        out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    return out
