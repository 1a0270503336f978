"""Hot inner loops: im2col gather, col2im scatter-add, 2x2x2 max pooling.

Every kernel has a numba ``@njit`` version and a pure-numpy version with
identical results. The numba path is used when numba imports and the
``WMTRACT_NUMBA`` environment variable is not one of ``0/false/no/off``.
``set_backend`` switches at runtime (used by the benchmark).

Activations are (B, C, X, Y, Z) except the padded convolution input, which is
channels-last (B, X, Y, Z, C) so that each patch row is built from contiguous
runs of k*C values. Column buffers are (B, nx, Yo, Zo, k^3*C): one row per
output voxel, column index ``((kx*k + ky)*k + kz)*C + c``. Each call covers
``nx`` output x-planes starting at ``x0`` so callers can block over x.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import prange

    HAVE_NUMBA = True
    if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
        # the bundled TBB is often too old and numba warns before falling back
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    prange = range
    HAVE_NUMBA = False


def _env_enabled() -> bool:
    return os.environ.get("WMTRACT_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


_use_numba = HAVE_NUMBA and _env_enabled()


def backend() -> str:
    return "numba" if _use_numba else "numpy"


def set_backend(name: str) -> None:
    global _use_numba
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        _use_numba = True
    elif name == "numpy":
        _use_numba = False
    else:
        raise ValueError(f"unknown backend {name!r}")


def _njit(**kw):
    if HAVE_NUMBA:
        return numba.njit(cache=True, **kw)
    return lambda f: f


# ------------------------------------------------------------------ numba path


@_njit(parallel=True)
def _im2col_nb(xpad, cols, x0, k, s):
    nb, nc = xpad.shape[0], xpad.shape[4]
    nx, ny, nz = cols.shape[1], cols.shape[2], cols.shape[3]
    run = k * nc  # (kz, c) is contiguous in both buffers for any stride
    src = xpad.reshape(nb, xpad.shape[1], xpad.shape[2], xpad.shape[3] * nc)
    dst = cols.reshape(nb, nx, ny, nz, k * k, run)
    # one (sample, x-plane) per worker: every column row is written exactly once
    for bi in prange(nb * nx):
        b = bi // nx
        i = bi % nx
        xi = (x0 + i) * s
        for j in range(ny):
            yj = j * s
            for l in range(nz):
                zo = l * s * nc
                for kx in range(k):
                    for ky in range(k):
                        q = kx * k + ky
                        for t in range(run):
                            dst[b, i, j, l, q, t] = src[b, xi + kx, yj + ky, zo + t]


@_njit(parallel=True)
def _col2im_nb(cols, dxpad, x0, k, s):
    nb, nc = dxpad.shape[0], dxpad.shape[4]
    nx, ny, nz = cols.shape[1], cols.shape[2], cols.shape[3]
    run = k * nc
    dst = dxpad.reshape(nb, dxpad.shape[1], dxpad.shape[2], dxpad.shape[3] * nc)
    src = cols.reshape(nb, nx, ny, nz, k * k, run)
    # one sample per worker: writes never overlap, accumulation order is fixed
    for b in prange(nb):
        for i in range(nx):
            xi = (x0 + i) * s
            for j in range(ny):
                yj = j * s
                for l in range(nz):
                    zo = l * s * nc
                    for kx in range(k):
                        for ky in range(k):
                            q = kx * k + ky
                            for t in range(run):
                                dst[b, xi + kx, yj + ky, zo + t] += src[b, i, j, l, q, t]


@_njit(parallel=True)
def _maxpool_nb(x, out, arg):
    nb, nc = out.shape[0], out.shape[1]
    nx, ny, nz = out.shape[2], out.shape[3], out.shape[4]
    for bc in prange(nb * nc):
        b = bc // nc
        c = bc % nc
        for i in range(nx):
            for j in range(ny):
                for l in range(nz):
                    best = x[b, c, 2 * i, 2 * j, 2 * l]
                    where = 0
                    for w in range(1, 8):
                        v = x[b, c, 2 * i + (w >> 2), 2 * j + ((w >> 1) & 1), 2 * l + (w & 1)]
                        if v > best:
                            best = v
                            where = w
                    out[b, c, i, j, l] = best
                    arg[b, c, i, j, l] = where


@_njit(parallel=True)
def _maxpool_back_nb(dy, arg, dx):
    nb, nc = dy.shape[0], dy.shape[1]
    nx, ny, nz = dy.shape[2], dy.shape[3], dy.shape[4]
    for bc in prange(nb * nc):
        b = bc // nc
        c = bc % nc
        for i in range(nx):
            for j in range(ny):
                for l in range(nz):
                    w = arg[b, c, i, j, l]
                    dx[b, c, 2 * i + (w >> 2), 2 * j + ((w >> 1) & 1), 2 * l + (w & 1)] = dy[b, c, i, j, l]


# ------------------------------------------------------------------ numpy path


def _window(xpad, x0, nx, shape, k_off, s):
    kx, ky, kz = k_off
    _, ny, nz = shape
    return xpad[
        :,
        x0 * s + kx : (x0 + nx - 1) * s + kx + 1 : s,
        ky : (ny - 1) * s + ky + 1 : s,
        kz : (nz - 1) * s + kz + 1 : s,
    ]


def _im2col_np(xpad, cols, x0, k, s):
    nb, nc = xpad.shape[0], xpad.shape[4]
    nx, ny, nz = cols.shape[1:4]
    c8 = cols.reshape(nb, nx, ny, nz, k, k, k, nc)
    for kx in range(k):
        for ky in range(k):
            for kz in range(k):
                c8[:, :, :, :, kx, ky, kz] = _window(xpad, x0, nx, (nx, ny, nz), (kx, ky, kz), s)


def _col2im_np(cols, dxpad, x0, k, s):
    nb, nc = dxpad.shape[0], dxpad.shape[4]
    nx, ny, nz = cols.shape[1:4]
    c8 = cols.reshape(nb, nx, ny, nz, k, k, k, nc)
    # Descending offsets: each input voxel then receives its terms in the
    # same order as the numba loop (ascending output voxel), so sums match.
    for kx in reversed(range(k)):
        for ky in reversed(range(k)):
            for kz in reversed(range(k)):
                _window(dxpad, x0, nx, (nx, ny, nz), (kx, ky, kz), s)[...] += c8[:, :, :, :, kx, ky, kz]


def _pool_view(x, out_shape):
    nb, nc, nx, ny, nz = out_shape
    xr = x[:, :, : 2 * nx, : 2 * ny, : 2 * nz].reshape(nb, nc, nx, 2, ny, 2, nz, 2)
    return xr.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(nb, nc, nx, ny, nz, 8)


def _maxpool_np(x, out, arg):
    win = _pool_view(x, out.shape)
    arg[...] = win.argmax(axis=-1)  # first maximum == lowest linear index
    out[...] = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]


def _maxpool_back_np(dy, arg, dx):
    nb, nc, nx, ny, nz = dy.shape
    onehot = np.zeros(dy.shape + (8,), dtype=dy.dtype)
    np.put_along_axis(onehot, arg[..., None].astype(np.intp), dy[..., None], axis=-1)
    block = onehot.reshape(nb, nc, nx, ny, nz, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    dx[:, :, : 2 * nx, : 2 * ny, : 2 * nz] = block.reshape(nb, nc, 2 * nx, 2 * ny, 2 * nz)


# ------------------------------------------------------------------ dispatch


def im2col(xpad: np.ndarray, cols: np.ndarray, x0: int, k: int, s: int) -> None:
    """Fill ``cols`` with the k^3 patches feeding output x-planes x0..x0+nx."""
    (_im2col_nb if _use_numba else _im2col_np)(xpad, cols, x0, k, s)


def col2im(cols: np.ndarray, dxpad: np.ndarray, x0: int, k: int, s: int) -> None:
    """Scatter-add column gradients back into the padded input gradient."""
    (_col2im_nb if _use_numba else _col2im_np)(cols, dxpad, x0, k, s)


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2x2 stride-2 max pool. Returns (out, window argmax in 0..7)."""
    nb, nc, nx, ny, nz = x.shape
    shape = (nb, nc, nx // 2, ny // 2, nz // 2)
    out = np.empty(shape, dtype=x.dtype)
    arg = np.empty(shape, dtype=np.int8)
    (_maxpool_nb if _use_numba else _maxpool_np)(np.ascontiguousarray(x), out, arg)
    return out, arg


def maxpool2_backward(dy: np.ndarray, arg: np.ndarray, in_shape) -> np.ndarray:
    dx = np.zeros(in_shape, dtype=dy.dtype)
    (_maxpool_back_nb if _use_numba else _maxpool_back_np)(np.ascontiguousarray(dy), arg, dx)
    return dx
