"""Diffusion tensor estimation and scalar maps (FA, MD).

Tensor channel order everywhere is (Dxx, Dxy, Dxz, Dyy, Dyz, Dzz), in mm^2/s.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConditioningError, ShapeError
from .volgrid import Volume, as_mask, stack_channels

TENSOR_CHANNELS = ("Dxx", "Dxy", "Dxz", "Dyy", "Dyz", "Dzz")

# position of each tensor element in the flattened 3x3 matrix
_SYM_INDEX = np.array([[0, 1, 2], [1, 3, 4], [2, 4, 5]])


@dataclass(frozen=True)
class GradientTable:
    """b-values (s/mm^2) and unit gradient directions, one row per DWI volume."""

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        bvecs = np.asarray(self.bvecs, dtype=np.float64)
        if bvecs.shape == (3, bvals.size) and bvals.size != 3:
            bvecs = bvecs.T
        if bvecs.shape != (bvals.size, 3):
            raise ShapeError(f"bvecs shape {bvecs.shape} does not match {bvals.size} bvals")
        if np.any(bvals < 0):
            raise ValueError("b-values must be non-negative")
        weighted = bvals > 0
        if not np.any(~weighted):
            raise ValueError("gradient table needs at least one b=0 entry")
        if weighted.sum() < 6:
            raise ValueError("gradient table needs at least 6 diffusion-weighted entries")
        norms = np.linalg.norm(bvecs[weighted], axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("bvecs with b > 0 must be unit vectors")
        bvals.flags.writeable = False
        bvecs.flags.writeable = False
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    def __len__(self):
        return self.bvals.size

    @property
    def b0_index(self) -> np.ndarray:
        return np.flatnonzero(self.bvals == 0)

    def design_matrix(self) -> np.ndarray:
        """Rows (1, -b gx^2, -2b gx gy, -2b gx gz, -b gy^2, -2b gy gz, -b gz^2)."""
        b = self.bvals
        gx, gy, gz = self.bvecs.T
        return np.column_stack(
            [
                np.ones_like(b),
                -b * gx * gx,
                -2 * b * gx * gy,
                -2 * b * gx * gz,
                -b * gy * gy,
                -2 * b * gy * gz,
                -b * gz * gz,
            ]
        )

    @classmethod
    def from_fsl(cls, bvals_path: str | os.PathLike, bvecs_path: str | os.PathLike) -> "GradientTable":
        bvals = np.loadtxt(bvals_path, ndmin=1)
        bvecs = np.loadtxt(bvecs_path, ndmin=2)
        if bvecs.shape[0] != 3:
            raise ShapeError(f"{bvecs_path}: expected three rows, got {bvecs.shape[0]}")
        return cls(bvals, bvecs.T)

    def to_fsl(self, bvals_path: str | os.PathLike, bvecs_path: str | os.PathLike) -> None:
        with open(bvals_path, "w") as fh:
            fh.write(" ".join(_fmt(b) for b in self.bvals) + "\n")
        with open(bvecs_path, "w") as fh:
            for row in self.bvecs.T:
                fh.write(" ".join(_fmt(v) for v in row) + "\n")


def _fmt(v: float) -> str:
    return repr(float(v))


def default_scheme(n_directions: int = 25, bvalue: float = 1000.0, n_b0: int = 1) -> GradientTable:
    """``n_b0`` unweighted volumes followed by directions on a Fibonacci hemisphere."""
    i = np.arange(n_directions) + 0.5
    z = 1.0 - i / n_directions  # upper hemisphere, z in (0, 1)
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    dirs = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    bvals = np.concatenate([np.zeros(n_b0), np.full(n_directions, float(bvalue))])
    bvecs = np.vstack([np.zeros((n_b0, 3)), dirs])
    return GradientTable(bvals, bvecs)


def sym_matrix(d: np.ndarray) -> np.ndarray:
    """(..., 6) tensor elements -> (..., 3, 3) symmetric matrices."""
    d = np.asarray(d)
    return d[..., _SYM_INDEX]


def forward_signal(d: np.ndarray, g: GradientTable, s0=1.0) -> np.ndarray:
    """Noise-free DWI signal S0 exp(-b g^T D g) for tensors ``d`` of shape (..., 6).

    Returns an array of shape (n, ...).
    """
    d = np.asarray(d, dtype=np.float64)
    quad = g.design_matrix()[:, 1:] @ d.reshape(-1, 6).T  # -b g^T D g
    return (np.asarray(s0, dtype=np.float64).reshape(-1) * np.exp(quad)).reshape((len(g),) + d.shape[:-1])


def fit_signals(signals: np.ndarray, g: GradientTable) -> tuple[np.ndarray, np.ndarray]:
    """Log-linear least squares tensor fit.

    Args:
        signals: (n, M) DWI samples for M voxels.
        g: gradient table with n entries.

    Returns:
        (tensors (6, M), ln_s0 (M,)) in float64.
    """
    signals = np.asarray(signals, dtype=np.float64)
    if signals.ndim != 2 or signals.shape[0] != len(g):
        raise ShapeError(f"signals shape {signals.shape} does not match {len(g)} gradient entries")
    a = g.design_matrix()
    if np.linalg.matrix_rank(a) < 7:
        raise ConditioningError("gradient scheme is degenerate: design matrix rank < 7")
    pinv = np.linalg.pinv(a)

    ref = signals[g.b0_index].max(axis=0)
    floor = 1e-6 * ref
    floor = np.where(floor > 0, floor, 1e-12)
    logs = np.log(np.maximum(signals, floor))

    # explicit accumulation in row order: results do not depend on voxel partitioning
    coef = np.zeros((7, signals.shape[1]))
    for k in range(len(g)):
        coef += pinv[:, k : k + 1] * logs[k]
    return coef[1:], coef[0]


def fit_tensor(dwi: Volume, g: GradientTable, mask: Volume, workers: int = 1) -> Volume:
    """Fit a diffusion tensor in every masked voxel of ``dwi``.

    Voxels outside ``mask`` get a zero tensor. ``workers > 1`` splits the
    masked voxels into contiguous ranges fitted on a thread pool; the result is
    identical for any split.
    """
    if dwi.channels != len(g):
        raise ShapeError(f"DWI has {dwi.channels} volumes but gradient table has {len(g)}")
    if dwi.shape != mask.shape:
        raise ShapeError(f"mask dims {mask.shape} do not match DWI dims {dwi.shape}")
    m = as_mask(mask)
    out = np.zeros((6,) + dwi.shape, dtype=np.float64)
    idx = np.flatnonzero(m)
    if idx.size:
        signals = dwi.data.reshape(len(g), -1)[:, idx]
        if workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            parts = np.array_split(np.arange(idx.size), workers)
            with ThreadPoolExecutor(workers) as pool:
                fits = list(pool.map(lambda p: fit_signals(signals[:, p], g)[0], parts))
            tensors = np.concatenate(fits, axis=1)
        else:
            tensors = fit_signals(signals, g)[0]
        out.reshape(6, -1)[:, idx] = tensors
    return dwi.like(out)


def eig3_sym(d: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of one symmetric 3x3 tensor given as 6 elements.

    Returns eigenvalues sorted descending and a matrix whose columns are the
    matching unit eigenvectors.
    """
    vals, vecs = np.linalg.eigh(sym_matrix(np.asarray(d, dtype=np.float64)))
    return vals[::-1].copy(), vecs[:, ::-1].copy()


def eigvals_batch(d: np.ndarray) -> np.ndarray:
    """Descending eigenvalues for tensors of shape (..., 6)."""
    return np.linalg.eigvalsh(sym_matrix(np.asarray(d, dtype=np.float64)))[..., ::-1]


def fa_from_eigvals(lam: np.ndarray) -> np.ndarray:
    """FA of eigenvalue triples (..., 3). Negative eigenvalues are clamped to 0."""
    lam = np.maximum(np.asarray(lam, dtype=np.float64), 0.0)
    l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
    num = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l1 - l3) ** 2
    den = l1 * l1 + l2 * l2 + l3 * l3
    with np.errstate(invalid="ignore", divide="ignore"):
        fa = np.sqrt(0.5) * np.sqrt(num) / np.sqrt(den)
    fa = np.where(den > 0, fa, 0.0)
    return np.clip(fa, 0.0, 1.0)


def _check_tensor(t: Volume):
    if t.channels != 6:
        raise ShapeError(f"tensor field needs 6 channels, got {t.channels}")


def fa_array(d: np.ndarray) -> np.ndarray:
    """FA for tensors of shape (..., 6), computed in float64."""
    return fa_from_eigvals(eigvals_batch(d))


def md_array(d: np.ndarray) -> np.ndarray:
    """MD (trace / 3) for tensors of shape (..., 6)."""
    d = np.asarray(d, dtype=np.float64)
    return (d[..., 0] + d[..., 3] + d[..., 5]) / 3.0


def fa_map(t: Volume) -> Volume:
    """Fractional anisotropy of every voxel of a tensor field."""
    _check_tensor(t)
    return t.like(fa_array(np.moveaxis(t.data, 0, -1))[None])


def md_map(t: Volume) -> Volume:
    """Mean diffusivity of every voxel of a tensor field."""
    _check_tensor(t)
    return t.like(md_array(np.moveaxis(t.data, 0, -1))[None])


def stack_input(t: Volume, extras: Sequence[Volume] = ()) -> Volume:
    """Network input: the 6 tensor channels followed by any extra scalar maps."""
    _check_tensor(t)
    if not extras:
        return t
    return stack_channels([t, *extras])
