"""Synthetic tract phantoms with Rician-noise DWIs and scan-rescan pairs.

A tract is a tube of given radius around a circular arc through ``start``,
the chord midpoint shifted by ``bulge``, and ``end`` (a zero bulge gives a
straight segment). Tract voxels carry a prolate tensor aligned with the local
arc tangent; the rest of an ellipsoidal tissue region is isotropic and
everything outside it is air (zero signal plus noise).
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dti import GradientTable, default_scheme, forward_signal
from .errors import SpecError
from .volgrid import Volume, mask_volume, write_nifti

Vec3 = tuple[float, float, float]


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    start: Vec3 = (5.0, 8.0, 16.0)
    end: Vec3 = (26.0, 8.0, 16.0)
    bulge: Vec3 = (0.0, 14.0, 0.0)
    radius: float = 3.0
    lambda_par: float = 1.7e-3
    lambda_perp: float = 0.3e-3
    background: float = 0.8e-3
    s0: float = 1000.0
    sigma: float = 50.0
    n_directions: int = 25
    bvalue: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise SpecError(f"dims must be 3 positive integers, got {self.dims}")
        if self.radius < 1:
            raise SpecError(f"radius must be >= 1 voxel, got {self.radius}")
        if not self.lambda_par > self.lambda_perp > 0:
            raise SpecError("need lambda_par > lambda_perp > 0")
        if self.background <= 0 or self.s0 <= 0:
            raise SpecError("background diffusivity and S0 must be positive")
        if self.sigma < 0:
            raise SpecError(f"noise sigma must be >= 0, got {self.sigma}")

    @property
    def snr(self) -> float:
        return self.s0 / self.sigma if self.sigma > 0 else float("inf")

    def gradient_table(self) -> GradientTable:
        return default_scheme(self.n_directions, self.bvalue)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PhantomCase:
    dwi: Volume
    dwi_rescan: Volume
    truth: Volume
    tissue: Volume
    gtab: GradientTable
    tensor: Volume
    spec: PhantomSpec


# ------------------------------------------------------------------ geometry


class Arc:
    """Circular arc (or straight segment) through start, apex and end."""

    def __init__(self, start, end, bulge):
        self.p0 = np.asarray(start, dtype=np.float64)
        self.p1 = np.asarray(end, dtype=np.float64)
        self.pm = (self.p0 + self.p1) / 2 + np.asarray(bulge, dtype=np.float64)
        a, b = self.p0 - self.pm, self.p1 - self.pm
        n = np.cross(a, b)
        nn = np.linalg.norm(n)
        self.straight = nn < 1e-9 * max(1.0, np.linalg.norm(a) * np.linalg.norm(b))
        if self.straight:
            return
        # circumcentre of p0, pm, p1
        centre = self.pm + (np.dot(a, a) * np.cross(b, n) + np.dot(b, b) * np.cross(n, a)) / (2 * nn * nn)
        self.centre = centre
        self.normal = n / nn
        self.R = np.linalg.norm(self.p0 - centre)
        self.u1 = (self.p0 - centre) / self.R
        self.u2 = np.cross(self.normal, self.u1)
        self.theta_m = self._angle(self.pm - centre)
        self.theta_1 = self._angle(self.p1 - centre)
        if self.theta_m > self.theta_1:  # travel the other way round so pm lies on the arc
            self.normal = -self.normal
            self.u2 = -self.u2
            self.theta_m = self._angle(self.pm - centre)
            self.theta_1 = self._angle(self.p1 - centre)

    def _angle(self, v):
        return float(np.mod(np.arctan2(v @ self.u2, v @ self.u1), 2 * np.pi))

    def points(self, n: int = 2000) -> np.ndarray:
        t = np.linspace(0.0, 1.0, n)[:, None]
        if self.straight:
            return self.p0 + t * (self.p1 - self.p0)
        ang = t * self.theta_1
        return self.centre + self.R * (np.cos(ang) * self.u1 + np.sin(ang) * self.u2)

    def distance_and_tangent(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Distance from each point (M, 3) to the arc and the unit tangent at
        the nearest arc point."""
        if self.straight:
            d = self.p1 - self.p0
            L2 = d @ d
            t = np.clip((pts - self.p0) @ d / L2, 0.0, 1.0)
            near = self.p0 + t[:, None] * d
            tang = np.broadcast_to(d / np.sqrt(L2), pts.shape)
            return np.linalg.norm(pts - near, axis=1), np.array(tang)
        v = pts - self.centre
        h = v @ self.normal
        vp = v - h[:, None] * self.normal
        rho = np.linalg.norm(vp, axis=1)
        phi = np.mod(np.arctan2(vp @ self.u2, vp @ self.u1), 2 * np.pi)
        inside = (phi <= self.theta_1) & (rho > 0)
        d_arc = np.sqrt((rho - self.R) ** 2 + h * h)
        d0 = np.linalg.norm(pts - self.p0, axis=1)
        d1 = np.linalg.norm(pts - self.p1, axis=1)
        dist = np.where(inside, d_arc, np.minimum(d0, d1))
        phi_near = np.where(inside, phi, np.where(d0 <= d1, 0.0, self.theta_1))
        tang = -np.sin(phi_near)[:, None] * self.u1 + np.cos(phi_near)[:, None] * self.u2
        return dist, tang


def _grid(dims) -> np.ndarray:
    idx = np.indices(dims, dtype=np.float64)
    return idx.reshape(3, -1).T


def tract_geometry(spec: PhantomSpec) -> tuple[np.ndarray, np.ndarray]:
    """Boolean tract mask (X, Y, Z) and per-voxel unit tangents (X, Y, Z, 3)."""
    arc = Arc(spec.start, spec.end, spec.bulge)
    pts = arc.points()
    hi = np.asarray(spec.dims, dtype=np.float64) - 1
    if np.any(pts.min(axis=0) - spec.radius < 0) or np.any(pts.max(axis=0) + spec.radius > hi):
        raise SpecError("tract tube exceeds the volume bounds")
    dist, tang = arc.distance_and_tangent(_grid(spec.dims))
    mask = (dist <= spec.radius).reshape(spec.dims)
    return mask, tang.reshape(*spec.dims, 3)


def tissue_mask(spec: PhantomSpec, tract: np.ndarray) -> np.ndarray:
    dims = np.asarray(spec.dims, dtype=np.float64)
    c = (dims - 1) / 2
    semi = np.maximum((dims - 1) / 2, 0.5)
    g = _grid(spec.dims)
    inside = (((g - c) / semi) ** 2).sum(axis=1) <= 1.0
    return inside.reshape(spec.dims) | tract


def true_tensors(spec: PhantomSpec, tract: np.ndarray, tang: np.ndarray, tissue: np.ndarray) -> np.ndarray:
    """Ground-truth tensor elements (X, Y, Z, 6); zero outside tissue."""
    d = np.zeros(spec.dims + (6,))
    iso = tissue & ~tract
    d[iso, 0] = d[iso, 3] = d[iso, 5] = spec.background
    t = tang[tract]
    lp, lt = spec.lambda_perp, spec.lambda_par - spec.lambda_perp
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    d[tract] = np.column_stack([lp + lt * tx * tx, lt * tx * ty, lt * tx * tz, lp + lt * ty * ty, lt * ty * tz, lp + lt * tz * tz])
    return d


def rician(signal: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """sqrt((S + n1)^2 + n2^2) with n1, n2 ~ N(0, sigma^2)."""
    if sigma == 0:
        return signal.copy()
    n1 = rng.normal(0.0, sigma, signal.shape)
    n2 = rng.normal(0.0, sigma, signal.shape)
    return np.sqrt((signal + n1) ** 2 + n2**2)


def make_phantom(spec: PhantomSpec) -> PhantomCase:
    tract, tang = tract_geometry(spec)
    tissue = tissue_mask(spec, tract)
    d = true_tensors(spec, tract, tang, tissue)
    g = spec.gradient_table()
    s0 = np.where(tissue, spec.s0, 0.0)
    clean = forward_signal(d, g, s0.reshape(-1)).reshape((len(g),) + spec.dims)
    clean[:, ~tissue] = 0.0
    scan = rician(clean, spec.sigma, np.random.default_rng([spec.seed, 1]))
    rescan = rician(clean, spec.sigma, np.random.default_rng([spec.seed, 2]))
    return PhantomCase(
        dwi=Volume(scan.astype(np.float32)),
        dwi_rescan=Volume(rescan.astype(np.float32)),
        truth=mask_volume(tract),
        tissue=mask_volume(tissue),
        gtab=g,
        tensor=Volume(np.moveaxis(d, -1, 0).astype(np.float32)),
        spec=spec,
    )


# -------------------------------------------------------------------- cohorts


@dataclass(frozen=True)
class Jitter:
    """Per-subject variation: endpoints and bulge shift uniformly by up to
    the given voxels per coordinate, radius is drawn from ``radius``,
    diffusivities scale by a factor in [1 - d, 1 + d]."""

    endpoint: float = 2.0
    bulge: float = 3.0
    radius: tuple[float, float] = (2.5, 3.5)
    diffusivity: float = 0.1

    def __post_init__(self):
        lo, hi = self.radius
        if self.endpoint < 0 or self.bulge < 0 or not 0 <= self.diffusivity < 1:
            raise SpecError("jitter amplitudes must be non-negative (diffusivity below 1)")
        if not 1 <= lo <= hi:
            raise SpecError(f"radius range must satisfy 1 <= lo <= hi, got {self.radius}")

    @classmethod
    def none(cls, radius: float) -> "Jitter":
        return cls(0.0, 0.0, (radius, radius), 0.0)


@dataclass
class Subject:
    subject_id: str
    split: str
    case: PhantomCase


@dataclass
class Cohort:
    subjects: list[Subject] = field(default_factory=list)

    def split(self, name: str) -> list[Subject]:
        return [s for s in self.subjects if s.split == name]

    def manifest(self) -> list[dict]:
        return [{"subject_id": s.subject_id, "split": s.split} for s in self.subjects]


def _jittered(base: PhantomSpec, jit: Jitter, rng: np.random.Generator, seed: int) -> PhantomSpec:
    for _ in range(100):
        shift = lambda v, a: tuple(float(x) for x in np.asarray(v) + rng.uniform(-a, a, 3))  # noqa: E731
        start = shift(base.start, jit.endpoint)
        end = shift(base.end, jit.endpoint)
        bulge = shift(base.bulge, jit.bulge)
        radius = float(rng.uniform(*jit.radius))
        f = rng.uniform(1 - jit.diffusivity, 1 + jit.diffusivity, 3)
        lpar, lperp = base.lambda_par * f[0], base.lambda_perp * f[1]
        if lpar <= lperp:
            continue
        spec = replace(
            base, start=start, end=end, bulge=bulge, radius=radius,
            lambda_par=lpar, lambda_perp=lperp, background=base.background * f[2], seed=seed,
        )
        try:
            tract_geometry(spec)
        except SpecError:
            continue
        return spec
    raise SpecError("could not draw an in-bounds subject from the jitter ranges")


def make_cohort(n: int, base: PhantomSpec, jitter: Jitter | None = None, splits: tuple[int, int, int] | None = None) -> Cohort:
    """``n`` subjects with seeded per-subject variation.

    Subject ``i`` uses noise seed ``base.seed + i``; ``splits`` gives the
    number of train / validate / test subjects (default: all train).
    """
    if n < 1:
        raise SpecError(f"cohort size must be >= 1, got {n}")
    jitter = jitter if jitter is not None else Jitter()
    splits = splits or (n, 0, 0)
    if sum(splits) != n or min(splits) < 0:
        raise SpecError(f"split sizes {splits} do not add up to {n}")
    names = ["train"] * splits[0] + ["validate"] * splits[1] + ["test"] * splits[2]
    rng = np.random.default_rng([base.seed, 0xC0])
    cohort = Cohort()
    for i in range(n):
        spec = _jittered(base, jitter, rng, base.seed + i)
        cohort.subjects.append(Subject(f"sub-{i:03d}", names[i], make_phantom(spec)))
    return cohort


# ------------------------------------------------------------------------ I/O

CASE_FILES = {
    "dwi": "dwi.nii",
    "dwi_rescan": "dwi_rescan.nii",
    "truth": "truth.nii",
    "tissue": "tissue.nii",
    "bvals": "bvals",
    "bvecs": "bvecs",
}


def write_case(case: PhantomCase, folder: str | os.PathLike) -> dict[str, str]:
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    paths = {k: str(folder / v) for k, v in CASE_FILES.items()}
    write_nifti(case.dwi, paths["dwi"])
    write_nifti(case.dwi_rescan, paths["dwi_rescan"])
    write_nifti(case.truth, paths["truth"])
    write_nifti(case.tissue, paths["tissue"])
    case.gtab.to_fsl(paths["bvals"], paths["bvecs"])
    return paths


def write_cohort(cohort: Cohort, root: str | os.PathLike) -> Path:
    """Write every case under ``root/<subject_id>/`` plus ``root/manifest.json``
    (paths relative to ``root``)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in cohort.subjects:
        paths = write_case(s.case, root / s.subject_id)
        rel = {k: os.path.relpath(v, root) for k, v in paths.items()}
        entries.append({"subject_id": s.subject_id, "split": s.split, "paths": rel, "phantom": s.case.spec.to_dict()})
    out = root / "manifest.json"
    out.write_text(json.dumps(entries, indent=2, sort_keys=True) + "\n")
    return out
