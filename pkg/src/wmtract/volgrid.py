"""Volumetric grid type, NIfTI-1 single-file I/O, ROI cropping and masking.

Volumes are stored channel-first as ``data[c, x, y, z]`` in float32. On disk
the channel axis is the NIfTI 4th dimension (``dim[4] == C``); a single
channel volume is written as a plain 3D image (``dim[0] == 3``).
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import FormatError, ShapeError, UnsupportedError

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI-1 datatype code -> numpy dtype (without byte order)
_DTYPES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
    256: "i1",
    512: "u2",
    768: "u4",
    1024: "i8",
    1280: "u8",
}


@dataclass(frozen=True)
class Volume:
    """Immutable multi-channel 3D image.

    Attributes:
        data: float32 array shaped (C, X, Y, Z). Read-only.
        spacing: voxel size in mm along x, y, z.
        origin: world position of voxel (0, 0, 0) in mm.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise ShapeError(f"volume data must be 3D or 4D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"volume dims must all be >= 1, got {data.shape}")
        data = np.array(data, dtype=np.float32, copy=True, order="C")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        data.flags.writeable = False
        # header geometry is float32 on disk; keep it float32-exact so I/O round-trips
        spacing = tuple(float(np.float32(s)) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        origin = tuple(float(np.float32(o)) for o in self.origin)
        if len(origin) != 3:
            raise ValueError(f"origin must have 3 components, got {self.origin}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        """Spatial dims (X, Y, Z)."""
        return tuple(self.data.shape[1:])

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)

    @property
    def voxel_volume(self) -> float:
        """Voxel volume in mm^3."""
        return float(np.prod(self.spacing))

    def like(self, data: np.ndarray) -> "Volume":
        """New volume with the same geometry and different data."""
        return Volume(data, self.spacing, self.origin)

    def channel(self, c: int) -> "Volume":
        return self.like(self.data[c : c + 1])

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.origin == other.origin
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned box in voxel coordinates: ``offset`` and ``size``."""

    offset: tuple[int, int, int]
    size: tuple[int, int, int]

    def __post_init__(self):
        offset = tuple(int(o) for o in self.offset)
        size = tuple(int(s) for s in self.size)
        if len(offset) != 3 or len(size) != 3:
            raise ValueError("RoiBox offset and size need 3 components")
        if any(o < 0 for o in offset):
            raise ValueError(f"RoiBox offset must be non-negative, got {offset}")
        if any(s <= 0 for s in size):
            raise ValueError(f"RoiBox size must be positive, got {size}")
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "size", size)

    @classmethod
    def full(cls, v: Volume) -> "RoiBox":
        return cls((0, 0, 0), v.shape)


def as_mask(v: Volume) -> np.ndarray:
    """Boolean (X, Y, Z) array from a single channel volume of 0/1 values."""
    if v.channels != 1:
        raise ShapeError(f"mask must have one channel, got {v.channels}")
    d = v.data[0]
    if not np.all((d == 0) | (d == 1)):
        raise ValueError("mask values must be exactly 0 or 1")
    return d.astype(bool)


def mask_volume(mask: np.ndarray, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Volume:
    """Wrap a boolean array as a BinaryMask volume."""
    return Volume(np.asarray(mask, dtype=np.float32)[None], spacing, origin)


def crop_pad(v: Volume, box: RoiBox) -> Volume:
    """Extract ``box`` from ``v``; voxels outside ``v`` are zero-filled."""
    out = np.zeros((v.channels,) + box.size, dtype=np.float32)
    src, dst = [], []
    for o, s, n in zip(box.offset, box.size, v.shape):
        lo, hi = o, min(o + s, n)
        if hi <= lo:
            return Volume(out, v.spacing, _shifted_origin(v, box))
        src.append(slice(lo, hi))
        dst.append(slice(0, hi - lo))
    out[(slice(None), *dst)] = v.data[(slice(None), *src)]
    return Volume(out, v.spacing, _shifted_origin(v, box))


def _shifted_origin(v: Volume, box: RoiBox):
    return tuple(o + i * s for o, i, s in zip(v.origin, box.offset, v.spacing))


def apply_mask(v: Volume, m: Volume) -> Volume:
    """Zero every channel of ``v`` where ``m`` is 0."""
    if v.shape != m.shape:
        raise ShapeError(f"mask dims {m.shape} do not match volume dims {v.shape}")
    keep = as_mask(m)
    return v.like(v.data * keep[None])


# --------------------------------------------------------------------- NIfTI-1


def read_nifti(path: str | os.PathLike) -> Volume:
    """Read a single-file NIfTI-1 image (``.nii``) into a float32 Volume."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise IOError(f"{path}: truncated header ({len(raw)} bytes)")
    hdr = raw[:HEADER_SIZE]
    if struct.unpack("<i", hdr[:4])[0] == HEADER_SIZE:
        bo = "<"
    elif struct.unpack(">i", hdr[:4])[0] == HEADER_SIZE:
        bo = ">"
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348")
    magic = hdr[344:348]
    if magic != b"n+1\x00":
        raise FormatError(f"{path}: unsupported magic {magic!r} (need single-file 'n+1')")

    dim = struct.unpack(bo + "8h", hdr[40:56])
    datatype, bitpix = struct.unpack(bo + "2h", hdr[70:74])
    pixdim = struct.unpack(bo + "8f", hdr[76:108])
    vox_offset, scl_slope, scl_inter = struct.unpack(bo + "3f", hdr[108:120])
    qform_code, sform_code = struct.unpack(bo + "2h", hdr[252:256])
    qoffset = struct.unpack(bo + "3f", hdr[268:280])
    srow = np.array(struct.unpack(bo + "12f", hdr[280:328])).reshape(3, 4)

    if datatype not in _DTYPES:
        raise UnsupportedError(f"{path}: unsupported datatype code {datatype}")
    ndim = dim[0]
    if not 1 <= ndim <= 5:
        raise FormatError(f"{path}: invalid dim[0]={ndim}")
    shape = [max(int(d), 1) for d in dim[1 : ndim + 1]] + [1] * (5 - ndim)
    x, y, z, t, u = shape
    if t > 1 and u > 1:
        raise UnsupportedError(f"{path}: both dim[4] and dim[5] exceed 1")
    channels = t * u

    dt = np.dtype(bo + _DTYPES[datatype])
    count = x * y * z * channels
    start = int(vox_offset)
    nbytes = count * dt.itemsize
    if len(raw) < start + nbytes:
        raise IOError(f"{path}: truncated data ({len(raw) - start} of {nbytes} bytes)")
    arr = np.frombuffer(raw, dtype=dt, count=count, offset=start)
    # NIfTI is x-fastest: C-order (c, z, y, x)
    data = arr.reshape(channels, z, y, x).transpose(0, 3, 2, 1).astype(np.float64)
    if scl_slope != 0 and np.isfinite(scl_slope):
        data = data * scl_slope + scl_inter
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: data contains non-finite values")

    spacing = tuple(abs(float(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    if sform_code > 0:
        origin = tuple(float(v) for v in srow[:, 3])
    elif qform_code > 0:
        origin = tuple(float(v) for v in qoffset)
    else:
        origin = (0.0, 0.0, 0.0)
    return Volume(data.astype(np.float32), spacing, origin)


def nifti_header(v: Volume) -> bytes:
    """The 352-byte header (including the empty extension flag) for ``v``."""
    c, x, y, z = v.dims
    dim = (4, x, y, z, c, 1, 1, 1) if c > 1 else (3, x, y, z, 1, 1, 1, 1)
    sx, sy, sz = v.spacing
    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38] = ord("r")
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, 16, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 0.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 1, 1)
    ox, oy, oz = v.origin
    struct.pack_into("<6f", hdr, 256, 0.0, 0.0, 0.0, ox, oy, oz)
    srow = (sx, 0.0, 0.0, ox, 0.0, sy, 0.0, oy, 0.0, 0.0, sz, oz)
    struct.pack_into("<12f", hdr, 280, *srow)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(v: Volume, path: str | os.PathLike) -> None:
    """Write ``v`` as little-endian float32 NIfTI-1 with vox_offset 352."""
    payload = np.ascontiguousarray(v.data.transpose(0, 3, 2, 1), dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(nifti_header(v))
        fh.write(payload)


def stack_channels(vols: Sequence[Volume]) -> Volume:
    """Concatenate volumes along the channel axis (geometry of the first)."""
    if not vols:
        raise ValueError("nothing to stack")
    first = vols[0]
    for v in vols[1:]:
        if v.shape != first.shape:
            raise ShapeError(f"spatial dims {v.shape} differ from {first.shape}")
    return first.like(np.concatenate([v.data for v in vols], axis=0))
