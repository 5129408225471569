"""Dense 3D grid containers and the geometric/filtering primitives.

Conventions used throughout the package:

* Arrays are indexed ``(z, y, x)`` with x fastest in memory (C order).
* ``spacing`` is ``(sz, sy, sx)`` in mm per voxel.
* Rotations are intrinsic z-y-x Euler angles (degrees), right-handed:
  a positive angle about +z rotates +x towards +y. Rotation and scaling
  of masks resample with nearest neighbor about the foreground centroid,
  in voxel index space.
* All operations are pure; inputs are never mutated.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class NumericFault(RuntimeError):
    """Non-finite values showed up where finite ones are required."""


def _check_grid(data: np.ndarray, spacing: tuple[float, float, float]) -> None:
    if data.ndim != 3:
        raise ValueError(f"expected 3-d grid, got shape {data.shape}")
    if min(data.shape) < 1:
        raise ValueError(f"all dims must be >= 1, got {data.shape}")
    if len(spacing) != 3 or any(s <= 0 for s in spacing):
        raise ValueError(f"spacing components must be > 0, got {spacing}")


@dataclass
class Volume:
    """Scalar grid (image intensities or probability maps), float32."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_grid(self.data, self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class Mask:
    """Binary grid, uint8 with values in {0, 1}."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.uint8)
        if arr.size and arr.max() > 1:
            raise ValueError("mask values must be 0 or 1")
        self.data = arr
        self.spacing = tuple(float(s) for s in self.spacing)
        _check_grid(self.data, self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


# ---------------------------------------------------------------------------
# boolean algebra

def count(m: Mask) -> int:
    return int(m.data.sum())


def _same_dims(a, b) -> None:
    if a.dims != b.dims:
        raise ValueError(f"dim mismatch: {a.dims} vs {b.dims}")


def union(a: Mask, b: Mask) -> Mask:
    _same_dims(a, b)
    return Mask(a.data | b.data, a.spacing)


def intersection(a: Mask, b: Mask) -> Mask:
    _same_dims(a, b)
    return Mask(a.data & b.data, a.spacing)


# ---------------------------------------------------------------------------
# geometric transforms

def _centroid(m: Mask) -> np.ndarray:
    """Foreground centroid in voxel coords; grid center for empty masks."""
    idx = np.nonzero(m.data)
    if idx[0].size == 0:
        return (np.array(m.dims, dtype=np.float64) - 1.0) / 2.0
    return np.array([c.mean() for c in idx], dtype=np.float64)


def rotation_matrix(angles_deg) -> np.ndarray:
    """Intrinsic z-y-x Euler rotation acting on (z, y, x) column vectors."""
    az, ay, ax = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    cz, sz = np.cos(az), np.sin(az)
    cy, sy = np.cos(ay), np.sin(ay)
    cx, sx = np.cos(ax), np.sin(ax)
    # Matrices in (x, y, z) coordinates, right-handed.
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    r_xyz = rz @ ry @ rx
    # Re-express for (z, y, x) vector order.
    perm = np.array([[0, 0, 1], [0, 1, 0], [1, 0, 0]], dtype=np.float64)
    return perm @ r_xyz @ perm


def _voxel_centers(dims) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims),
                        indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=0)  # (3, N)


def _nn_sample_mask(m: Mask, src_coords: np.ndarray) -> Mask:
    """Nearest-neighbor sample of m at (3, N) voxel coords; outside -> 0."""
    idx = np.rint(src_coords).astype(np.int64)
    valid = np.ones(idx.shape[1], dtype=bool)
    for ax, n in enumerate(m.dims):
        valid &= (idx[ax] >= 0) & (idx[ax] < n)
    out = np.zeros(m.dims, dtype=np.uint8).ravel()
    vi = np.flatnonzero(valid)
    out[vi] = m.data[idx[0, vi], idx[1, vi], idx[2, vi]]
    return Mask(out.reshape(m.dims), m.spacing)


def rotate_mask(m: Mask, angles_deg) -> Mask:
    """Rotate foreground about its centroid, nearest-neighbor resampling."""
    angles = np.asarray(angles_deg, dtype=np.float64)
    if not np.all(np.isfinite(angles)):
        raise ValueError("angles must be finite")
    if np.all(angles == 0):
        return Mask(m.data.copy(), m.spacing)
    c = _centroid(m)
    rinv = rotation_matrix(angles).T
    src = rinv @ (_voxel_centers(m.dims) - c[:, None]) + c[:, None]
    return _nn_sample_mask(m, src)


def scale_mask(m: Mask, factor: float) -> Mask:
    """Scale foreground about its centroid, nearest-neighbor resampling."""
    if not (0.1 <= factor <= 10.0):
        raise ValueError(f"scale factor {factor} outside [0.1, 10]")
    if factor == 1.0:
        return Mask(m.data.copy(), m.spacing)
    c = _centroid(m)
    src = (_voxel_centers(m.dims) - c[:, None]) / factor + c[:, None]
    return _nn_sample_mask(m, src)


def translate_mask(m: Mask, offset) -> Mask:
    """Integer shift; voxels pushed outside the grid are dropped."""
    off = tuple(int(o) for o in offset)
    out = np.zeros_like(m.data)
    src = []
    dst = []
    for o, n in zip(off, m.dims):
        lo_src, hi_src = max(0, -o), min(n, n - o)
        if lo_src >= hi_src:
            return Mask(out, m.spacing)
        src.append(slice(lo_src, hi_src))
        dst.append(slice(lo_src + o, hi_src + o))
    out[tuple(dst)] = m.data[tuple(src)]
    return Mask(out, m.spacing)


# ---------------------------------------------------------------------------
# connected components

_STRUCT_6 = ndimage.generate_binary_structure(3, 1)
_STRUCT_26 = np.ones((3, 3, 3), dtype=bool)


def connected_components(m: Mask, connectivity: int = 26):
    """Label foreground components; returns (labels int32 grid, count)."""
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    struct = _STRUCT_6 if connectivity == 6 else _STRUCT_26
    labels, n = ndimage.label(m.data, structure=struct)
    return labels.astype(np.int32), int(n)


# ---------------------------------------------------------------------------
# filtering / resampling

def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-d Gaussian truncated at 3*sigma, renormalized to sum 1."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    radius = int(np.floor(3.0 * sigma))
    if sigma == 0 or radius == 0:
        return np.array([1.0])
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(v: Volume, sigma: float) -> Volume:
    """Separable Gaussian blur with zero boundary handling."""
    k = gaussian_kernel(sigma)
    if k.size == 1:
        return Volume(v.data.copy(), v.spacing)
    out = v.data.astype(np.float64)
    for axis in range(3):
        out = ndimage.convolve1d(out, k, axis=axis, mode="constant", cval=0.0)
    return Volume(out.astype(np.float32), v.spacing)


def _interp_axis_coords(n_out: int, scale: float, n_in: int):
    """Linear interpolation indices/weights, in-coord = out-index * scale."""
    x = np.arange(n_out, dtype=np.float64) * scale
    x = np.clip(x, 0.0, n_in - 1.0)
    i0 = np.floor(x).astype(np.int64)
    i0 = np.minimum(i0, n_in - 2) if n_in > 1 else np.zeros_like(i0)
    w = x - i0
    return i0, w


def resample(v, target_spacing: float):
    """Resample to isotropic target spacing.

    Trilinear for Volume, nearest-neighbor for Mask. Voxel i sits at
    physical position i * spacing along each axis (origin at voxel 0).
    """
    if target_spacing <= 0:
        raise ValueError("target_spacing must be > 0")
    dims_out = tuple(max(1, int(round(n * s / target_spacing)))
                     for n, s in zip(v.dims, v.spacing))
    new_spacing = (target_spacing,) * 3
    if dims_out == v.dims and all(s == target_spacing for s in v.spacing):
        data = v.data.copy()
        return type(v)(data, new_spacing)

    scales = [target_spacing / s for s in v.spacing]
    if isinstance(v, Mask):
        idx = []
        for ax in range(3):
            x = np.arange(dims_out[ax], dtype=np.float64) * scales[ax]
            idx.append(np.clip(np.rint(x).astype(np.int64), 0, v.dims[ax] - 1))
        data = v.data[np.ix_(idx[0], idx[1], idx[2])]
        return Mask(data, new_spacing)

    data = v.data.astype(np.float64)
    for ax in range(3):
        i0, w = _interp_axis_coords(dims_out[ax], scales[ax], v.dims[ax])
        lo = np.take(data, i0, axis=ax)
        hi = np.take(data, np.minimum(i0 + 1, v.dims[ax] - 1), axis=ax)
        shape = [1, 1, 1]
        shape[ax] = -1
        wb = w.reshape(shape)
        data = lo * (1.0 - wb) + hi * wb
    return Volume(data.astype(np.float32), new_spacing)


def crop(v, origin, size):
    """Extract a sub-grid; voxels outside the input are zero-filled.

    The crop box may overlap the boundary but must intersect the grid.
    """
    origin = tuple(int(o) for o in origin)
    size = tuple(int(s) for s in size)
    if any(s < 1 for s in size):
        raise ValueError(f"crop size must be >= 1, got {size}")
    for o, s, n in zip(origin, size, v.dims):
        if o + s <= 0 or o >= n:
            raise ValueError(
                f"crop box origin={origin} size={size} misses grid {v.dims}")
    out = np.zeros(size, dtype=v.data.dtype)
    src = []
    dst = []
    for o, s, n in zip(origin, size, v.dims):
        lo, hi = max(0, o), min(n, o + s)
        src.append(slice(lo, hi))
        dst.append(slice(lo - o, hi - o))
    out[tuple(dst)] = v.data[tuple(src)]
    return type(v)(out, v.spacing)


# ---------------------------------------------------------------------------
# volume (trilinear) transforms used by training augmentation

def _trilinear_sample(data: np.ndarray, src: np.ndarray,
                      fill: float) -> np.ndarray:
    """Sample (3, N) voxel coords with trilinear weights; outside -> fill."""
    dims = data.shape
    out = np.full(src.shape[1], fill, dtype=np.float64)
    inside = np.ones(src.shape[1], dtype=bool)
    for ax, n in enumerate(dims):
        inside &= (src[ax] >= 0) & (src[ax] <= n - 1)
    p = src[:, inside]
    i0 = np.floor(p).astype(np.int64)
    for ax, n in enumerate(dims):
        i0[ax] = np.minimum(i0[ax], max(n - 2, 0))
    f = p - i0
    acc = np.zeros(p.shape[1], dtype=np.float64)
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                wz = f[0] if dz else 1.0 - f[0]
                wy = f[1] if dy else 1.0 - f[1]
                wx = f[2] if dx else 1.0 - f[2]
                iz = np.minimum(i0[0] + dz, dims[0] - 1)
                iy = np.minimum(i0[1] + dy, dims[1] - 1)
                ix = np.minimum(i0[2] + dx, dims[2] - 1)
                acc += wz * wy * wx * data[iz, iy, ix]
    out[inside] = acc
    return out


def rotate_scale_volume(v: Volume, angles_deg, factor: float,
                        fill: float = 0.0) -> Volume:
    """Rotate then scale a scalar grid about its center, trilinear sampling."""
    c = (np.array(v.dims, dtype=np.float64) - 1.0) / 2.0
    rinv = rotation_matrix(angles_deg).T
    rel = (_voxel_centers(v.dims) - c[:, None]) / factor
    src = rinv @ rel + c[:, None]
    out = _trilinear_sample(v.data.astype(np.float64), src, fill)
    return Volume(out.reshape(v.dims).astype(np.float32), v.spacing)


def rotate_scale_mask(m: Mask, angles_deg, factor: float) -> Mask:
    """Companion to rotate_scale_volume for label grids (nearest neighbor)."""
    c = (np.array(m.dims, dtype=np.float64) - 1.0) / 2.0
    rinv = rotation_matrix(angles_deg).T
    rel = (_voxel_centers(m.dims) - c[:, None]) / factor
    src = rinv @ rel + c[:, None]
    return _nn_sample_mask(m, src)


# ---------------------------------------------------------------------------
# PVOL binary format

_PVOL_MAGIC = b"PVOL"
_PVOL_VERSION = 1
_DTYPE_F32 = 0
_DTYPE_U8 = 1


def write_pvol(path, v) -> None:
    """Write a Volume/Mask in the PVOL container (little-endian)."""
    dtype_code = _DTYPE_U8 if isinstance(v, Mask) else _DTYPE_F32
    header = _PVOL_MAGIC + struct.pack("<HB", _PVOL_VERSION, dtype_code)
    header += struct.pack("<3I", *v.dims)
    header += struct.pack("<3f", *v.spacing)
    payload = v.data.astype("<u1" if dtype_code == _DTYPE_U8 else "<f4")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes(order="C"))


def read_pvol(path):
    """Read a PVOL file; returns Mask for u8 payloads, Volume for f32."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _PVOL_MAGIC:
        raise ValueError(f"{path}: not a PVOL file")
    version, dtype_code = struct.unpack_from("<HB", raw, 4)
    if version != _PVOL_VERSION:
        raise ValueError(f"{path}: unsupported PVOL version {version}")
    dims = struct.unpack_from("<3I", raw, 7)
    spacing = struct.unpack_from("<3f", raw, 19)
    n = dims[0] * dims[1] * dims[2]
    if dtype_code == _DTYPE_U8:
        data = np.frombuffer(raw, dtype="<u1", count=n, offset=31)
        return Mask(data.reshape(dims).copy(), spacing)
    if dtype_code == _DTYPE_F32:
        data = np.frombuffer(raw, dtype="<f4", count=n, offset=31)
        return Volume(data.reshape(dims).copy(), spacing)
    raise ValueError(f"{path}: unknown dtype code {dtype_code}")
