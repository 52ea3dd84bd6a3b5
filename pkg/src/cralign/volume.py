"""Immutable 3D scalar volumes, normalized coordinates, sampling and pyramids.

Coordinates
-----------
Every volume defines a *normalized* coordinate frame that is isotropic in
physical space and centred on the grid. Voxel index ``i`` along an axis with
``n`` voxels of spacing ``s`` maps to::

    c = ((i + 0.5) * s - n * s / 2) / H

where ``H`` is the largest half-extent ``max(n * s) / 2`` over the three axes.
The grid therefore occupies a subset of ``[-1, 1]^3`` and a physical point
keeps the same normalized coordinate at every pyramid level, because
downsampling preserves the physical extent exactly.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError

# Sampling tolerance, in voxels, for points lying on the outer voxel centres.
_EDGE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid.

    ``data`` has shape ``(nx, ny, nz)``; its Fortran-order ravel is the
    x-fastest flat layout used on disk. Arrays are stored read-only.
    """

    data: np.ndarray
    spacing: Tuple[float, float, float]
    header: Optional[bytes] = field(default=None, repr=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True, order="C")
        if data.ndim != 3 or min(data.shape) < 1:
            raise InvalidArgumentError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise InvalidArgumentError(f"spacing must be three positive numbers, got {self.spacing}")
        if not np.all(np.isfinite(data)):
            raise InvalidArgumentError("volume data contains NaN or Inf")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @classmethod
    def from_flat(cls, dims, spacing, flat, header=None):
        """Build a volume from an x-fastest flat array."""
        dims = tuple(int(d) for d in dims)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != int(np.prod(dims)):
            raise InvalidArgumentError(f"flat data of length {flat.size} does not match dims {dims}")
        return cls(flat.reshape(dims, order="F"), spacing, header)

    @property
    def dims(self):
        return tuple(self.data.shape)

    @property
    def flat(self):
        return self.data.ravel(order="F")

    @property
    def extent(self):
        return np.array(self.dims, dtype=float) * np.array(self.spacing)

    @property
    def half_extent(self):
        """Largest half-extent over the axes: the unit of normalized space."""
        return float(self.extent.max() / 2.0)

    def with_data(self, data):
        return Volume(data, self.spacing, self.header)

    def same_grid(self, other, rtol=1e-9):
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing, rtol=rtol, atol=0)

    # -- coordinate maps -------------------------------------------------

    def voxel_to_norm(self):
        """4x4 matrix mapping voxel indices to normalized coordinates."""
        H = self.half_extent
        s = np.array(self.spacing)
        m = np.eye(4)
        m[:3, :3] = np.diag(s / H)
        m[:3, 3] = (0.5 * s - self.extent / 2.0) / H
        return m

    def norm_to_voxel(self):
        H = self.half_extent
        s = np.array(self.spacing)
        m = np.eye(4)
        m[:3, :3] = np.diag(H / s)
        m[:3, 3] = (self.extent / 2.0) / s - 0.5
        return m

    def voxel_to_mm(self):
        """Voxel index to grid-centred millimetre coordinates."""
        s = np.array(self.spacing)
        m = np.eye(4)
        m[:3, :3] = np.diag(s)
        m[:3, 3] = 0.5 * s - self.extent / 2.0
        return m

    def to_voxel(self, c):
        """Normalized coordinates (..., 3) to continuous voxel indices."""
        c = np.asarray(c, dtype=float)
        H = self.half_extent
        s = np.array(self.spacing)
        return (c * H + self.extent / 2.0) / s - 0.5

    def to_norm(self, ijk):
        ijk = np.asarray(ijk, dtype=float)
        s = np.array(self.spacing)
        return ((ijk + 0.5) * s - self.extent / 2.0) / self.half_extent

    def grid_coords(self):
        """Normalized coordinates of every voxel centre, shape (nx, ny, nz, 3)."""
        axes = [self.to_norm_axis(a) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_norm_axis(self, axis):
        n, s = self.dims[axis], self.spacing[axis]
        return ((np.arange(n) + 0.5) * s - n * s / 2.0) / self.half_extent


# -- interpolation -------------------------------------------------------


def _valid_mask(u, dims, margin=0.0):
    valid = np.ones(u.shape[:-1], dtype=bool)
    tol = margin + _EDGE_TOL
    for a in range(3):
        valid &= (u[..., a] >= -tol) & (u[..., a] <= dims[a] - 1 + tol)
    return valid


def trilinear(data, u, with_gradient=False, margin=0.0):
    """Trilinear interpolation of ``data`` at voxel coordinates ``u`` (N, 3).

    Returns ``(values, valid)`` or ``(values, valid, grad)`` where ``grad``
    (N, 3) is the derivative of the interpolant with respect to ``u``.
    Points outside the closed hull of voxel centres are invalid and get value
    0 and zero gradient. A positive ``margin`` (voxels) widens the valid
    region; there the border cell's interpolant is continued linearly.
    """
    dims = data.shape
    u = np.asarray(u, dtype=float)
    valid = _valid_mask(u, dims, margin)
    flat = data.ravel()
    strides = (dims[1] * dims[2], dims[2], 1)
    base = np.zeros(u.shape[0], dtype=np.intp)
    step = []
    f = []
    for a in range(3):
        ua = np.clip(u[:, a], -margin, dims[a] - 1 + margin)
        fl = np.clip(np.floor(ua), 0, max(dims[a] - 2, 0))
        f.append(ua - fl)
        base += fl.astype(np.intp) * strides[a]
        step.append(strides[a] if dims[a] > 1 else 0)
    fx, fy, fz = f
    sx, sy, sz = step
    c000 = flat[base]
    c100 = flat[base + sx]
    c010 = flat[base + sy]
    c110 = flat[base + (sx + sy)]
    c001 = flat[base + sz]
    c101 = flat[base + (sx + sz)]
    c011 = flat[base + (sy + sz)]
    c111 = flat[base + (sx + sy + sz)]
    gx, gy, gz = 1 - fx, 1 - fy, 1 - fz
    # interpolate along x, then y, then z
    c00 = gx * c000 + fx * c100
    c10 = gx * c010 + fx * c110
    c01 = gx * c001 + fx * c101
    c11 = gx * c011 + fx * c111
    c0 = gy * c00 + fy * c10
    c1 = gy * c01 + fy * c11
    values = gz * c0 + fz * c1
    values = np.where(valid, values, 0.0)
    if not with_gradient:
        return values, valid
    grad = np.empty(u.shape)
    dx0 = c100 - c000
    dx1 = c110 - c010
    dx2 = c101 - c001
    dx3 = c111 - c011
    grad[:, 0] = gz * (gy * dx0 + fy * dx1) + fz * (gy * dx2 + fy * dx3)
    grad[:, 1] = gz * (c10 - c00) + fz * (c11 - c01)
    grad[:, 2] = c1 - c0
    # an axis of length one has a flat interpolant
    for a in range(3):
        if dims[a] == 1:
            grad[:, a] = 0.0
    grad[~valid] = 0.0
    return values, valid, grad


def nearest(data, u):
    dims = data.shape
    u = np.asarray(u, dtype=float)
    valid = _valid_mask(u, dims)
    idx = np.empty(u.shape, dtype=np.intp)
    for a in range(3):
        idx[:, a] = np.clip(np.floor(u[:, a] + 0.5), 0, dims[a] - 1)
    values = data[idx[:, 0], idx[:, 1], idx[:, 2]]
    return np.where(valid, values, 0.0), valid


def sample_trilinear(vol, c):
    """Sample ``vol`` at normalized coordinate(s) ``c`` with trilinear weights.

    A single coordinate returns ``(value, valid)`` scalars; an (N, 3) array
    returns arrays.
    """
    c = np.asarray(c, dtype=float)
    single = c.ndim == 1
    values, valid = trilinear(vol.data, vol.to_voxel(np.atleast_2d(c)))
    if single:
        return float(values[0]), bool(valid[0])
    return values, valid


def sample_nearest(vol, c):
    c = np.asarray(c, dtype=float)
    single = c.ndim == 1
    values, valid = nearest(vol.data, vol.to_voxel(np.atleast_2d(c)))
    if single:
        return float(values[0]), bool(valid[0])
    return values, valid


# -- pyramid ---------------------------------------------------------------


def _resample_axis(arr, axis, positions):
    """Linear interpolation of ``arr`` along ``axis`` at fractional indices."""
    n = arr.shape[axis]
    positions = np.clip(positions, 0.0, n - 1)
    lo = np.minimum(np.floor(positions).astype(np.intp), max(n - 2, 0))
    hi = np.minimum(lo + 1, n - 1)
    w = positions - lo
    shape = [1, 1, 1]
    shape[axis] = -1
    w = w.reshape(shape)
    return (1 - w) * np.take(arr, lo, axis=axis) + w * np.take(arr, hi, axis=axis)


def gaussian_downsample(vol, factor):
    """Blur with sigma = factor / 2 voxels, then resample every ``factor`` voxels.

    Output dims are ``ceil(n / factor)`` and spacing is ``extent / new_dim``
    per axis, so the physical extent is preserved exactly. Samples are taken
    at the new voxel centres (cell-centred geometry), which for divisible
    dims is the middle of each ``factor``-wide block.
    """
    if int(factor) != factor or factor < 1:
        raise InvalidArgumentError(f"downsampling factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return Volume(vol.data, vol.spacing, vol.header)
    new_dims = [math.ceil(n / factor) for n in vol.dims]
    if min(new_dims) < 1:
        raise InvalidArgumentError("downsampling would produce an empty axis")
    blurred = ndimage.gaussian_filter(vol.data, sigma=0.5 * factor, truncate=3.0, mode="nearest")
    out = blurred
    spacing = []
    for a, (n, m) in enumerate(zip(vol.dims, new_dims)):
        step = n / m
        positions = (np.arange(m) + 0.5) * step - 0.5
        out = _resample_axis(out, a, positions)
        spacing.append(vol.spacing[a] * step)
    return Volume(out, tuple(spacing), vol.header)


def build_pyramid(vol, factors):
    return [gaussian_downsample(vol, f) for f in factors]


# -- intensity normalization ---------------------------------------------


class DegenerateRangeWarning(UserWarning):
    """Intensity normalization met a constant (or near-constant) volume."""


@dataclass(frozen=True)
class NormalizationPolicy:
    mode: str = "percentile"
    p_lo: float = 0.5
    p_hi: float = 99.5

    def __post_init__(self):
        if self.mode not in ("minmax", "percentile"):
            raise InvalidArgumentError(f"unknown normalization mode {self.mode!r}")
        if not 0.0 <= self.p_lo < self.p_hi <= 100.0:
            raise InvalidArgumentError("percentiles must satisfy 0 <= p_lo < p_hi <= 100")


def intensity_range(data, policy):
    if policy.mode == "minmax":
        return float(data.min()), float(data.max())
    lo, hi = np.percentile(data, [policy.p_lo, policy.p_hi])
    return float(lo), float(hi)


def normalize_intensity(vol, policy=NormalizationPolicy()):
    """Clip to the policy's range and map linearly onto [0, 1].

    A degenerate range (hi <= lo) yields an all-zero volume and a
    :class:`DegenerateRangeWarning`.
    """
    lo, hi = intensity_range(vol.data, policy)
    if not hi > lo:
        warnings.warn(f"degenerate intensity range [{lo}, {hi}]; returning zeros", DegenerateRangeWarning, stacklevel=2)
        return vol.with_data(np.zeros(vol.dims))
    out = (np.clip(vol.data, lo, hi) - lo) / (hi - lo)
    return vol.with_data(np.clip(out, 0.0, 1.0))
